#include "particleformer/state.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "particleformer/error.hpp"

namespace pf {

namespace {
void check_finite_field(const Tensor& t, const std::string& field) {
    if (!t.all_finite()) fail_validation("non-finite value in " + field);
}

void check_dims(const Tensor& t, int64_t rows, int64_t cols, const std::string& field) {
    if (t.shape.size() != 2 || t.shape[0] != rows || t.shape[1] != cols)
        fail_validation(field + ": expected [" + std::to_string(rows) + "," + std::to_string(cols) + "], got " +
                        shape_str(t.shape));
}
}  // namespace

std::vector<double> ParticleSystem::masses() const {
    std::vector<double> m((size_t)count);
    for (int64_t i = 0; i < count; ++i) m[i] = attributes.at(i, 0);
    return m;
}

void ParticleSystem::validate() const {
    if (count < 1) fail_validation("ParticleSystem.count: must be >= 1");
    check_dims(positions, count, 3, "ParticleSystem.positions");
    check_dims(velocities, count, 3, "ParticleSystem.velocities");
    check_dims(forces, count, 3, "ParticleSystem.forces");
    if (attributes.shape.size() != 2 || attributes.shape[0] != count || attributes.shape[1] < 1)
        fail_validation("ParticleSystem.attributes: expected [N,Cp] with Cp >= 1, got " + shape_str(attributes.shape));
    check_finite_field(positions, "ParticleSystem.positions");
    check_finite_field(velocities, "ParticleSystem.velocities");
    check_finite_field(forces, "ParticleSystem.forces");
    check_finite_field(attributes, "ParticleSystem.attributes");
    for (int64_t i = 0; i < count; ++i)
        if (!(attributes.at(i, 0) > 0.0))
            fail_validation("ParticleSystem.attributes: mass channel must be strictly positive (particle " +
                            std::to_string(i) + ")");
    if (has_rest) {
        check_dims(rest_positions, count, 3, "ParticleSystem.rest_positions");
        check_finite_field(rest_positions, "ParticleSystem.rest_positions");
    }
}

void BoundarySet::validate() const {
    if (count < 0) fail_validation("BoundarySet.count: negative");
    check_dims(positions, count, 3, "BoundarySet.positions");
    if (attributes.shape.size() != 2 || attributes.shape[0] != count)
        fail_validation("BoundarySet.attributes: expected [Nb,Cb], got " + shape_str(attributes.shape));
    check_finite_field(positions, "BoundarySet.positions");
    check_finite_field(attributes, "BoundarySet.attributes");
    if (count > 0 && attr_dim() >= 3) {
        for (int64_t i = 0; i < count; ++i) {
            double n2 = 0.0;
            for (int64_t c = 0; c < 3; ++c) n2 += attributes.at(i, c) * attributes.at(i, c);
            if (std::fabs(std::sqrt(n2) - 1.0) > 1e-6)
                fail_validation("BoundarySet.attributes: normal channels not unit length (sample " +
                                std::to_string(i) + ")");
        }
    }
}

void Topology::validate(int64_t n) const {
    std::set<std::pair<int32_t, int32_t>> seen;
    for (auto [i, j] : edges) {
        if (i == j) fail_validation("Topology.edges: self edge at vertex " + std::to_string(i));
        if (i < 0 || j < 0 || i >= n || j >= n) fail_validation("Topology.edges: index out of range");
        auto key = std::minmax(i, j);
        if (!seen.insert({key.first, key.second}).second)
            fail_validation("Topology.edges: duplicate undirected edge (" + std::to_string(i) + "," +
                            std::to_string(j) + ")");
    }
}

std::vector<std::vector<int32_t>> Topology::adjacency(int64_t n) const {
    std::vector<std::vector<int32_t>> adj((size_t)n);
    for (auto [i, j] : edges) {
        adj[i].push_back(j);
        adj[j].push_back(i);
    }
    for (auto& a : adj) std::sort(a.begin(), a.end());
    return adj;
}

double Topology::max_edge_length(const Tensor& rest) const {
    double best = 0.0;
    for (auto [i, j] : edges) {
        double d2 = 0.0;
        for (int64_t c = 0; c < 3; ++c) {
            double d = rest.at(j, c) - rest.at(i, c);
            d2 += d * d;
        }
        best = std::max(best, std::sqrt(d2));
    }
    return best;
}

ParticleSystem Trajectory::system_at(int64_t frame) const {
    if (frame < 0 || frame >= frame_count()) fail_usage("Trajectory: frame index out of range");
    ParticleSystem s;
    s.count = particle_count();
    s.positions = frames[frame].positions;
    s.velocities = frames[frame].velocities;
    s.forces = frames[frame].forces;
    s.attributes = attributes;
    s.rest_positions = rest_positions;
    s.has_rest = !topology.empty();
    return s;
}

void Trajectory::validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) fail_validation("Trajectory.dt: must be positive and finite");
    if (frames.empty()) fail_validation("Trajectory.frames: empty");
    int64_t n = particle_count();
    if (n < 1) fail_validation("Trajectory.attributes: no particles");
    for (size_t f = 0; f < frames.size(); ++f) {
        const auto tag = "Trajectory.frames[" + std::to_string(f) + "]";
        check_dims(frames[f].positions, n, 3, tag + ".positions");
        check_dims(frames[f].velocities, n, 3, tag + ".velocities");
        check_dims(frames[f].forces, n, 3, tag + ".forces");
        check_finite_field(frames[f].positions, tag + ".positions");
        check_finite_field(frames[f].velocities, tag + ".velocities");
        check_finite_field(frames[f].forces, tag + ".forces");
    }
    check_finite_field(attributes, "Trajectory.attributes");
    for (int64_t i = 0; i < n; ++i)
        if (!(attributes.at(i, 0) > 0.0)) fail_validation("Trajectory.attributes: non-positive mass");
    check_dims(rest_positions, n, 3, "Trajectory.rest_positions");
    check_finite_field(rest_positions, "Trajectory.rest_positions");
    boundary.validate();
    topology.validate(n);
}

FilledInputs zero_fill_absent(const ParticleSystem& system, const Topology* topology,
                              const BoundarySet* boundary) {
    FilledInputs out;
    out.system = system;
    out.topology = topology ? *topology : Topology{};
    out.boundary = boundary ? *boundary : BoundarySet::none();
    if (!topology) out.system.has_rest = false;
    return out;
}

Tensor mass_matrix_inverse_apply(const ParticleSystem& system, const Tensor& forces) {
    if (forces.shape.size() != 2 || forces.shape[0] != system.count || forces.shape[1] != 3)
        fail_usage("mass_matrix_inverse_apply: forces must be [N,3]");
    Tensor out({system.count, 3});
    for (int64_t i = 0; i < system.count; ++i) {
        double m = system.attributes.at(i, 0);
        if (!(m > 0.0)) fail_validation("mass_matrix_inverse_apply: non-positive mass at particle " +
                                        std::to_string(i));
        for (int64_t c = 0; c < 3; ++c) out.at(i, c) = forces.at(i, c) / m;
    }
    return out;
}

}  // namespace pf
