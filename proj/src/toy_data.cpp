#include "particleformer/toy_data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "particleformer/error.hpp"
#include "particleformer/rng.hpp"
#include "particleformer/trajectory_io.hpp"

namespace pf {

namespace {

constexpr int kSubsteps = 10;

BoundarySet floor_samples(double height, int64_t per_axis = 8) {
    BoundarySet b;
    b.count = per_axis * per_axis;
    b.positions = Tensor({b.count, 3});
    b.attributes = Tensor({b.count, 3});
    int64_t i = 0;
    for (int64_t r = 0; r < per_axis; ++r) {
        for (int64_t c = 0; c < per_axis; ++c, ++i) {
            b.positions.at(i, 0) = (r + 0.5) / (double)per_axis;
            b.positions.at(i, 1) = (c + 0.5) / (double)per_axis;
            b.positions.at(i, 2) = height;
            b.attributes.at(i, 2) = 1.0;  // +z normal
        }
    }
    return b;
}

Tensor gravity_forces(const Tensor& attrs, const double g[3], const std::vector<bool>* pinned = nullptr) {
    int64_t n = attrs.shape[0];
    Tensor f({n, 3});
    for (int64_t i = 0; i < n; ++i) {
        if (pinned && (*pinned)[(size_t)i]) continue;
        for (int64_t c = 0; c < 3; ++c) f.at(i, c) = attrs.at(i, 0) * g[c];
    }
    return f;
}

Trajectory skeleton(double dt, Tensor attrs, Tensor rest, BoundarySet boundary, Topology topo) {
    Trajectory t;
    t.dt = dt;
    t.attributes = std::move(attrs);
    t.rest_positions = std::move(rest);
    t.boundary = std::move(boundary);
    t.topology = std::move(topo);
    return t;
}

}  // namespace

Trajectory gen_ballistic(const ToyParams& p, uint64_t seed) {
    Rng rng(seed);
    int64_t n = p.particles;
    Tensor attrs({n, 1});
    Tensor x0({n, 3}), v0({n, 3});
    for (int64_t i = 0; i < n; ++i) {
        attrs.at(i, 0) = rng.uniform(0.5, 2.0);
        x0.at(i, 0) = rng.uniform(0.1, 0.9);
        x0.at(i, 1) = rng.uniform(0.1, 0.9);
        x0.at(i, 2) = rng.uniform(0.4, 0.9);
        for (int64_t c = 0; c < 3; ++c) v0.at(i, c) = rng.uniform(-0.3, 0.3);
    }
    Trajectory t = skeleton(p.dt, attrs, x0, BoundarySet::none(), Topology{});
    Tensor forces = gravity_forces(attrs, p.gravity);
    for (int64_t f = 0; f < p.frames; ++f) {
        double time = f * p.dt;
        Trajectory::Frame fr;
        fr.positions = Tensor({n, 3});
        fr.velocities = Tensor({n, 3});
        fr.forces = forces;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < 3; ++c) {
                fr.positions.at(i, c) = x0.at(i, c) + v0.at(i, c) * time + 0.5 * p.gravity[c] * time * time;
                fr.velocities.at(i, c) = v0.at(i, c) + p.gravity[c] * time;
            }
        t.frames.push_back(std::move(fr));
    }
    return t;
}

Trajectory gen_floor_contact(const ToyParams& p, uint64_t seed) {
    if (!(p.contact_stiffness > 0)) fail_usage("gen_floor_contact: stiffness must be positive");
    Rng rng(seed);
    int64_t n = p.particles;
    Tensor attrs({n, 1});
    Tensor x({n, 3}), v({n, 3});
    for (int64_t i = 0; i < n; ++i) {
        attrs.at(i, 0) = rng.uniform(0.5, 2.0);
        x.at(i, 0) = rng.uniform(0.1, 0.9);
        x.at(i, 1) = rng.uniform(0.1, 0.9);
        x.at(i, 2) = rng.uniform(p.floor_height + 0.15, 0.9);
        for (int64_t c = 0; c < 3; ++c) v.at(i, c) = rng.uniform(-0.3, 0.3);
    }
    Trajectory t = skeleton(p.dt, attrs, x, floor_samples(p.floor_height), Topology{});
    Tensor forces = gravity_forces(attrs, p.gravity);
    double h = p.dt / kSubsteps;
    for (int64_t f = 0; f < p.frames; ++f) {
        Trajectory::Frame fr;
        fr.positions = x;
        fr.velocities = v;
        fr.forces = forces;
        t.frames.push_back(std::move(fr));
        for (int s = 0; s < kSubsteps; ++s) {
            for (int64_t i = 0; i < n; ++i) {
                double m = attrs.at(i, 0);
                double acc[3] = {p.gravity[0], p.gravity[1], p.gravity[2]};
                double depth = p.floor_height - x.at(i, 2);
                if (depth > 0) {
                    acc[2] += (p.contact_stiffness * depth - p.contact_damping * v.at(i, 2)) / m;
                }
                for (int64_t c = 0; c < 3; ++c) {
                    v.at(i, c) += h * acc[c];
                    x.at(i, c) += h * v.at(i, c);
                }
            }
        }
    }
    t.frames.resize((size_t)p.frames);
    return t;
}

Trajectory gen_spring_lattice(const ToyParams& p, uint64_t seed) {
    if (p.grid_x < 2 || p.grid_y < 1) fail_usage("gen_spring_lattice: grid must be at least 2x1");
    Rng rng(seed);
    int64_t nx = p.grid_x, ny = p.grid_y, n = nx * ny;
    auto id = [ny](int64_t r, int64_t c) { return (int32_t)(r * ny + c); };

    std::vector<bool> pinned((size_t)n, false);
    if (p.pin_corners) {
        pinned[(size_t)id(0, 0)] = true;
        pinned[(size_t)id(0, ny - 1)] = true;
        pinned[(size_t)id(nx - 1, 0)] = true;
        pinned[(size_t)id(nx - 1, ny - 1)] = true;
    }

    Tensor attrs({n, 2});
    Tensor x({n, 3}), v({n, 3});
    double cx = 0.5 - 0.5 * (nx - 1) * p.spring_rest_length * (1.0 + p.spring_initial_stretch);
    double cy = 0.5 - 0.5 * (ny - 1) * p.spring_rest_length;
    for (int64_t r = 0; r < nx; ++r)
        for (int64_t c = 0; c < ny; ++c) {
            int64_t i = id(r, c);
            attrs.at(i, 0) = 1.0;
            attrs.at(i, 1) = pinned[(size_t)i] ? 1.0 : 0.0;
            x.at(i, 0) = cx + r * p.spring_rest_length * (1.0 + p.spring_initial_stretch);
            x.at(i, 1) = cy + c * p.spring_rest_length;
            x.at(i, 2) = 0.7;
        }
    // small random jitter on free-particle velocities for sequence diversity
    for (int64_t i = 0; i < n; ++i)
        if (!pinned[(size_t)i])
            for (int64_t c = 0; c < 3; ++c) v.at(i, c) = rng.uniform(-p.velocity_jitter, p.velocity_jitter);

    Topology topo;
    for (int64_t r = 0; r < nx; ++r)
        for (int64_t c = 0; c < ny; ++c) {
            if (c + 1 < ny) topo.edges.push_back({id(r, c), id(r, c + 1)});
            if (r + 1 < nx) topo.edges.push_back({id(r, c), id(r + 1, c)});
        }

    Trajectory t = skeleton(p.dt, attrs, x, BoundarySet::none(), topo);
    Tensor forces = gravity_forces(attrs, p.gravity, &pinned);
    auto adj = topo.adjacency(n);
    double h = p.dt / kSubsteps;
    Tensor acc({n, 3});
    for (int64_t f = 0; f < p.frames; ++f) {
        Trajectory::Frame fr;
        fr.positions = x;
        fr.velocities = v;
        fr.forces = forces;
        t.frames.push_back(std::move(fr));
        for (int s = 0; s < kSubsteps; ++s) {
            acc.fill(0.0);
            for (int64_t i = 0; i < n; ++i) {
                if (pinned[(size_t)i]) continue;
                double m = attrs.at(i, 0);
                for (int64_t c = 0; c < 3; ++c) acc.at(i, c) = p.gravity[c];
                for (int32_t j : adj[(size_t)i]) {
                    double d[3], dv[3], len2 = 0.0;
                    for (int64_t c = 0; c < 3; ++c) {
                        d[c] = x.at(j, c) - x.at(i, c);
                        dv[c] = v.at(j, c) - v.at(i, c);
                        len2 += d[c] * d[c];
                    }
                    double len = std::sqrt(len2);
                    if (len < 1e-12) continue;
                    double along = (dv[0] * d[0] + dv[1] * d[1] + dv[2] * d[2]) / len;
                    double mag = p.spring_stiffness * (len - p.spring_rest_length) + p.spring_damping * along;
                    for (int64_t c = 0; c < 3; ++c) acc.at(i, c) += mag * d[c] / (len * m);
                }
            }
            for (int64_t i = 0; i < n; ++i) {
                if (pinned[(size_t)i]) continue;
                for (int64_t c = 0; c < 3; ++c) {
                    v.at(i, c) += h * acc.at(i, c);
                    x.at(i, c) += h * v.at(i, c);
                }
            }
        }
    }
    t.frames.resize((size_t)p.frames);
    return t;
}

Trajectory gen_slide_friction(const ToyParams& p, uint64_t seed) {
    Rng rng(seed);
    int64_t n = p.particles;
    Tensor attrs({n, 2});
    Tensor x({n, 3}), v({n, 3});
    double rest_depth = 0.0;  // equilibrium penetration for unit mass
    for (int64_t i = 0; i < n; ++i) {
        attrs.at(i, 0) = 1.0;
        attrs.at(i, 1) = p.friction_mu;
        rest_depth = attrs.at(i, 0) * (-p.gravity[2]) / p.contact_stiffness;
        x.at(i, 0) = rng.uniform(0.10, 0.20);
        x.at(i, 1) = rng.uniform(0.35, 0.65);
        x.at(i, 2) = p.floor_height - rest_depth + rng.uniform(0.0, 0.02);
        v.at(i, 0) = 1.2 + rng.uniform(-0.05, 0.05);
    }
    Trajectory t = skeleton(p.dt, attrs, x, floor_samples(p.floor_height), Topology{});
    Tensor forces = gravity_forces(attrs, p.gravity);
    double h = p.dt / kSubsteps;
    const double eps_v = 0.01;
    for (int64_t f = 0; f < p.frames; ++f) {
        Trajectory::Frame fr;
        fr.positions = x;
        fr.velocities = v;
        fr.forces = forces;
        t.frames.push_back(std::move(fr));
        for (int s = 0; s < kSubsteps; ++s) {
            for (int64_t i = 0; i < n; ++i) {
                double m = attrs.at(i, 0);
                double mu = attrs.at(i, 1);
                double acc[3] = {p.gravity[0], p.gravity[1], p.gravity[2]};
                double depth = p.floor_height - x.at(i, 2);
                if (depth > 0) {
                    double fn = p.contact_stiffness * depth;
                    acc[2] += (fn - p.contact_damping * v.at(i, 2)) / m;
                    double vt = std::sqrt(v.at(i, 0) * v.at(i, 0) + v.at(i, 1) * v.at(i, 1));
                    double scale = mu * fn / (vt + eps_v) / m;
                    acc[0] -= scale * v.at(i, 0);
                    acc[1] -= scale * v.at(i, 1);
                }
                for (int64_t c = 0; c < 3; ++c) {
                    v.at(i, c) += h * acc[c];
                    x.at(i, c) += h * v.at(i, c);
                }
            }
        }
    }
    t.frames.resize((size_t)p.frames);
    return t;
}

void write_dataset(const std::string& dir, const std::string& base,
                   const std::vector<Trajectory>& trajectories, double train_frac, double val_frac) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    int64_t total = (int64_t)trajectories.size();
    int64_t n_train = (int64_t)std::llround(train_frac * (double)total);
    int64_t n_val = (int64_t)std::llround(val_frac * (double)total);
    n_train = std::min(n_train, total);
    n_val = std::min(n_val, total - n_train);
    std::ofstream manifest(dir + "/manifest.txt");
    if (!manifest) fail_validation("dataset: cannot write manifest in " + dir);
    for (int64_t i = 0; i < total; ++i) {
        std::string name = base + "_" + std::to_string(i) + ".wpt";
        save_trajectory(trajectories[(size_t)i], dir + "/" + name);
        const char* split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
        manifest << name << " " << split << "\n";
    }
}

DatasetSplits load_dataset(const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.txt");
    if (!manifest) fail_validation("dataset: missing manifest.txt in " + dir);
    DatasetSplits out;
    std::string name, split;
    while (manifest >> name >> split) {
        Trajectory t = load_trajectory(dir + "/" + name);
        if (split == "train")
            out.train.push_back(std::move(t));
        else if (split == "val")
            out.val.push_back(std::move(t));
        else if (split == "test")
            out.test.push_back(std::move(t));
        else
            fail_validation("dataset: unknown split tag `" + split + "` in manifest");
    }
    if (out.train.empty() && out.val.empty() && out.test.empty())
        fail_validation("dataset: manifest lists no trajectories");
    return out;
}

}  // namespace pf
