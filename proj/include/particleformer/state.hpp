#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "particleformer/tensor.hpp"

namespace pf {

// Shared Lagrangian state. Attribute channel 0 is always mass (> 0); the
// remaining channels are dataset-declared (friction, stiffness flags, ...).
struct ParticleSystem {
    int64_t count = 0;
    Tensor positions;       // [N,3]
    Tensor velocities;      // [N,3]
    Tensor forces;          // [N,3]
    Tensor attributes;      // [N,Cp]
    Tensor rest_positions;  // [N,3], meaningful iff a topology is present
    bool has_rest = false;

    int64_t attr_dim() const { return attributes.shape.size() == 2 ? attributes.shape[1] : 0; }
    double mass(int64_t i) const { return attributes.at(i, 0); }
    std::vector<double> masses() const;

    // Throws Error(Validation) naming the offending field.
    void validate() const;
};

// Static boundary samples. Attribute channels 0..2 are unit normals when
// present; extra channels (friction, actuation features) are free-form.
struct BoundarySet {
    int64_t count = 0;
    Tensor positions;   // [Nb,3]
    Tensor attributes;  // [Nb,Cb]

    int64_t attr_dim() const { return attributes.shape.size() == 2 ? attributes.shape[1] : 0; }
    bool empty() const { return count == 0; }
    void validate() const;

    static BoundarySet none(int64_t attr_dim = 3) {
        BoundarySet b;
        b.positions = Tensor({0, 3});
        b.attributes = Tensor({0, attr_dim});
        return b;
    }
};

// Undirected rest-shape edges with symmetric adjacency.
struct Topology {
    std::vector<std::pair<int32_t, int32_t>> edges;  // canonical (i < j), no duplicates

    bool empty() const { return edges.empty(); }
    void validate(int64_t n) const;
    // Sorted adjacency lists for n vertices.
    std::vector<std::vector<int32_t>> adjacency(int64_t n) const;
    double max_edge_length(const Tensor& rest) const;
};

struct Trajectory {
    double dt = 0.0;
    Tensor attributes;      // [N,Cp], static across frames
    Tensor rest_positions;  // [N,3]
    BoundarySet boundary;
    Topology topology;

    struct Frame {
        Tensor positions;   // [N,3]
        Tensor velocities;  // [N,3]
        Tensor forces;      // [N,3]
    };
    std::vector<Frame> frames;

    int64_t particle_count() const { return attributes.shape.empty() ? 0 : attributes.shape[0]; }
    int64_t frame_count() const { return (int64_t)frames.size(); }
    int64_t attr_dim() const { return attributes.shape.size() == 2 ? attributes.shape[1] : 0; }

    ParticleSystem system_at(int64_t frame) const;
    void validate() const;
};

struct FilledInputs {
    ParticleSystem system;
    Topology topology;
    BoundarySet boundary;
};

// Missing topology becomes an empty edge list and missing boundary an empty
// sample set, so downstream branch outputs for absent inputs are exactly
// zero; provided inputs pass through unchanged.
FilledInputs zero_fill_absent(const ParticleSystem& system, const Topology* topology,
                              const BoundarySet* boundary);

// Row i of the result is forces[i] / mass_i.
Tensor mass_matrix_inverse_apply(const ParticleSystem& system, const Tensor& forces);

}  // namespace pf
