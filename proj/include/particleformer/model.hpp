#pragma once

#include <map>
#include <string>

#include "particleformer/attention.hpp"
#include "particleformer/config.hpp"
#include "particleformer/decoder.hpp"
#include "particleformer/encoder.hpp"
#include "particleformer/neighborhood.hpp"
#include "particleformer/state.hpp"
#include "particleformer/tokenizer.hpp"

namespace pf {

struct ModelConfig {
    int64_t attr_dim = 1;           // Cp, must match the dataset
    int64_t boundary_attr_dim = 3;  // Cb
    int64_t token_dim = 64;
    int64_t enc_layers = 3;
    int64_t dec_layers = 3;
    int64_t enc_heads = 4;
    int64_t dec_heads = 4;
    int64_t enc_rotary = 12;
    int64_t dec_rotary = 12;
    int64_t ffn_hidden = 128;
    int64_t lattice_res = 4;
    int64_t branch_s = 16, branch_t = 16, branch_b = 16;
    std::vector<int64_t> head_hidden = {32, 32};
    double spatial_radius = 0.25;
    double boundary_radius = 0.0;    // 0 -> spatial_radius
    double topo_radius_scale = 1.5;  // times the longest rest edge
    double rope_base = 10000.0;
    double rope_scale = 0.0;  // 0 -> spatial_radius

    void validate() const;
    double resolved_boundary_radius() const { return boundary_radius > 0 ? boundary_radius : spatial_radius; }
    double resolved_rope_scale() const { return rope_scale > 0 ? rope_scale : spatial_radius; }

    TokenizerDims tokenizer_dims() const;
    AttentionSpec encoder_spec() const;
    AttentionSpec decoder_spec() const;
    HeadSpec head_spec() const;

    static ModelConfig from_kv(const KeyValueConfig& kv);
    KeyValueConfig to_kv() const;
};

// Static per-sequence context: boundary, topology and the radii resolved
// against it. Built once per trajectory, shared by all timesteps.
struct Scene {
    BoundarySet boundary;
    Topology topology;
    Tensor rest_positions;      // [N,3]
    std::vector<double> masses;
    NeighborList topo_neighbors;  // fixed across timesteps
    double radius_s = 0, radius_b = 0, radius_t = 0;
    int64_t particle_count = 0;
};

class Model {
  public:
    ModelConfig cfg;
    ParamStore params;

    void init(uint64_t seed);

    Scene make_scene(const Trajectory& traj) const;
    Scene make_scene(const BoundarySet& boundary, const Topology& topology, const Tensor& rest,
                     const std::vector<double>& masses) const;

    struct Correction {
        Value dx;
        Value dv;
        std::vector<int64_t> level_sizes;
    };

    // The full corrector: neighborhoods from the predicted positions, then
    // tokenize -> encode -> decode -> head.
    Correction correct(Graph& g, Value pred_x, Value pred_v, Value attributes, const Scene& scene);

    // Parameter counts per top-level module prefix plus "total".
    std::map<std::string, int64_t> count_params() const;
};

}  // namespace pf
