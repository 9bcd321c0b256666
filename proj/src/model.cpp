#include "particleformer/model.hpp"

#include <sstream>

#include "particleformer/error.hpp"

namespace pf {

void ModelConfig::validate() const {
    if (attr_dim < 1) fail_usage("config: attr_dim must be >= 1 (mass channel)");
    if (boundary_attr_dim < 0) fail_usage("config: boundary_attr_dim must be >= 0");
    if (token_dim < 2) fail_usage("config: token_dim too small");
    if (enc_layers < 1 || dec_layers < 1) fail_usage("config: need at least one encoder and decoder layer");
    if (lattice_res < 2) fail_usage("config: lattice_res must be >= 2");
    if (!(spatial_radius > 0)) fail_usage("config: spatial_radius must be positive");
    if (head_hidden.empty()) fail_usage("config: head needs at least one hidden layer");
    encoder_spec().validate("encoder");
    decoder_spec().validate("decoder");
}

TokenizerDims ModelConfig::tokenizer_dims() const {
    TokenizerDims d;
    d.attr_dim = attr_dim;
    d.boundary_attr_dim = boundary_attr_dim;
    d.token_dim = token_dim;
    d.out_s = branch_s;
    d.out_t = branch_t;
    d.out_b = branch_b;
    d.lattice_res = lattice_res;
    return d;
}

AttentionSpec ModelConfig::encoder_spec() const {
    return AttentionSpec{token_dim, enc_heads, enc_rotary, rope_base, resolved_rope_scale()};
}

AttentionSpec ModelConfig::decoder_spec() const {
    return AttentionSpec{token_dim, dec_heads, dec_rotary, rope_base, resolved_rope_scale()};
}

HeadSpec ModelConfig::head_spec() const {
    HeadSpec h;
    h.widths.push_back(token_dim);
    for (int64_t w : head_hidden) h.widths.push_back(w);
    h.widths.push_back(6);
    return h;
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv) {
    ModelConfig c;
    c.attr_dim = kv.get_int("model.attr_dim", c.attr_dim);
    c.boundary_attr_dim = kv.get_int("model.boundary_attr_dim", c.boundary_attr_dim);
    c.token_dim = kv.get_int("model.token_dim", c.token_dim);
    c.enc_layers = kv.get_int("model.enc_layers", c.enc_layers);
    c.dec_layers = kv.get_int("model.dec_layers", c.dec_layers);
    c.enc_heads = kv.get_int("model.enc_heads", c.enc_heads);
    c.dec_heads = kv.get_int("model.dec_heads", c.dec_heads);
    c.enc_rotary = kv.get_int("model.enc_rotary", c.enc_rotary);
    c.dec_rotary = kv.get_int("model.dec_rotary", c.dec_rotary);
    c.ffn_hidden = kv.get_int("model.ffn_hidden", c.ffn_hidden);
    c.lattice_res = kv.get_int("model.lattice_res", c.lattice_res);
    c.branch_s = kv.get_int("model.branch_s", c.branch_s);
    c.branch_t = kv.get_int("model.branch_t", c.branch_t);
    c.branch_b = kv.get_int("model.branch_b", c.branch_b);
    c.spatial_radius = kv.get_double("model.spatial_radius", c.spatial_radius);
    c.boundary_radius = kv.get_double("model.boundary_radius", c.boundary_radius);
    c.topo_radius_scale = kv.get_double("model.topo_radius_scale", c.topo_radius_scale);
    c.rope_base = kv.get_double("model.rope_base", c.rope_base);
    c.rope_scale = kv.get_double("model.rope_scale", c.rope_scale);
    if (kv.has("model.head_hidden")) {
        c.head_hidden.clear();
        std::istringstream ss(kv.get_string("model.head_hidden", ""));
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) c.head_hidden.push_back(std::stoll(item));
    }
    c.validate();
    return c;
}

KeyValueConfig ModelConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("model.attr_dim", attr_dim);
    kv.set("model.boundary_attr_dim", boundary_attr_dim);
    kv.set("model.token_dim", token_dim);
    kv.set("model.enc_layers", enc_layers);
    kv.set("model.dec_layers", dec_layers);
    kv.set("model.enc_heads", enc_heads);
    kv.set("model.dec_heads", dec_heads);
    kv.set("model.enc_rotary", enc_rotary);
    kv.set("model.dec_rotary", dec_rotary);
    kv.set("model.ffn_hidden", ffn_hidden);
    kv.set("model.lattice_res", lattice_res);
    kv.set("model.branch_s", branch_s);
    kv.set("model.branch_t", branch_t);
    kv.set("model.branch_b", branch_b);
    kv.set("model.spatial_radius", spatial_radius);
    kv.set("model.boundary_radius", boundary_radius);
    kv.set("model.topo_radius_scale", topo_radius_scale);
    kv.set("model.rope_base", rope_base);
    kv.set("model.rope_scale", rope_scale);
    std::string hh;
    for (size_t i = 0; i < head_hidden.size(); ++i) {
        if (i) hh += ",";
        hh += std::to_string(head_hidden[i]);
    }
    kv.set("model.head_hidden", hh);
    return kv;
}

void Model::init(uint64_t seed) {
    cfg.validate();
    params = ParamStore();
    Rng rng(seed);
    register_tokenizer_params(params, cfg.tokenizer_dims(), rng);
    register_encoder_params(params, cfg.enc_layers, cfg.token_dim, rng);
    register_decoder_params(params, cfg.dec_layers, cfg.token_dim, cfg.ffn_hidden, rng);
    register_head_params(params, cfg.head_spec(), rng);
}

Scene Model::make_scene(const BoundarySet& boundary, const Topology& topology, const Tensor& rest,
                        const std::vector<double>& masses) const {
    Scene s;
    s.boundary = boundary;
    s.topology = topology;
    s.rest_positions = rest;
    s.masses = masses;
    s.particle_count = (int64_t)masses.size();
    s.radius_s = cfg.spatial_radius;
    s.radius_b = cfg.resolved_boundary_radius();
    s.radius_t = topology.empty() ? cfg.spatial_radius
                                  : cfg.topo_radius_scale * topology.max_edge_length(rest);
    s.topo_neighbors = build_topology(topology, rest);
    return s;
}

Scene Model::make_scene(const Trajectory& traj) const {
    if (traj.attr_dim() != cfg.attr_dim)
        fail_validation("scene: trajectory attribute width " + std::to_string(traj.attr_dim()) +
                        " does not match model attr_dim " + std::to_string(cfg.attr_dim));
    if (traj.boundary.attr_dim() != cfg.boundary_attr_dim)
        fail_validation("scene: boundary attribute width mismatch");
    std::vector<double> masses((size_t)traj.particle_count());
    for (int64_t i = 0; i < traj.particle_count(); ++i) masses[(size_t)i] = traj.attributes.at(i, 0);
    return make_scene(traj.boundary, traj.topology, traj.rest_positions, masses);
}

Model::Correction Model::correct(Graph& g, Value pred_x, Value pred_v, Value attributes,
                                 const Scene& scene) {
    int64_t n = pred_x.rows();
    if (n != scene.particle_count) fail_usage("correct: particle count does not match scene");

    // Neighborhoods are rebuilt from the predicted positions every step.
    Tensor px = pred_x.to_tensor();
    NeighborList spatial = build_spatial(px, scene.radius_s);
    NeighborList boundary_nbrs = build_boundary(px, scene.boundary, scene.radius_b);

    TokenizerInputs tin;
    tin.pred_positions = pred_x;
    tin.pred_velocities = pred_v;
    tin.attributes = attributes;
    tin.boundary_positions = g.constant(scene.boundary.positions);
    tin.boundary_attrs = g.constant(scene.boundary.attributes);
    tin.rest_positions = g.constant(scene.rest_positions);
    tin.spatial = &spatial;
    tin.boundary = &boundary_nbrs;
    tin.topology = &scene.topo_neighbors;
    tin.radius_s = scene.radius_s;
    tin.radius_b = scene.radius_b;
    tin.radius_t = scene.radius_t;
    Value tokens = tokenize(g, params, cfg.tokenizer_dims(), tin);

    TokenLevel level0{tokens, pred_x, std::vector<double>((size_t)n, 1.0)};
    EncodeResult enc = encode(g, params, cfg.encoder_spec(), level0, cfg.enc_layers);

    Value refined = decode(g, params, cfg.decoder_spec(), tokens, pred_x,
                           enc.supertokens.tokens, enc.supertokens.anchors, cfg.dec_layers);
    auto [dx, dv] = predict_head(g, params, cfg.head_spec(), refined);
    return Correction{dx, dv, enc.level_sizes};
}

std::map<std::string, int64_t> Model::count_params() const {
    std::map<std::string, int64_t> out;
    for (const char* prefix : {"tokenizer", "encoder", "decoder", "head"})
        out[prefix] = params.total_params_with_prefix(std::string(prefix) + ".");
    out["total"] = params.total_params();
    return out;
}

}  // namespace pf
