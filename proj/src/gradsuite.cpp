#include "particleformer/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "particleformer/gradcheck.hpp"
#include "particleformer/rng.hpp"
#include "particleformer/simulator.hpp"
#include "particleformer/train.hpp"

namespace pf {

namespace {

Tensor random_tensor(Rng& rng, std::vector<int64_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.data) x = rng.uniform(lo, hi);
    return t;
}

using Builder = std::function<Value(Graph&, std::vector<Value>&)>;

double op_fd(std::vector<Tensor> inputs, const Builder& build, double h = 1e-4) {
    std::vector<std::vector<double>> ad;
    auto eval = [&](bool with_grad) -> double {
        Graph g(with_grad);
        std::vector<Value> vals;
        for (auto& t : inputs) vals.push_back(g.input(t, true));
        Value y = build(g, vals);
        Rng rng(7);
        Tensor cot(y.shape());
        for (auto& c : cot.data) c = rng.uniform(-1.0, 1.0);
        Value loss = g.reduce_sum(g.mul(y, g.constant(cot)));
        if (with_grad) {
            g.backward(loss);
            ad.clear();
            for (auto& v : vals) ad.emplace_back(v.grad(), v.grad() + v.numel());
        }
        return loss.data()[0];
    };
    eval(true);
    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i)
        worst = std::max(worst, fd_max_rel_err(inputs[i].data.data(), inputs[i].numel(), ad[i].data(),
                                               [&] { return eval(false); }, h));
    return worst;
}

void run_ops(std::vector<SuiteEntry>& out) {
    Rng rng(101);
    auto entry = [&out](const std::string& name, double err) {
        out.push_back({"ops." + name, err, 1e-4});
    };
    entry("add", op_fd({random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})},
                       [](Graph& g, std::vector<Value>& v) { return g.add(v[0], v[1]); }));
    entry("sub", op_fd({random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})},
                       [](Graph& g, std::vector<Value>& v) { return g.sub(v[0], v[1]); }));
    entry("mul", op_fd({random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})},
                       [](Graph& g, std::vector<Value>& v) { return g.mul(v[0], v[1]); }));
    entry("scalar_scale", op_fd({random_tensor(rng, {3, 4})},
                                [](Graph& g, std::vector<Value>& v) { return g.affine(v[0], 1.7, -0.2); }));
    entry("matmul", op_fd({random_tensor(rng, {3, 5}), random_tensor(rng, {5, 4})},
                          [](Graph& g, std::vector<Value>& v) { return g.matmul(v[0], v[1]); }));
    entry("add_bias", op_fd({random_tensor(rng, {4, 3}), random_tensor(rng, {3})},
                            [](Graph& g, std::vector<Value>& v) { return g.add_bias(v[0], v[1]); }));
    entry("concat", op_fd({random_tensor(rng, {3, 2}), random_tensor(rng, {3, 3})},
                          [](Graph& g, std::vector<Value>& v) { return g.concat_cols({v[0], v[1]}); }));
    entry("slice_cols", op_fd({random_tensor(rng, {3, 6})},
                              [](Graph& g, std::vector<Value>& v) { return g.slice_cols(v[0], 1, 3); }));
    entry("row_gather", op_fd({random_tensor(rng, {5, 3})}, [](Graph& g, std::vector<Value>& v) {
              return g.gather_rows(v[0], {1, 4, 4, 0});
          }));
    entry("segment_sum", op_fd({random_tensor(rng, {6, 2})}, [](Graph& g, std::vector<Value>& v) {
              return g.segment_sum(v[0], {0, 2, 2, 1, 0, 2}, 4);
          }));
    entry("row_scale", op_fd({random_tensor(rng, {4, 3})}, [](Graph& g, std::vector<Value>& v) {
              return g.row_scale(v[0], {0.3, 1.5, -0.5, 1.0});
          }));
    {
        Tensor x = random_tensor(rng, {4, 5});
        for (auto& v : x.data) v += (v >= 0 ? 0.1 : -0.1);
        entry("relu", op_fd({x}, [](Graph& g, std::vector<Value>& v) { return g.relu(v[0]); }));
    }
    entry("sigmoid", op_fd({random_tensor(rng, {3, 4})},
                           [](Graph& g, std::vector<Value>& v) { return g.sigmoid(v[0]); }));
    entry("layer_norm",
          op_fd({random_tensor(rng, {4, 6}), random_tensor(rng, {6}, 0.5, 1.5), random_tensor(rng, {6})},
                [](Graph& g, std::vector<Value>& v) { return g.layer_norm(v[0], v[1], v[2]); }));
    entry("softmax", op_fd({random_tensor(rng, {4, 5}, -2, 2)},
                           [](Graph& g, std::vector<Value>& v) { return g.softmax_rows(v[0]); }));
    entry("cosine_similarity", op_fd({random_tensor(rng, {3, 5}), random_tensor(rng, {4, 5})},
                                     [](Graph& g, std::vector<Value>& v) {
                                         return g.cosine_pairs(v[0], v[1]);
                                     }));
    entry("reduce_sum", op_fd({random_tensor(rng, {3, 4})},
                              [](Graph& g, std::vector<Value>& v) { return g.reduce_sum(v[0]); }));
    entry("reduce_mean", op_fd({random_tensor(rng, {3, 4})},
                               [](Graph& g, std::vector<Value>& v) { return g.reduce_mean(v[0]); }));
    entry("broadcast_scalar", op_fd({random_tensor(rng, {1})}, [](Graph& g, std::vector<Value>& v) {
              return g.broadcast_scalar(v[0], 4);
          }));
    {
        kernels::TriGeom geom{3, 1.0, 4};
        Tensor theta = random_tensor(rng, {27, 4});
        Tensor disp({3, 3});
        int64_t placed = 0;
        while (placed < 3) {
            double r[3] = {rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7)};
            if (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] > 0.8) continue;
            bool safe = true;
            for (int a = 0; a < 3; ++a) {
                double xi = (r[a] + 1.0);
                if (std::fabs(xi - std::round(xi)) < 0.05) safe = false;
            }
            if (!safe) continue;
            for (int a = 0; a < 3; ++a) disp.at(placed, a) = r[a];
            ++placed;
        }
        entry("trilinear_lattice_lookup", op_fd({theta, disp}, [geom](Graph& g, std::vector<Value>& v) {
                  return g.trilinear_lookup(v[0], v[1], geom);
              }));
        entry("pair_matvec", op_fd({random_tensor(rng, {4, 6}), random_tensor(rng, {4, 3})},
                                   [](Graph& g, std::vector<Value>& v) {
                                       return g.pair_matvec(v[0], v[1], 3, 2);
                                   }));
    }
    {
        RopeConfig rc{2, 8, 6, 10000.0, 0.5};
        entry("rotary_rotate", op_fd({random_tensor(rng, {4, 16}), random_tensor(rng, {4, 3})},
                                     [rc](Graph& g, std::vector<Value>& v) {
                                         return g.rope_rotate(v[0], v[1], rc);
                                     }));
    }
    entry("attention_core",
          op_fd({random_tensor(rng, {3, 8}), random_tensor(rng, {4, 8}), random_tensor(rng, {4, 8})},
                [](Graph& g, std::vector<Value>& v) { return g.attention_core(v[0], v[1], v[2], 2); }));
    {
        int64_t n = 6;
        double h = 0.4;
        Tensor x({n, 3});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t a = 0; a < 3; ++a) x.at(i, a) = rng.uniform(0.0, 0.5);
        std::vector<int64_t> off(n + 1, 0);
        std::vector<int32_t> nbr;
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                if (i == j) continue;
                double d2 = 0;
                for (int64_t a = 0; a < 3; ++a)
                    d2 += (x.at(i, a) - x.at(j, a)) * (x.at(i, a) - x.at(j, a));
                if (d2 <= 4 * h * h) nbr.push_back((int32_t)j);
            }
            off[i + 1] = (int64_t)nbr.size();
        }
        std::vector<double> masses(n, 1.0);
        entry("sph_divergence", op_fd({x, random_tensor(rng, {n, 3})},
                                      [&](Graph& g, std::vector<Value>& v) {
                                          return g.sph_divergence(v[0], v[1], masses, off, nbr, h);
                                      }));
    }
}

// Small model and scene shared by the block-level checks.
struct SmallSetup {
    Model model;
    Trajectory traj;
    Scene scene;
};

SmallSetup make_small_setup(int64_t n = 8) {
    SmallSetup s;
    s.model.cfg.attr_dim = 2;
    s.model.cfg.boundary_attr_dim = 3;
    s.model.cfg.token_dim = 16;
    s.model.cfg.enc_layers = 2;
    s.model.cfg.dec_layers = 2;
    s.model.cfg.enc_heads = 2;
    s.model.cfg.dec_heads = 2;
    s.model.cfg.enc_rotary = 6;
    s.model.cfg.dec_rotary = 6;
    s.model.cfg.ffn_hidden = 24;
    s.model.cfg.lattice_res = 3;
    s.model.cfg.branch_s = 6;
    s.model.cfg.branch_t = 6;
    s.model.cfg.branch_b = 6;
    s.model.cfg.head_hidden = {12};
    s.model.cfg.spatial_radius = 0.4;
    s.model.init(2024);

    Rng rng(55);
    s.traj.dt = 0.05;
    s.traj.attributes = Tensor({n, 2});
    for (int64_t i = 0; i < n; ++i) {
        s.traj.attributes.at(i, 0) = rng.uniform(0.5, 1.5);
        s.traj.attributes.at(i, 1) = rng.uniform(0.1, 0.5);
    }
    s.traj.rest_positions = Tensor({n, 3});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < 3; ++c) s.traj.rest_positions.at(i, c) = rng.uniform(0.0, 0.6);
    for (int32_t i = 0; i + 1 < (int32_t)n; i += 2) s.traj.topology.edges.push_back({i, i + 1});
    s.traj.boundary.count = 4;
    s.traj.boundary.positions = Tensor({4, 3});
    s.traj.boundary.attributes = Tensor({4, 3});
    for (int64_t b = 0; b < 4; ++b) {
        s.traj.boundary.positions.at(b, 0) = 0.15 + 0.2 * (double)b;
        s.traj.boundary.positions.at(b, 1) = 0.3;
        s.traj.boundary.positions.at(b, 2) = 0.05;
        s.traj.boundary.attributes.at(b, 2) = 1.0;
    }
    for (int64_t f = 0; f < 4; ++f) {
        Trajectory::Frame fr;
        fr.positions = Tensor({n, 3});
        fr.velocities = Tensor({n, 3});
        fr.forces = Tensor({n, 3});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < 3; ++c) {
                fr.positions.at(i, c) = rng.uniform(0.05, 0.55);
                fr.velocities.at(i, c) = rng.uniform(-0.2, 0.2);
                fr.forces.at(i, c) = c == 2 ? -9.8 * s.traj.attributes.at(i, 0) : 0.0;
            }
        s.traj.frames.push_back(std::move(fr));
    }
    s.scene = s.model.make_scene(s.traj);
    return s;
}

// FD over every parameter under `prefixes` for a given loss builder.
double params_fd(SmallSetup& s, const std::vector<std::string>& prefixes,
                 const std::function<Value(Graph&)>& build_loss) {
    auto eval = [&](bool with_grad) -> double {
        if (with_grad) s.model.params.zero_grad();
        Graph g(with_grad);
        Value loss = build_loss(g);
        if (with_grad) g.backward(loss);
        return loss.data()[0];
    };
    std::vector<std::string> paths;
    for (const auto& p : prefixes)
        for (const auto& name : s.model.params.paths_with_prefix(p)) paths.push_back(name);
    auto report = grad_check(s.model.params, paths, eval);
    return report.worst();
}

Value cot_loss(Graph& g, Value y, uint64_t seed) {
    Rng rng(seed);
    Tensor cot(y.shape());
    for (auto& c : cot.data) c = rng.uniform(-1.0, 1.0);
    return g.reduce_sum(g.mul(y, g.constant(cot)));
}

void run_blocks(std::vector<SuiteEntry>& out, const std::string& which) {
    SmallSetup s = make_small_setup();
    Rng rng(77);
    int64_t d = s.model.cfg.token_dim;
    Tensor tokens = random_tensor(rng, {6, d});
    Tensor anchors = random_tensor(rng, {6, 3}, 0.0, 0.5);
    Tensor kv_tokens = random_tensor(rng, {3, d});
    Tensor kv_anchors = random_tensor(rng, {3, 3}, 0.0, 0.5);

    if (which == "tokenizer") {
        out.push_back({"tokenizer.params",
                       params_fd(s, {"tokenizer."},
                                 [&](Graph& g) {
                                     TokenizerInputs tin;
                                     Tensor px = s.traj.frames[0].positions;
                                     NeighborList sp = build_spatial(px, s.scene.radius_s);
                                     NeighborList bd = build_boundary(px, s.scene.boundary, s.scene.radius_b);
                                     tin.pred_positions = g.constant(px);
                                     tin.pred_velocities = g.constant(s.traj.frames[0].velocities);
                                     tin.attributes = g.constant(s.traj.attributes);
                                     tin.boundary_positions = g.constant(s.scene.boundary.positions);
                                     tin.boundary_attrs = g.constant(s.scene.boundary.attributes);
                                     tin.rest_positions = g.constant(s.scene.rest_positions);
                                     tin.spatial = &sp;
                                     tin.boundary = &bd;
                                     tin.topology = &s.scene.topo_neighbors;
                                     tin.radius_s = s.scene.radius_s;
                                     tin.radius_b = s.scene.radius_b;
                                     tin.radius_t = s.scene.radius_t;
                                     Value h = tokenize(g, s.model.params, s.model.cfg.tokenizer_dims(), tin);
                                     return cot_loss(g, h, 3);
                                 }),
                       1e-4});
    } else if (which == "attention") {
        AttentionSpec spec = s.model.cfg.encoder_spec();
        out.push_back({"attention.self",
                       params_fd(s, {"encoder.layer1.attn."},
                                 [&](Graph& g) {
                                     Value y = self_attention_block(g, s.model.params, "encoder.layer1.attn",
                                                                   g.input(tokens, true),
                                                                   g.constant(anchors), spec);
                                     return cot_loss(g, y, 4);
                                 }),
                       1e-4});
        AttentionSpec dspec = s.model.cfg.decoder_spec();
        out.push_back({"attention.cross",
                       params_fd(s, {"decoder.layer1.cross."},
                                 [&](Graph& g) {
                                     Value y = cross_attention_block(
                                         g, s.model.params, "decoder.layer1.cross", g.input(tokens, true),
                                         g.constant(anchors), g.input(kv_tokens, true),
                                         g.constant(kv_anchors), dspec);
                                     return cot_loss(g, y, 5);
                                 }),
                       1e-4});
        out.push_back({"attention.ffn",
                       params_fd(s, {"decoder.layer1.ffn."},
                                 [&](Graph& g) {
                                     Value y = ffn_block(g, s.model.params, "decoder.layer1.ffn",
                                                         g.input(tokens, true));
                                     return cot_loss(g, y, 6);
                                 }),
                       1e-4});
    } else if (which == "encoder") {
        AttentionSpec spec = s.model.cfg.encoder_spec();
        out.push_back({"encoder.layer",
                       params_fd(s, {"encoder.layer1."},
                                 [&](Graph& g) {
                                     TokenLevel lvl{g.input(tokens, true), g.constant(anchors),
                                                    std::vector<double>(6, 1.0)};
                                     EncodeResult enc = encode(g, s.model.params, spec, lvl, 1);
                                     return g.add(cot_loss(g, enc.supertokens.tokens, 8),
                                                  cot_loss(g, enc.supertokens.anchors, 9));
                                 }),
                       1e-4});
    } else if (which == "decoder") {
        AttentionSpec spec = s.model.cfg.decoder_spec();
        out.push_back({"decoder.layer",
                       params_fd(s, {"decoder.layer1."},
                                 [&](Graph& g) {
                                     Value y = decode(g, s.model.params, spec, g.input(tokens, true),
                                                      g.constant(anchors), g.input(kv_tokens, true),
                                                      g.constant(kv_anchors), s.model.cfg.dec_layers);
                                     return cot_loss(g, y, 10);
                                 }),
                       1e-4});
        out.push_back({"decoder.head",
                       params_fd(s, {"head."},
                                 [&](Graph& g) {
                                     auto [dx, dv] = predict_head(g, s.model.params,
                                                                  s.model.cfg.head_spec(),
                                                                  g.input(tokens, true));
                                     return g.add(cot_loss(g, dx, 11), cot_loss(g, dv, 12));
                                 }),
                       1e-4});
    }
}

void run_corrector(std::vector<SuiteEntry>& out) {
    SmallSetup s = make_small_setup();
    // The stock setup has a zero-initialized final head layer, which hides
    // most parameter gradients; perturb it so every path is exercised.
    {
        Rng r(123);
        size_t last = s.model.cfg.head_spec().widths.size() - 1;
        for (auto& v : s.model.params.at("head.l" + std::to_string(last) + ".w").value.data)
            v = r.uniform(-0.2, 0.2);
        for (auto& v : s.model.params.at("head.l" + std::to_string(last) + ".b").value.data)
            v = r.uniform(-0.05, 0.05);
    }
    auto build = [&](Graph& g) {
        Value px = g.constant(s.traj.frames[0].positions);
        Value pv = g.constant(s.traj.frames[0].velocities);
        auto corr = s.model.correct(g, px, pv, g.constant(s.traj.attributes), s.scene);
        return g.add(cot_loss(g, corr.dx, 13), cot_loss(g, corr.dv, 14));
    };
    out.push_back({"corrector.params", params_fd(s, {""}, build), 1e-4});
}

void run_rollout(std::vector<SuiteEntry>& out) {
    SmallSetup s = make_small_setup(6);
    {
        Rng r(321);
        size_t last = s.model.cfg.head_spec().widths.size() - 1;
        for (auto& v : s.model.params.at("head.l" + std::to_string(last) + ".w").value.data)
            v = r.uniform(-0.2, 0.2);
    }
    LossWeights weights;
    const int64_t window = 3;
    Tensor attrs = s.traj.attributes;
    std::vector<double> ad;
    auto eval = [&](bool with_grad) -> double {
        Graph g(with_grad);
        Value attr_v = g.input(attrs, true);
        Value x = g.constant(s.traj.frames[0].positions);
        Value v = g.constant(s.traj.frames[0].velocities);
        std::vector<std::pair<Value, Value>> preds;
        for (int64_t n = 0; n + 1 < window; ++n) {
            auto [px, pv] = predict_step(g, x, v, s.traj.frames[(size_t)n].forces, s.scene.masses,
                                         s.traj.dt);
            auto corr = s.model.correct(g, px, pv, attr_v, s.scene);
            x = g.add(px, corr.dx);
            v = g.add(pv, corr.dv);
            preds.push_back({x, v});
        }
        Value loss = rollout_loss(g, preds, s.traj.frames, 1, weights);
        if (with_grad) {
            g.backward(loss);
            ad.assign(attr_v.grad(), attr_v.grad() + attr_v.numel());
        }
        return loss.data()[0];
    };
    eval(true);
    // FD on the non-mass attribute channel only (the mass column also feeds
    // the predictor as a graph constant, so its full derivative is not the
    // tokenizer-path gradient).
    double worst = 0.0;
    int64_t n = attrs.shape[0], cp = attrs.shape[1];
    const double h = 1e-4;
    for (int64_t i = 0; i < n; ++i) {
        int64_t e = i * cp + 1;
        double saved = attrs.data[(size_t)e];
        attrs.data[(size_t)e] = saved + h;
        double lp = eval(false);
        attrs.data[(size_t)e] = saved - h;
        double lm = eval(false);
        attrs.data[(size_t)e] = saved;
        worst = std::max(worst, grad_rel_err(ad[(size_t)e], (lp - lm) / (2 * h)));
    }
    out.push_back({"rollout.attr_channel", worst, 1e-3});
}

}  // namespace

std::vector<SuiteEntry> gradient_suite(const std::vector<std::string>& modules) {
    auto want = [&modules](const std::string& m) {
        return modules.empty() || std::find(modules.begin(), modules.end(), m) != modules.end();
    };
    std::vector<SuiteEntry> out;
    if (want("ops")) run_ops(out);
    for (const char* m : {"tokenizer", "attention", "encoder", "decoder"})
        if (want(m)) run_blocks(out, m);
    if (want("corrector")) run_corrector(out);
    if (want("rollout")) run_rollout(out);
    return out;
}

}  // namespace pf
