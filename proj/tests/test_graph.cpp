#include <omp.h>

#include <cmath>
#include <functional>

#include "doctest.h"
#include "particleformer/gradcheck.hpp"
#include "particleformer/graph.hpp"
#include "particleformer/rng.hpp"

using namespace pf;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int64_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.data) x = rng.uniform(lo, hi);
    return t;
}

using Builder = std::function<Value(Graph&, std::vector<Value>&)>;

// Central-difference check of d(sum(y * cot))/d(input_i) for every input.
double op_max_fd_err(std::vector<Tensor> inputs, const Builder& build, double h = 1e-4) {
    std::vector<std::vector<double>> ad;
    auto eval = [&](bool with_grad) -> double {
        Graph g(with_grad);
        std::vector<Value> vals;
        vals.reserve(inputs.size());
        for (auto& t : inputs) vals.push_back(g.input(t, true));
        Value y = build(g, vals);
        Rng rng(99);
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

}  // namespace

TEST_CASE("backward basics: ones, zeros, accumulation, scalar check") {
    Rng rng(1);
    Tensor p = random_tensor(rng, {3, 4});

    SUBCASE("loss = sum(p) gives unit gradients") {
        Graph g;
        Value v = g.input(p, true);
        g.backward(g.reduce_sum(v));
        for (int64_t i = 0; i < v.numel(); ++i) CHECK(v.grad()[i] == 1.0);
    }

    SUBCASE("loss independent of p gives zero gradients") {
        Graph g;
        Value v = g.input(p, true);
        Value other = g.input(random_tensor(rng, {2, 2}), true);
        g.backward(g.reduce_sum(other));
        for (int64_t i = 0; i < v.numel(); ++i) CHECK(v.grad()[i] == 0.0);
    }

    SUBCASE("repeated backward accumulates") {
        Graph g;
        Value v = g.input(p, true);
        Value loss = g.reduce_sum(v);
        g.backward(loss);
        g.backward(loss);
        for (int64_t i = 0; i < v.numel(); ++i) CHECK(v.grad()[i] == 2.0);
    }

    SUBCASE("backward on non-scalar fails") {
        Graph g;
        Value v = g.input(p, true);
        CHECK_THROWS_AS(g.backward(v), Error);
    }
}

TEST_CASE("elementwise and linear ops match finite differences") {
    Rng rng(2);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 5}), random_tensor(rng, {4, 5})},
                        [](Graph& g, std::vector<Value>& v) { return g.add(v[0], v[1]); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 5}), random_tensor(rng, {4, 5})},
                        [](Graph& g, std::vector<Value>& v) { return g.sub(v[0], v[1]); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 5}), random_tensor(rng, {4, 5})},
                        [](Graph& g, std::vector<Value>& v) { return g.mul(v[0], v[1]); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 5})},
                        [](Graph& g, std::vector<Value>& v) { return g.affine(v[0], -1.7, 0.3); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 6}), random_tensor(rng, {6, 3})},
                        [](Graph& g, std::vector<Value>& v) { return g.matmul(v[0], v[1]); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {5, 4}), random_tensor(rng, {4})},
                        [](Graph& g, std::vector<Value>& v) { return g.add_bias(v[0], v[1]); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 2}), random_tensor(rng, {4, 3}), random_tensor(rng, {4, 1})},
                        [](Graph& g, std::vector<Value>& v) {
                            return g.concat_cols({v[0], v[1], v[2]});
                        }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 7})},
                        [](Graph& g, std::vector<Value>& v) { return g.slice_cols(v[0], 2, 3); }) < 1e-4);
}

TEST_CASE("structure ops match finite differences") {
    Rng rng(3);
    CHECK(op_max_fd_err({random_tensor(rng, {5, 3})}, [](Graph& g, std::vector<Value>& v) {
              return g.gather_rows(v[0], {4, 0, 0, 2, 1, 4});
          }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {6, 3})}, [](Graph& g, std::vector<Value>& v) {
              return g.segment_sum(v[0], {2, 0, 2, 2, 0, 1}, 4);
          }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 3})}, [](Graph& g, std::vector<Value>& v) {
              return g.row_scale(v[0], {0.5, -1.0, 2.0, 0.0});
          }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {1})}, [](Graph& g, std::vector<Value>& v) {
              return g.broadcast_scalar(v[0], 5);
          }) < 1e-4);
}

TEST_CASE("nonlinearities match finite differences") {
    Rng rng(4);
    // keep relu inputs away from the kink
    Tensor x = random_tensor(rng, {5, 6});
    for (auto& v : x.data) v = (v >= 0 ? 0.1 : -0.1) + v;
    CHECK(op_max_fd_err({x}, [](Graph& g, std::vector<Value>& v) { return g.relu(v[0]); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {5, 6}, -2, 2)},
                        [](Graph& g, std::vector<Value>& v) { return g.sigmoid(v[0]); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 8}), random_tensor(rng, {8}, 0.5, 1.5),
                         random_tensor(rng, {8})},
                        [](Graph& g, std::vector<Value>& v) { return g.layer_norm(v[0], v[1], v[2]); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {5, 7}, -2, 2)},
                        [](Graph& g, std::vector<Value>& v) { return g.softmax_rows(v[0]); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 6}), random_tensor(rng, {5, 6})},
                        [](Graph& g, std::vector<Value>& v) { return g.cosine_pairs(v[0], v[1]); }) < 1e-4);
    CHECK(op_max_fd_err({random_tensor(rng, {3, 4})},
                        [](Graph& g, std::vector<Value>& v) { return g.reduce_mean(v[0]); }) < 1e-4);
}

TEST_CASE("softmax of (0,0) is (0.5,0.5) through the graph") {
    Graph g;
    Value y = g.softmax_rows(g.constant(Tensor({1, 2}, {0.0, 0.0})));
    CHECK(y.data()[0] == doctest::Approx(0.5));
    CHECK(y.data()[1] == doctest::Approx(0.5));
}

TEST_CASE("segment_sum of empty group yields zero row through the graph") {
    Graph g;
    Value y = g.segment_sum(g.constant(Tensor({2, 2}, {1, 2, 3, 4})), {0, 0}, 3);
    CHECK(y.data()[2] == 0.0);
    CHECK(y.data()[3] == 0.0);
    CHECK(y.data()[4] == 0.0);
    CHECK(y.data()[5] == 0.0);
}

TEST_CASE("segment_sum(gather_rows(x)) over a permutation reproduces x") {
    Rng rng(5);
    Tensor x = random_tensor(rng, {6, 3});
    std::vector<int32_t> perm = {3, 1, 5, 0, 2, 4};
    Graph g;
    Value v = g.input(x, true);
    Value gathered = g.gather_rows(v, perm);
    // send row r of gathered back to segment perm[r]
    Value restored = g.segment_sum(gathered, perm, 6);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(restored.data()[i] == x.data[i]);
}

TEST_CASE("trilinear lookup gradients (lattice entries and displacements)") {
    Rng rng(6);
    kernels::TriGeom geom{4, 1.0, 6};  // 2x3 matrices
    Tensor theta = random_tensor(rng, {64, 6});
    // displacements inside the support, away from cell faces and the gate
    Tensor disp({5, 3});
    int64_t placed = 0;
    while (placed < 5) {
        double r[3] = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)};
        double nrm = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
        if (nrm > 0.9) continue;
        bool safe = true;
        for (int a = 0; a < 3; ++a) {
            double xi = (r[a] + 1.0) * 0.5 * 3.0;
            if (std::fabs(xi - std::round(xi)) < 0.05) safe = false;
        }
        if (!safe) continue;
        for (int a = 0; a < 3; ++a) disp.at(placed, a) = r[a];
        ++placed;
    }
    CHECK(op_max_fd_err({theta, disp}, [geom](Graph& g, std::vector<Value>& v) {
              return g.trilinear_lookup(v[0], v[1], geom);
          }) < 1e-4);
}

TEST_CASE("pair_matvec gradients and value") {
    Rng rng(7);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 6}), random_tensor(rng, {4, 2})},
                        [](Graph& g, std::vector<Value>& v) { return g.pair_matvec(v[0], v[1], 2, 3); }) < 1e-4);
    // identity matrix per pair passes features through
    Graph g;
    Tensor w({1, 4}, {1, 0, 0, 1});
    Tensor u({1, 2}, {0.3, -0.7});
    Value y = g.pair_matvec(g.constant(w), g.constant(u), 2, 2);
    CHECK(y.data()[0] == doctest::Approx(0.3));
    CHECK(y.data()[1] == doctest::Approx(-0.7));
}

TEST_CASE("rope rotation: zero anchor is identity, unit phase matches 2x2 rotation") {
    RopeConfig cfg;
    cfg.heads = 1;
    cfg.head_dim = 6;
    cfg.rotary_dim = 6;
    cfg.base = 7.3;
    cfg.scale = 0.5;
    Rng rng(8);
    Tensor x = random_tensor(rng, {1, 6});

    SUBCASE("anchor at origin leaves vectors unchanged") {
        Graph g;
        Tensor anchors({1, 3}, {0, 0, 0});
        Value y = g.rope_rotate(g.constant(x), g.constant(anchors), cfg);
        for (int64_t i = 0; i < 6; ++i) CHECK(y.data()[i] == doctest::Approx(x.data[i]));
    }

    SUBCASE("anchor_x = scale rotates the x-axis pair by exactly 1 radian") {
        Graph g;
        Tensor anchors({1, 3}, {cfg.scale, 0, 0});
        Value y = g.rope_rotate(g.constant(x), g.constant(anchors), cfg);
        double c = std::cos(1.0), s = std::sin(1.0);
        CHECK(y.data()[0] == doctest::Approx(x.data[0] * c - x.data[1] * s));
        CHECK(y.data()[1] == doctest::Approx(x.data[0] * s + x.data[1] * c));
        // other axes have zero anchor -> identity
        for (int64_t i = 2; i < 6; ++i) CHECK(y.data()[i] == doctest::Approx(x.data[i]));
    }

    SUBCASE("gradients w.r.t. inputs and anchors") {
        CHECK(op_max_fd_err({random_tensor(rng, {3, 6}), random_tensor(rng, {3, 3})},
                            [cfg](Graph& g, std::vector<Value>& v) {
                                return g.rope_rotate(v[0], v[1], cfg);
                            }) < 1e-4);
    }
}

TEST_CASE("attention core gradients") {
    Rng rng(9);
    CHECK(op_max_fd_err({random_tensor(rng, {4, 8}), random_tensor(rng, {5, 8}), random_tensor(rng, {5, 8})},
                        [](Graph& g, std::vector<Value>& v) {
                            return g.attention_core(v[0], v[1], v[2], 2);
                        }) < 1e-4);
}

TEST_CASE("sph divergence op: uniform field zero, gradients match FD") {
    // small cluster with pair list from an O(n^2) scan
    Rng rng(10);
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
            for (int64_t a = 0; a < 3; ++a) d2 += (x.at(i, a) - x.at(j, a)) * (x.at(i, a) - x.at(j, a));
            if (d2 <= 4 * h * h) nbr.push_back((int32_t)j);
        }
        off[i + 1] = (int64_t)nbr.size();
    }
    std::vector<double> masses(n, 1.25);

    SUBCASE("uniform velocity -> zero divergence exactly") {
        Graph g;
        Tensor v({n, 3});
        for (int64_t i = 0; i < n; ++i) {
            v.at(i, 0) = 0.7;
            v.at(i, 1) = -0.2;
            v.at(i, 2) = 0.1;
        }
        Value div = g.sph_divergence(g.constant(x), g.constant(v), masses, off, nbr, h);
        for (int64_t i = 0; i < n; ++i) CHECK(div.data()[i] == 0.0);
    }

    SUBCASE("gradients w.r.t. positions and velocities") {
        Tensor v = random_tensor(rng, {n, 3});
        CHECK(op_max_fd_err({x, v}, [&](Graph& g, std::vector<Value>& vals) {
                  return g.sph_divergence(vals[0], vals[1], masses, off, nbr, h);
              }) < 1e-4);
    }
}

TEST_CASE("three-layer MLP: all parameter grads match finite differences") {
    Rng rng(11);
    ParamStore ps;
    ps.add("l1.w", random_tensor(rng, {6, 8}, -0.5, 0.5));
    ps.add("l1.b", random_tensor(rng, {8}, -0.1, 0.1));
    ps.add("l2.w", random_tensor(rng, {8, 8}, -0.5, 0.5));
    ps.add("l2.b", random_tensor(rng, {8}, -0.1, 0.1));
    ps.add("l3.w", random_tensor(rng, {8, 2}, -0.5, 0.5));
    ps.add("l3.b", random_tensor(rng, {2}, -0.1, 0.1));
    Tensor x = random_tensor(rng, {5, 6});
    Tensor target = random_tensor(rng, {5, 2});

    auto eval = [&](bool with_grad) -> double {
        if (with_grad) ps.zero_grad();
        Graph g(with_grad);
        Value h1 = g.relu(g.add_bias(g.matmul(g.constant(x), g.param(ps.at("l1.w"))), g.param(ps.at("l1.b"))));
        Value h2 = g.relu(g.add_bias(g.matmul(h1, g.param(ps.at("l2.w"))), g.param(ps.at("l2.b"))));
        Value y = g.add_bias(g.matmul(h2, g.param(ps.at("l3.w"))), g.param(ps.at("l3.b")));
        Value loss = g.mse(y, g.constant(target));
        if (with_grad) g.backward(loss);
        return loss.data()[0];
    };

    auto report = grad_check(ps, {}, eval);
    CHECK(report.pass(1e-4));
}

TEST_CASE("forward and backward are bit-identical across thread counts") {
    Rng rng(12);
    Tensor a = random_tensor(rng, {40, 50});
    Tensor b = random_tensor(rng, {50, 30});
    auto run = [&](int threads, std::vector<double>& grads) -> double {
        int saved = omp_get_max_threads();
        omp_set_num_threads(threads);
        Graph g;
        Value va = g.input(a, true);
        Value y = g.softmax_rows(g.matmul(va, g.constant(b)));
        Value loss = g.reduce_sum(g.mul(y, y));
        g.backward(loss);
        grads.assign(va.grad(), va.grad() + va.numel());
        omp_set_num_threads(saved);
        return loss.data()[0];
    };
    std::vector<double> g1, g8;
    double l1 = run(1, g1);
    double l8 = run(8, g8);
    CHECK(l1 == l8);
    for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g8[i]);
}

TEST_CASE("shape mismatches raise typed failures naming the op") {
    Graph g;
    Value a = g.constant(Tensor({2, 3}));
    Value b = g.constant(Tensor({3, 2}));
    CHECK_THROWS_WITH_AS(g.add(a, b), doctest::Contains("add"), Error);
    CHECK_THROWS_WITH_AS(g.matmul(a, a), doctest::Contains("matmul"), Error);
}
