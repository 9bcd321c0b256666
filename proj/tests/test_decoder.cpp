#include <cmath>
#include <limits>

#include "doctest.h"
#include "particleformer/decoder.hpp"
#include "particleformer/rng.hpp"

using namespace pf;

namespace {
Tensor random_tensor(Rng& rng, std::vector<int64_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}
}  // namespace

TEST_CASE("decode with zero output projections and zero FFN second layers is the identity") {
    ParamStore ps;
    Rng rng(71);
    int64_t d = 12, layers = 2;
    register_decoder_params(ps, layers, d, 20, rng);
    for (int64_t l = 1; l <= layers; ++l) {
        std::string p = "decoder.layer" + std::to_string(l);
        for (const char* blk : {".cross", ".self"}) {
            ps.at(p + blk + ".wo").value.fill(0.0);
            ps.at(p + blk + ".bo").value.fill(0.0);
        }
        ps.at(p + ".ffn.l2.w").value.fill(0.0);
        ps.at(p + ".ffn.l2.b").value.fill(0.0);
    }
    AttentionSpec spec{d, 2, 6, 10000.0, 0.5};
    Graph g;
    Tensor tokens = random_tensor(rng, {5, d});
    Tensor anchors = random_tensor(rng, {5, 3}, 0.0, 1.0);
    Tensor st = random_tensor(rng, {2, d});
    Tensor sta = random_tensor(rng, {2, 3}, 0.0, 1.0);
    Value y = decode(g, ps, spec, g.constant(tokens), g.constant(anchors), g.constant(st), g.constant(sta),
                     layers);
    for (size_t i = 0; i < tokens.data.size(); ++i) CHECK(y.data()[i] == tokens.data[i]);
}

TEST_CASE("decode preserves the particle token count at every depth") {
    ParamStore ps;
    Rng rng(72);
    int64_t d = 12;
    register_decoder_params(ps, 3, d, 16, rng);
    AttentionSpec spec{d, 2, 6, 10000.0, 0.5};
    Graph g;
    Value y = decode(g, ps, spec, g.constant(random_tensor(rng, {7, d})),
                     g.constant(random_tensor(rng, {7, 3})), g.constant(random_tensor(rng, {3, d})),
                     g.constant(random_tensor(rng, {3, 3})), 3);
    CHECK(y.rows() == 7);
    CHECK(y.cols() == d);
}

TEST_CASE("decode is translation-invariant to 1e-5") {
    ParamStore ps;
    Rng rng(73);
    int64_t d = 12;
    register_decoder_params(ps, 2, d, 16, rng);
    AttentionSpec spec{d, 2, 6, 10000.0, 0.5};
    Tensor tokens = random_tensor(rng, {6, d});
    Tensor anchors = random_tensor(rng, {6, 3}, 0.0, 1.0);
    Tensor st = random_tensor(rng, {3, d});
    Tensor sta = random_tensor(rng, {3, 3}, 0.0, 1.0);

    Graph g;
    Tensor base = decode(g, ps, spec, g.constant(tokens), g.constant(anchors), g.constant(st),
                         g.constant(sta), 2)
                      .to_tensor();

    const double t[3] = {3.1, -1.7, 0.4};
    Tensor a2 = anchors, sta2 = sta;
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t c = 0; c < 3; ++c) a2.at(i, c) += t[c];
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t c = 0; c < 3; ++c) sta2.at(i, c) += t[c];
    Graph g2;
    Tensor moved = decode(g2, ps, spec, g2.constant(tokens), g2.constant(a2), g2.constant(st),
                          g2.constant(sta2), 2)
                       .to_tensor();
    for (size_t i = 0; i < base.data.size(); ++i)
        CHECK(moved.data[i] == doctest::Approx(base.data[i]).epsilon(1e-5));
}

TEST_CASE("decode is equivariant under joint particle permutation") {
    ParamStore ps;
    Rng rng(74);
    int64_t d = 12;
    register_decoder_params(ps, 2, d, 16, rng);
    AttentionSpec spec{d, 2, 6, 10000.0, 0.5};
    Tensor tokens = random_tensor(rng, {5, d});
    Tensor anchors = random_tensor(rng, {5, 3}, 0.0, 1.0);
    Tensor st = random_tensor(rng, {2, d});
    Tensor sta = random_tensor(rng, {2, 3}, 0.0, 1.0);
    Graph g;
    Tensor base = decode(g, ps, spec, g.constant(tokens), g.constant(anchors), g.constant(st),
                         g.constant(sta), 2)
                      .to_tensor();

    std::vector<int64_t> perm = {4, 2, 0, 3, 1};
    Tensor tp({5, d}), ap({5, 3});
    for (int64_t i = 0; i < 5; ++i) {
        for (int64_t c = 0; c < d; ++c) tp.at(perm[(size_t)i], c) = tokens.at(i, c);
        for (int64_t c = 0; c < 3; ++c) ap.at(perm[(size_t)i], c) = anchors.at(i, c);
    }
    Graph g2;
    Tensor out = decode(g2, ps, spec, g2.constant(tp), g2.constant(ap), g2.constant(st), g2.constant(sta), 2)
                     .to_tensor();
    for (int64_t i = 0; i < 5; ++i)
        for (int64_t c = 0; c < d; ++c)
            CHECK(out.at(perm[(size_t)i], c) == doctest::Approx(base.at(i, c)).epsilon(1e-12));
}

TEST_CASE("prediction head: zero final layer, equivariance, width checks") {
    ParamStore ps;
    Rng rng(75);
    HeadSpec spec{{12, 8, 6}};
    register_head_params(ps, spec, rng);

    SUBCASE("default init (zero final layer) outputs exactly zero") {
        Graph g;
        Tensor tokens = random_tensor(rng, {4, 12});
        auto [dx, dv] = predict_head(g, ps, spec, g.constant(tokens));
        for (int64_t i = 0; i < dx.numel(); ++i) CHECK(dx.data()[i] == 0.0);
        for (int64_t i = 0; i < dv.numel(); ++i) CHECK(dv.data()[i] == 0.0);
    }

    SUBCASE("permutation equivariance (per-particle map)") {
        for (auto& v : ps.at("head.l2.w").value.data) v = rng.uniform(-0.5, 0.5);
        Tensor tokens = random_tensor(rng, {4, 12});
        Graph g;
        auto [dx, dv] = predict_head(g, ps, spec, g.constant(tokens));
        Tensor swapped = tokens;
        for (int64_t c = 0; c < 12; ++c) std::swap(swapped.at(0, c), swapped.at(3, c));
        Graph g2;
        auto [dx2, dv2] = predict_head(g2, ps, spec, g2.constant(swapped));
        for (int64_t c = 0; c < 3; ++c) {
            CHECK(dx2.data()[c] == dx.data()[9 + c]);
            CHECK(dx2.data()[9 + c] == dx.data()[c]);
            CHECK(dv2.data()[c] == dv.data()[9 + c]);
        }
    }
}

TEST_CASE("head parameter counts") {
    SUBCASE("paper-scale head is exactly 1,385,478") {
        CHECK(count_head_params(HeadSpec::paper_scale()) == 1385478);
        // independently re-derivable split
        CHECK(count_head_params(HeadSpec::paper_scale()) == 591360 + 3 * 263680 + 3078);
    }
    SUBCASE("8->4->2 hand count is 54") {
        CHECK(count_head_params(HeadSpec{{8, 4, 2}}) == 54);
    }
    SUBCASE("degenerate config counts zero") {
        CHECK(count_head_params(HeadSpec{{5}}) == 0);
    }
    SUBCASE("registered parameters agree with the arithmetic count") {
        ParamStore ps;
        Rng rng(76);
        HeadSpec spec{{16, 12, 8, 6}};
        register_head_params(ps, spec, rng);
        CHECK(ps.total_params() == count_head_params(spec));
    }
}
