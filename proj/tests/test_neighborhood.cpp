#include <cmath>

#include "doctest.h"
#include "particleformer/error.hpp"
#include "particleformer/neighborhood.hpp"
#include "particleformer/rng.hpp"

using namespace pf;

namespace {

Tensor random_positions(Rng& rng, int64_t n, double extent = 1.0) {
    Tensor p({n, 3});
    for (auto& v : p.data) v = rng.uniform(0.0, extent);
    return p;
}

bool lists_equal(const NeighborList& a, const NeighborList& b) {
    if (a.offsets != b.offsets) return false;
    if (a.indices != b.indices) return false;
    for (size_t i = 0; i < a.disp.size(); ++i)
        if (a.disp[i] != b.disp[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("two particles within radius list each other; singleton lists nothing") {
    Tensor p({2, 3}, {0, 0, 0, 0.5, 0, 0});
    auto nl = build_spatial(p, 1.0);
    CHECK(nl.degree(0) == 1);
    CHECK(nl.degree(1) == 1);
    CHECK(nl.indices[0] == 1);
    CHECK(nl.indices[1] == 0);
    CHECK(nl.disp[0] == 0.5);
    CHECK(nl.disp[3] == -0.5);

    Tensor one({1, 3}, {0.3, 0.3, 0.3});
    auto empty = build_spatial(one, 1.0);
    CHECK(empty.degree(0) == 0);
}

TEST_CASE("ties at exactly the radius are included") {
    Tensor p({2, 3}, {0, 0, 0, 1.0, 0, 0});
    auto nl = build_spatial(p, 1.0);
    CHECK(nl.degree(0) == 1);
    CHECK(nl.degree(1) == 1);
}

TEST_CASE("hashed spatial search equals brute force on random scenes") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        int64_t n = 20 + (int64_t)rng.below(100);
        double radius = rng.uniform(0.05, 0.4);
        Tensor p = random_positions(rng, n);
        auto fast = build_spatial(p, radius);
        auto slow = ref::build_spatial_bruteforce(p, radius);
        CHECK(lists_equal(fast, slow));
    }
}

TEST_CASE("spatial symmetry: j in N_i iff i in N_j") {
    Rng rng(22);
    Tensor p = random_positions(rng, 120);
    auto nl = build_spatial(p, 0.2);
    for (int64_t i = 0; i < nl.query_count; ++i) {
        for (int64_t c = nl.offsets[i]; c < nl.offsets[i + 1]; ++c) {
            int32_t j = nl.indices[(size_t)c];
            bool found = false;
            for (int64_t d = nl.offsets[j]; d < nl.offsets[j + 1]; ++d)
                if (nl.indices[(size_t)d] == (int32_t)i) found = true;
            CHECK(found);
        }
    }
}

TEST_CASE("translation leaves neighbor sets and displacements unchanged") {
    // positions on a dyadic grid and a power-of-two shift keep float
    // arithmetic exact, so the comparison can be bitwise
    Rng rng(23);
    int64_t n = 80;
    Tensor p({n, 3});
    for (auto& v : p.data) v = (double)(rng.below(1 << 12)) * 0x1.0p-12;
    auto before = build_spatial(p, 0.25);
    Tensor shifted = p;
    const double t[3] = {2.0, -4.0, 8.0};
    for (int64_t i = 0; i < n; ++i)
        for (int64_t a = 0; a < 3; ++a) shifted.at(i, a) += t[a];
    auto after = build_spatial(shifted, 0.25);
    CHECK(lists_equal(before, after));
}

TEST_CASE("boundary neighborhoods") {
    SUBCASE("wall sample near a particle") {
        Tensor p({1, 3}, {0, 0, 0});
        BoundarySet b;
        b.count = 1;
        b.positions = Tensor({1, 3}, {0, 0, 0.1});
        b.attributes = Tensor({1, 3}, {0, 0, 1});
        auto nl = build_boundary(p, b, 0.2);
        CHECK(nl.degree(0) == 1);
        CHECK(nl.disp[2] == doctest::Approx(0.1));
    }
    SUBCASE("empty boundary set gives empty lists") {
        Tensor p({3, 3});
        auto nl = build_boundary(p, BoundarySet::none(), 0.2);
        CHECK(nl.pair_count() == 0);
        CHECK(nl.query_count == 3);
    }
    SUBCASE("random scene matches brute force") {
        Rng rng(24);
        Tensor p = random_positions(rng, 60);
        BoundarySet b;
        b.count = 40;
        b.positions = random_positions(rng, 40);
        b.attributes = Tensor({40, 0});
        auto fast = build_boundary(p, b, 0.15);
        auto slow = ref::build_boundary_bruteforce(p, b, 0.15);
        CHECK(lists_equal(fast, slow));
    }
}

TEST_CASE("topology neighborhoods") {
    SUBCASE("single edge with unit rest separation") {
        Topology topo;
        topo.edges = {{0, 1}};
        Tensor rest({2, 3}, {0, 0, 0, 1, 0, 0});
        auto nl = build_topology(topo, rest);
        CHECK(nl.degree(0) == 1);
        CHECK(nl.degree(1) == 1);
        CHECK(nl.disp[0] == 1.0);
        CHECK(nl.disp[3] == -1.0);
    }
    SUBCASE("empty topology gives empty lists") {
        Tensor rest({5, 3});
        auto nl = build_topology(Topology{}, rest);
        CHECK(nl.pair_count() == 0);
    }
    SUBCASE("10x10 grid mesh: interior vertices have 4 neighbors") {
        Topology topo;
        auto id = [](int r, int c) { return (int32_t)(r * 10 + c); };
        for (int r = 0; r < 10; ++r)
            for (int c = 0; c < 10; ++c) {
                if (c + 1 < 10) topo.edges.push_back({id(r, c), id(r, c + 1)});
                if (r + 1 < 10) topo.edges.push_back({id(r, c), id(r + 1, c)});
            }
        Tensor rest({100, 3});
        for (int r = 0; r < 10; ++r)
            for (int c = 0; c < 10; ++c) {
                rest.at(id(r, c), 0) = r * 0.1;
                rest.at(id(r, c), 1) = c * 0.1;
            }
        auto nl = build_topology(topo, rest);
        for (int r = 1; r < 9; ++r)
            for (int c = 1; c < 9; ++c) CHECK(nl.degree(id(r, c)) == 4);
        CHECK(nl.degree(id(0, 0)) == 2);
    }
    SUBCASE("out-of-range edge index fails") {
        Topology topo;
        topo.edges = {{0, 7}};
        Tensor rest({3, 3});
        CHECK_THROWS_AS(build_topology(topo, rest), Error);
    }
}

TEST_CASE("non-finite positions are rejected") {
    Tensor p({2, 3});
    p.at(1, 1) = std::nan("");
    CHECK_THROWS_AS(build_spatial(p, 0.5), Error);
}

TEST_CASE("neighbor indices are strictly ascending per query") {
    Rng rng(25);
    Tensor p = random_positions(rng, 150);
    auto nl = build_spatial(p, 0.3);
    for (int64_t i = 0; i < nl.query_count; ++i)
        for (int64_t c = nl.offsets[i] + 1; c < nl.offsets[i + 1]; ++c)
            CHECK(nl.indices[(size_t)c] > nl.indices[(size_t)c - 1]);
}
