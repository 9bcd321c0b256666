#include <omp.h>

#include <cmath>

#include "doctest.h"
#include "particleformer/rng.hpp"
#include "particleformer/simulator.hpp"
#include "particleformer/toy_data.hpp"

using namespace pf;

namespace {

ParticleSystem single_particle(double m, const double x[3], const double v[3], const double f[3]) {
    ParticleSystem s;
    s.count = 1;
    s.positions = Tensor({1, 3}, {x[0], x[1], x[2]});
    s.velocities = Tensor({1, 3}, {v[0], v[1], v[2]});
    s.forces = Tensor({1, 3}, {f[0], f[1], f[2]});
    s.attributes = Tensor({1, 1}, {m});
    return s;
}

Model desk_model(int64_t attr_dim, uint64_t seed = 7) {
    Model model;
    model.cfg.attr_dim = attr_dim;
    model.cfg.token_dim = 16;
    model.cfg.enc_layers = 2;
    model.cfg.dec_layers = 2;
    model.cfg.enc_heads = 2;
    model.cfg.dec_heads = 2;
    model.cfg.enc_rotary = 6;
    model.cfg.dec_rotary = 6;
    model.cfg.ffn_hidden = 24;
    model.cfg.lattice_res = 3;
    model.cfg.branch_s = 6;
    model.cfg.branch_t = 6;
    model.cfg.branch_b = 6;
    model.cfg.head_hidden = {12};
    model.cfg.spatial_radius = 0.3;
    model.init(seed);
    return model;
}

}  // namespace

TEST_CASE("predict: closed-form examples") {
    SUBCASE("no force: drift at constant velocity") {
        double x[3] = {0, 0, 0}, v[3] = {1, 0, 0}, f[3] = {0, 0, 0};
        auto [px, pv] = predict(single_particle(1.0, x, v, f), 0.1);
        CHECK(pv.at(0, 0) == 1.0);
        CHECK(px.at(0, 0) == doctest::Approx(0.1));
    }
    SUBCASE("m=2, F=(0,0,-4), dt=0.5") {
        double x[3] = {0, 0, 0}, v[3] = {0, 0, 0}, f[3] = {0, 0, -4};
        auto [px, pv] = predict(single_particle(2.0, x, v, f), 0.5);
        CHECK(pv.at(0, 2) == doctest::Approx(-1.0));
        CHECK(px.at(0, 2) == doctest::Approx(-0.25));
    }
    SUBCASE("repeated steps match the ballistic closed form within 1e-6") {
        double g = -9.8;
        double x0[3] = {0, 0, 1.0}, v0[3] = {0.3, 0, 0.2}, f0[3] = {0, 0, 1.5 * g};
        ParticleSystem s = single_particle(1.5, x0, v0, f0);
        double dt = 0.01;
        for (int n = 1; n <= 50; ++n) {
            auto [px, pv] = predict(s, dt);
            s.positions = px;
            s.velocities = pv;
            double t = n * dt;
            CHECK(std::fabs(s.positions.at(0, 2) - (1.0 + 0.2 * t + 0.5 * g * t * t)) < 1e-6);
            CHECK(std::fabs(s.velocities.at(0, 2) - (0.2 + g * t)) < 1e-9);
        }
    }
    SUBCASE("non-finite force fails") {
        double x[3] = {0, 0, 0}, v[3] = {0, 0, 0}, f[3] = {0, 0, std::nan("")};
        CHECK_THROWS_AS(predict(single_particle(1.0, x, v, f), 0.1), Error);
    }
}

TEST_CASE("predict is exactly reversible") {
    Rng rng(81);
    int64_t n = 12;
    ParticleSystem s;
    s.count = n;
    s.positions = Tensor({n, 3});
    s.velocities = Tensor({n, 3});
    s.forces = Tensor({n, 3});
    s.attributes = Tensor({n, 1});
    for (int64_t i = 0; i < n; ++i) {
        s.attributes.at(i, 0) = rng.uniform(0.5, 2.0);
        for (int64_t c = 0; c < 3; ++c) {
            s.positions.at(i, c) = rng.uniform(-1, 1);
            s.velocities.at(i, c) = rng.uniform(-1, 1);
            s.forces.at(i, c) = rng.uniform(-5, 5);
        }
    }
    double dt = 0.02;
    auto [px, pv] = predict(s, dt);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < 3; ++c) {
            double v_rec = pv.at(i, c) - dt * s.forces.at(i, c) / s.attributes.at(i, 0);
            double x_rec = px.at(i, c) - 0.5 * dt * (v_rec + pv.at(i, c));
            CHECK(v_rec == doctest::Approx(s.velocities.at(i, c)).epsilon(1e-14));
            CHECK(x_rec == doctest::Approx(s.positions.at(i, c)).epsilon(1e-14));
        }
}

TEST_CASE("zero-initialized corrector returns exactly (0,0)") {
    Model model = desk_model(1);
    Rng rng(82);
    int64_t n = 8;
    Trajectory traj;
    traj.dt = 0.02;
    traj.attributes = Tensor::full({n, 1}, 1.0);
    traj.rest_positions = Tensor({n, 3});
    traj.boundary = BoundarySet::none();
    Tensor x({n, 3}), v({n, 3});
    for (auto& val : x.data) val = rng.uniform(0, 0.5);
    for (auto& val : v.data) val = rng.uniform(-0.2, 0.2);
    Scene scene = model.make_scene(traj.boundary, traj.topology, traj.rest_positions,
                                   std::vector<double>((size_t)n, 1.0));
    Graph g;
    auto corr = model.correct(g, g.constant(x), g.constant(v), g.constant(traj.attributes), scene);
    for (int64_t i = 0; i < corr.dx.numel(); ++i) {
        CHECK(corr.dx.data()[i] == 0.0);
        CHECK(corr.dv.data()[i] == 0.0);
    }
}

TEST_CASE("corrector is translation-invariant to 1e-5") {
    Model model = desk_model(1);
    // activate the head so outputs are nonzero
    Rng rp(83);
    for (auto& v : model.params.at("head.l2.w").value.data) v = rp.uniform(-0.3, 0.3);

    Rng rng(84);
    int64_t n = 10;
    Tensor x({n, 3}), v({n, 3});
    for (auto& val : x.data) val = rng.uniform(0, 0.5);
    for (auto& val : v.data) val = rng.uniform(-0.2, 0.2);
    Tensor attrs = Tensor::full({n, 1}, 1.0);
    BoundarySet boundary;
    boundary.count = 4;
    boundary.positions = Tensor({4, 3});
    boundary.attributes = Tensor({4, 3});
    for (int64_t b = 0; b < 4; ++b) {
        boundary.positions.at(b, 0) = rng.uniform(0, 0.5);
        boundary.positions.at(b, 1) = rng.uniform(0, 0.5);
        boundary.attributes.at(b, 2) = 1.0;
    }
    Scene scene = model.make_scene(boundary, Topology{}, Tensor({n, 3}),
                                   std::vector<double>((size_t)n, 1.0));
    Graph g;
    auto base = model.correct(g, g.constant(x), g.constant(v), g.constant(attrs), scene);
    Tensor bx = base.dx.to_tensor(), bv = base.dv.to_tensor();

    const double t[3] = {2.3, -0.7, 5.1};
    Tensor x2 = x;
    BoundarySet b2 = boundary;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < 3; ++c) x2.at(i, c) += t[c];
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t c = 0; c < 3; ++c) b2.positions.at(i, c) += t[c];
    Scene scene2 = model.make_scene(b2, Topology{}, Tensor({n, 3}), std::vector<double>((size_t)n, 1.0));
    Graph g2;
    auto moved = model.correct(g2, g2.constant(x2), g2.constant(v), g2.constant(attrs), scene2);
    for (int64_t i = 0; i < bx.numel(); ++i) {
        CHECK(moved.dx.data()[i] == doctest::Approx(bx.data[i]).epsilon(1e-5));
        CHECK(moved.dv.data()[i] == doctest::Approx(bv.data[i]).epsilon(1e-5));
    }
}

TEST_CASE("rollout: ballistic oracle with a zero corrector") {
    Model model = desk_model(1);
    ToyParams tp;
    tp.particles = 6;
    tp.frames = 10;
    Trajectory ref = gen_ballistic(tp, 91);
    Scene scene = model.make_scene(ref);
    ParticleSystem init = ref.system_at(0);
    std::vector<Tensor> forces;
    for (int64_t k = 0; k + 1 < ref.frame_count(); ++k) forces.push_back(ref.frames[(size_t)k].forces);
    Trajectory pred = rollout(model, scene, init, forces, ref.dt);
    REQUIRE(pred.frame_count() == ref.frame_count() - 1);
    for (int64_t f = 0; f < pred.frame_count(); ++f)
        for (int64_t i = 0; i < 6; ++i)
            for (int64_t c = 0; c < 3; ++c)
                CHECK(pred.frames[(size_t)f].positions.at(i, c) ==
                      doctest::Approx(ref.frames[(size_t)(f + 1)].positions.at(i, c)).epsilon(1e-9));
}

TEST_CASE("rollout: zero force, zero velocity, zero corrector is stationary") {
    Model model = desk_model(1);
    int64_t n = 5;
    ParticleSystem init;
    init.count = n;
    init.positions = Tensor({n, 3});
    Rng rng(92);
    for (auto& v : init.positions.data) v = rng.uniform(0, 0.5);
    init.velocities = Tensor({n, 3});
    init.forces = Tensor({n, 3});
    init.attributes = Tensor::full({n, 1}, 1.0);
    Scene scene = model.make_scene(BoundarySet::none(), Topology{}, Tensor({n, 3}),
                                   std::vector<double>((size_t)n, 1.0));
    std::vector<Tensor> forces(7, Tensor({n, 3}));
    Trajectory pred = rollout(model, scene, init, forces, 0.05);
    for (const auto& fr : pred.frames)
        for (size_t i = 0; i < fr.positions.data.size(); ++i) {
            CHECK(fr.positions.data[i] == init.positions.data[i]);
            CHECK(fr.velocities.data[i] == 0.0);
        }
}

TEST_CASE("rollout is bit-identical across reruns and thread counts") {
    Model model = desk_model(1, 99);
    Rng rp(93);
    for (auto& v : model.params.at("head.l2.w").value.data) v = rp.uniform(-0.2, 0.2);
    ToyParams tp;
    tp.particles = 12;
    tp.frames = 6;
    Trajectory ref = gen_floor_contact(tp, 95);
    Scene scene = model.make_scene(ref);
    ParticleSystem init = ref.system_at(0);
    std::vector<Tensor> forces;
    for (int64_t k = 0; k + 1 < ref.frame_count(); ++k) forces.push_back(ref.frames[(size_t)k].forces);

    auto run = [&](int threads) {
        omp_set_num_threads(threads);
        return rollout(model, scene, init, forces, ref.dt);
    };
    Trajectory a = run(1);
    Trajectory b = run(8);
    omp_set_num_threads(2);
    for (int64_t f = 0; f < a.frame_count(); ++f)
        for (size_t i = 0; i < a.frames[(size_t)f].positions.data.size(); ++i) {
            CHECK(a.frames[(size_t)f].positions.data[i] == b.frames[(size_t)f].positions.data[i]);
            CHECK(a.frames[(size_t)f].velocities.data[i] == b.frames[(size_t)f].velocities.data[i]);
        }
}

TEST_CASE("rollout W=2 is one predict+correct") {
    Model model = desk_model(1);
    ToyParams tp;
    tp.particles = 4;
    tp.frames = 3;
    Trajectory ref = gen_ballistic(tp, 96);
    Scene scene = model.make_scene(ref);
    ParticleSystem init = ref.system_at(0);
    Trajectory pred = rollout(model, scene, init, {ref.frames[0].forces}, ref.dt);
    CHECK(pred.frame_count() == 1);
    StepResult one = simulation_step(model, scene, init.positions, init.velocities, init.attributes,
                                     ref.frames[0].forces, ref.dt);
    for (size_t i = 0; i < one.positions.data.size(); ++i)
        CHECK(pred.frames[0].positions.data[i] == one.positions.data[i]);
}

TEST_CASE("rollout aborts on non-finite states naming the step") {
    Model model = desk_model(1);
    int64_t n = 3;
    ParticleSystem init;
    init.count = n;
    init.positions = Tensor({n, 3});
    init.velocities = Tensor({n, 3});
    init.forces = Tensor({n, 3});
    init.attributes = Tensor::full({n, 1}, 1.0);
    Scene scene = model.make_scene(BoundarySet::none(), Topology{}, Tensor({n, 3}),
                                   std::vector<double>((size_t)n, 1.0));
    std::vector<Tensor> forces(3, Tensor({n, 3}));
    forces[1].at(0, 0) = 1e300;  // predictor produces inf position at step 1
    forces[1].at(0, 1) = 1e300;
    bool threw = false;
    try {
        rollout(model, scene, init, forces, 1e6);
    } catch (const Error& e) {
        threw = true;
        CHECK(e.kind() == ErrorKind::Numeric);
    }
    CHECK(threw);
}
