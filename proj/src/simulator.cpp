#include "particleformer/simulator.hpp"

#include <cmath>

#include "particleformer/error.hpp"

namespace pf {

std::pair<Tensor, Tensor> predict(const ParticleSystem& system, double dt) {
    if (!(dt > 0)) fail_usage("predict: dt must be positive");
    if (!system.forces.all_finite()) fail_numeric("predict: non-finite force");
    Tensor pv({system.count, 3}), px({system.count, 3});
    for (int64_t i = 0; i < system.count; ++i) {
        double m = system.attributes.at(i, 0);
        if (!(m > 0)) fail_validation("predict: non-positive mass at particle " + std::to_string(i));
        for (int64_t c = 0; c < 3; ++c) {
            double v = system.velocities.at(i, c);
            double vt = v + dt * system.forces.at(i, c) / m;
            pv.at(i, c) = vt;
            px.at(i, c) = system.positions.at(i, c) + 0.5 * dt * (v + vt);
        }
    }
    return {px, pv};
}

std::pair<Value, Value> predict_step(Graph& g, Value x, Value v, const Tensor& forces,
                                     const std::vector<double>& masses, double dt) {
    if (!(dt > 0)) fail_usage("predict_step: dt must be positive");
    if (!forces.all_finite()) fail_numeric("predict_step: non-finite force");
    int64_t n = x.rows();
    Tensor accel_dt({n, 3});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < 3; ++c) accel_dt.at(i, c) = dt * forces.at(i, c) / masses[(size_t)i];
    Value pv = g.add(v, g.constant(accel_dt));
    Value px = g.add(x, g.affine(g.add(v, pv), 0.5 * dt, 0.0));
    return {px, pv};
}

StepResult simulation_step(Model& model, const Scene& scene, const Tensor& x, const Tensor& v,
                           const Tensor& attributes, const Tensor& forces, double dt) {
    Graph g(false);
    Value xv = g.constant(x);
    Value vv = g.constant(v);
    auto [px, pv] = predict_step(g, xv, vv, forces, scene.masses, dt);
    auto corr = model.correct(g, px, pv, g.constant(attributes), scene);
    Value nx = g.add(px, corr.dx);
    Value nv = g.add(pv, corr.dv);
    return StepResult{nx.to_tensor(), nv.to_tensor()};
}

Trajectory rollout(Model& model, const Scene& scene, const ParticleSystem& initial,
                   const std::vector<Tensor>& forces, double dt) {
    initial.validate();
    if (forces.empty()) fail_usage("rollout: need at least one step of forces (W >= 2)");
    Trajectory out;
    out.dt = dt;
    out.attributes = initial.attributes;
    out.rest_positions = initial.has_rest ? initial.rest_positions : initial.positions;
    out.boundary = scene.boundary;
    out.topology = scene.topology;

    Tensor x = initial.positions, v = initial.velocities;
    for (size_t n = 0; n < forces.size(); ++n) {
        StepResult step = simulation_step(model, scene, x, v, initial.attributes, forces[n], dt);
        if (!step.positions.all_finite() || !step.velocities.all_finite())
            fail_numeric("rollout: non-finite state at step " + std::to_string(n));
        x = step.positions;
        v = step.velocities;
        Trajectory::Frame fr;
        fr.positions = x;
        fr.velocities = v;
        fr.forces = n + 1 < forces.size() ? forces[n + 1] : Tensor({initial.count, 3});
        out.frames.push_back(std::move(fr));
    }
    return out;
}

}  // namespace pf
