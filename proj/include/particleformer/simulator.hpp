#pragma once

#include <utility>
#include <vector>

#include "particleformer/model.hpp"
#include "particleformer/state.hpp"

namespace pf {

// Explicit prediction step: V~ = V + dt M^-1 F, X~ = X + dt/2 (V + V~).
// Exact arithmetic, no hidden damping.
std::pair<Tensor, Tensor> predict(const ParticleSystem& system, double dt);

// Graph version; forces and masses enter as constants of the step.
std::pair<Value, Value> predict_step(Graph& g, Value x, Value v, const Tensor& forces,
                                     const std::vector<double>& masses, double dt);

// One full prediction-correction step on raw state (inference path, fresh
// ungraded graph inside).
struct StepResult {
    Tensor positions;
    Tensor velocities;
};
StepResult simulation_step(Model& model, const Scene& scene, const Tensor& x, const Tensor& v,
                           const Tensor& attributes, const Tensor& forces, double dt);

// Autoregressive rollout: steps = forces.size() prediction-correction steps
// from the initial state; returns the predicted frames (frame n holds the
// state after step n). Aborts with a numeric failure naming the step when a
// non-finite state appears.
Trajectory rollout(Model& model, const Scene& scene, const ParticleSystem& initial,
                   const std::vector<Tensor>& forces, double dt);

}  // namespace pf
