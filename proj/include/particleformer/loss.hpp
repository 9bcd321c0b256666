#pragma once

#include <string>
#include <vector>

#include "particleformer/graph.hpp"
#include "particleformer/state.hpp"

namespace pf {

struct LossWeights {
    double beta_x = 1.0;
    double beta_v = 1.0;
    double lambda_phys = 0.0;
    double sph_support = 0.2;  // h of the cubic-spline estimator

    void validate() const;
};

// beta_x * MSE(X) + beta_v * MSE(V), means over particles, axes and steps.
Value rollout_loss(Graph& g, const std::vector<std::pair<Value, Value>>& predicted,
                   const std::vector<Trajectory::Frame>& truth, int64_t first_truth_frame,
                   const LossWeights& w);

// Per-particle SPH divergence of (positions, velocities) as a graph value
// [N,1]; neighbor pairs come from a radius-2h search on the current values.
Value sph_divergence_value(Graph& g, Value positions, Value velocities,
                           const std::vector<double>& masses, double h);

// Raw estimator (same formula, O(N^2) pair scan) used as the oracle and by
// evaluation code.
Tensor sph_divergence_field(const Tensor& positions, const Tensor& velocities,
                            const std::vector<double>& masses, double h);

struct EvalReport {
    double position_mse = 0.0;
    double velocity_mse = 0.0;
    std::vector<double> per_frame_position;
    std::vector<double> per_frame_velocity;
    double frames_per_second = 0.0;  // 0 when no timing information given
    int64_t frames = 0;

    std::string to_text() const;  // flat `metric = value` lines
};

// Frame k of `predicted` is compared against frame k+ref_offset of
// `reference`. seconds > 0 adds throughput to the report.
EvalReport eval_metrics(const Trajectory& predicted, const Trajectory& reference, int64_t ref_offset = 0,
                        double seconds = 0.0);

}  // namespace pf
