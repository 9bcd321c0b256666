#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "particleformer/config.hpp"
#include "particleformer/loss.hpp"
#include "particleformer/model.hpp"

namespace pf {

struct TrainConfig {
    int64_t window = 4;  // W states per sample, including the initial ground-truth one
    double lr = 1e-3;
    int64_t warmup_steps = 500;
    int64_t total_steps = 0;  // 0 -> epochs * train set size
    double min_lr = 1e-5;
    double weight_decay = 5e-4;
    double beta1 = 0.9, beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    uint64_t seed = 1;
    int64_t epochs = 40;
    LossWeights loss;

    void validate() const;
    static TrainConfig from_kv(const KeyValueConfig& kv);
    KeyValueConfig to_kv() const;
};

// Linear warmup from 0.01*lr to lr, cosine to min_lr at total_steps, then
// constant min_lr.
double lr_at(int64_t step, const TrainConfig& cfg);

struct AdamState {
    std::map<std::string, Tensor> m, v;
    int64_t steps = 0;
};

// Decoupled weight decay; gradient clipping happens before calling this.
void adamw_step(ParamStore& ps, AdamState& state, double lr, const TrainConfig& cfg);

struct CurvePoint {
    int64_t step = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;  // most recent validation value (NaN before the first)
    double lr = 0.0;
};

struct TrainResult {
    std::vector<CurvePoint> curve;
    double best_val_loss = 0.0;
    int64_t best_val_step = 0;
    ParamStore best_params;  // values of the lowest-validation-loss checkpoint
};

// Window W autoregressive training, batch size 1. Aborts with a numeric
// failure reporting the step when the loss goes non-finite.
TrainResult train(Model& model, const std::vector<Trajectory>& train_set,
                  const std::vector<Trajectory>& val_set, const TrainConfig& cfg);

// The W-window rollout loss of a model over a sequence set (forward only);
// the validation metric used during training.
double window_loss(Model& model, const std::vector<Trajectory>& set, int64_t window,
                   const LossWeights& weights);

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve);

struct InverseDesignConfig {
    double target_x = 0.0;
    double mu0 = 0.2;
    double mu_min = 0.1, mu_max = 0.5;
    int64_t mu_channel = 1;
    double body_z_threshold = 0.25;
    int64_t iterations = 60;
    double step_size = 1.0;  // on the sigmoid logit
    int64_t window = 0;      // rollout steps; 0 -> template length - 1
};

struct InverseDesignResult {
    double mu = 0.0;
    std::vector<std::pair<double, double>> curve;  // (mu, objective) per iteration
};

// Gradient descent through the full rollout on a frozen model: recovers the
// attribute-channel value whose rollout lands the body at target_x.
InverseDesignResult inverse_design(Model& model, const Trajectory& template_traj,
                                   const InverseDesignConfig& cfg);

// The optimization loop alone: minimizes (s(mu)-target)^2 with mu squashed
// into (lo,hi) through a sigmoid; eval returns (s, ds/dmu). Exposed so the
// loop can be verified against closed-form surrogates.
InverseDesignResult sigmoid_gradient_descent(const std::function<std::pair<double, double>(double)>& eval,
                                             double target, double mu0, double lo, double hi,
                                             double step_size, int64_t iterations);

}  // namespace pf
