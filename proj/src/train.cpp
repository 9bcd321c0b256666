#include "particleformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "particleformer/error.hpp"
#include "particleformer/rng.hpp"
#include "particleformer/simulator.hpp"

namespace pf {

void TrainConfig::validate() const {
    if (window < 2 || window > 6) fail_usage("train: window must be in [2,6]");
    if (!(lr > 0) || !(min_lr >= 0) || min_lr > lr) fail_usage("train: bad learning rates");
    if (warmup_steps < 0 || epochs < 1) fail_usage("train: bad schedule");
    if (total_steps > 0 && warmup_steps > total_steps) fail_usage("train: warmup exceeds total steps");
    loss.validate();
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) {
    TrainConfig c;
    c.window = kv.get_int("train.window", c.window);
    c.lr = kv.get_double("train.lr", c.lr);
    c.warmup_steps = kv.get_int("train.warmup_steps", c.warmup_steps);
    c.total_steps = kv.get_int("train.total_steps", c.total_steps);
    c.min_lr = kv.get_double("train.min_lr", c.min_lr);
    c.weight_decay = kv.get_double("train.weight_decay", c.weight_decay);
    c.beta1 = kv.get_double("train.beta1", c.beta1);
    c.beta2 = kv.get_double("train.beta2", c.beta2);
    c.clip_norm = kv.get_double("train.clip_norm", c.clip_norm);
    c.seed = (uint64_t)kv.get_int("train.seed", (int64_t)c.seed);
    c.epochs = kv.get_int("train.epochs", c.epochs);
    c.loss.beta_x = kv.get_double("train.beta_x", c.loss.beta_x);
    c.loss.beta_v = kv.get_double("train.beta_v", c.loss.beta_v);
    c.loss.lambda_phys = kv.get_double("train.lambda_phys", c.loss.lambda_phys);
    c.loss.sph_support = kv.get_double("train.sph_support", c.loss.sph_support);
    return c;
}

KeyValueConfig TrainConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("train.window", window);
    kv.set("train.lr", lr);
    kv.set("train.warmup_steps", warmup_steps);
    kv.set("train.total_steps", total_steps);
    kv.set("train.min_lr", min_lr);
    kv.set("train.weight_decay", weight_decay);
    kv.set("train.beta1", beta1);
    kv.set("train.beta2", beta2);
    kv.set("train.clip_norm", clip_norm);
    kv.set("train.seed", (int64_t)seed);
    kv.set("train.epochs", epochs);
    kv.set("train.beta_x", loss.beta_x);
    kv.set("train.beta_v", loss.beta_v);
    kv.set("train.lambda_phys", loss.lambda_phys);
    kv.set("train.sph_support", loss.sph_support);
    return kv;
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    const double start_factor = 0.01;
    if (step < cfg.warmup_steps) {
        double t = (double)step / (double)cfg.warmup_steps;
        return cfg.lr * (start_factor + (1.0 - start_factor) * t);
    }
    int64_t total = std::max(cfg.total_steps, cfg.warmup_steps + 1);
    if (step >= total) return cfg.min_lr;
    double t = (double)(step - cfg.warmup_steps) / (double)(total - cfg.warmup_steps);
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

void adamw_step(ParamStore& ps, AdamState& state, double lr, const TrainConfig& cfg) {
    state.steps += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, (double)state.steps);
    double bc2 = 1.0 - std::pow(cfg.beta2, (double)state.steps);
    for (auto& [name, p] : ps.entries()) {
        auto mit = state.m.find(name);
        if (mit == state.m.end()) {
            mit = state.m.emplace(name, Tensor::zeros(p.value.shape)).first;
            state.v.emplace(name, Tensor::zeros(p.value.shape));
        }
        Tensor& m = mit->second;
        Tensor& v = state.v.at(name);
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            double g = p.grad.data[(size_t)i];
            m.data[(size_t)i] = cfg.beta1 * m.data[(size_t)i] + (1.0 - cfg.beta1) * g;
            v.data[(size_t)i] = cfg.beta2 * v.data[(size_t)i] + (1.0 - cfg.beta2) * g * g;
            double mhat = m.data[(size_t)i] / bc1;
            double vhat = v.data[(size_t)i] / bc2;
            p.value.data[(size_t)i] -=
                lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p.value.data[(size_t)i]);
        }
    }
}

namespace {

struct WindowLossResult {
    Value loss;
    std::vector<std::pair<Value, Value>> predicted;
};

// Unrolls W-1 prediction-correction steps from `start` and returns the
// training loss value (gradients flow through the whole chain).
WindowLossResult window_loss_graph(Graph& g, Model& model, const Scene& scene, const Trajectory& traj,
                                   int64_t start, int64_t window, const LossWeights& weights) {
    Value x = g.constant(traj.frames[(size_t)start].positions);
    Value v = g.constant(traj.frames[(size_t)start].velocities);
    Value attrs = g.constant(traj.attributes);
    WindowLossResult out;
    for (int64_t n = 0; n + 1 < window; ++n) {
        auto [px, pv] = predict_step(g, x, v, traj.frames[(size_t)(start + n)].forces, scene.masses, traj.dt);
        auto corr = model.correct(g, px, pv, attrs, scene);
        x = g.add(px, corr.dx);
        v = g.add(pv, corr.dv);
        out.predicted.push_back({x, v});
    }
    out.loss = rollout_loss(g, out.predicted, traj.frames, start + 1, weights);
    if (weights.lambda_phys > 0) {
        Value phys;
        for (size_t s = 0; s < out.predicted.size(); ++s) {
            Value div = sph_divergence_value(g, out.predicted[s].first, out.predicted[s].second, scene.masses,
                                             weights.sph_support);
            Value term = g.reduce_mean(g.mul(div, div));
            phys = s == 0 ? term : g.add(phys, term);
        }
        phys = g.affine(phys, weights.lambda_phys / (double)out.predicted.size(), 0.0);
        out.loss = g.add(out.loss, phys);
    }
    return out;
}

}  // namespace

double window_loss(Model& model, const std::vector<Trajectory>& set, int64_t window,
                   const LossWeights& weights) {
    double acc = 0.0;
    for (const auto& traj : set) {
        Scene scene = model.make_scene(traj);
        Graph g(false);
        acc += window_loss_graph(g, model, scene, traj, 0, std::min(window, traj.frame_count()), weights)
                   .loss.data()[0];
    }
    return acc / (double)set.size();
}

TrainResult train(Model& model, const std::vector<Trajectory>& train_set,
                  const std::vector<Trajectory>& val_set, const TrainConfig& cfg_in) {
    TrainConfig cfg = cfg_in;
    cfg.validate();
    if (train_set.empty()) fail_usage("train: empty training set");
    for (const auto& t : train_set)
        if (t.frame_count() < cfg.window)
            fail_usage("train: trajectory shorter than the rollout window");
    if (cfg.total_steps == 0) cfg.total_steps = cfg.epochs * (int64_t)train_set.size();

    std::vector<Scene> scenes;
    scenes.reserve(train_set.size());
    for (const auto& t : train_set) scenes.push_back(model.make_scene(t));

    Rng rng(cfg.seed);
    AdamState adam;
    TrainResult result;
    result.best_val_loss = std::numeric_limits<double>::infinity();
    result.best_val_step = -1;
    double last_val = std::numeric_limits<double>::quiet_NaN();
    int64_t step = 0;

    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t idx : order) {
            const Trajectory& traj = train_set[idx];
            int64_t max_start = traj.frame_count() - cfg.window;
            int64_t start = max_start > 0 ? (int64_t)rng.below((uint64_t)max_start + 1) : 0;
            model.params.zero_grad();
            Graph g;
            auto wl = window_loss_graph(g, model, scenes[idx], traj, start, cfg.window, cfg.loss);
            double loss = wl.loss.data()[0];
            if (!std::isfinite(loss))
                fail_numeric("train: non-finite loss at step " + std::to_string(step));
            g.backward(wl.loss);
            model.params.clip_global_norm(cfg.clip_norm);
            double lr = lr_at(step, cfg);
            adamw_step(model.params, adam, lr, cfg);
            result.curve.push_back(CurvePoint{step, loss, last_val, lr});
            ++step;
        }
        if (!val_set.empty()) {
            last_val = window_loss(model, val_set, cfg.window, cfg.loss);
            if (!result.curve.empty()) result.curve.back().val_loss = last_val;
            if (last_val < result.best_val_loss) {
                result.best_val_loss = last_val;
                result.best_val_step = step - 1;
                result.best_params = model.params;
            }
        }
    }
    if (val_set.empty()) {
        result.best_params = model.params;
        result.best_val_step = step - 1;
        result.best_val_loss = result.curve.empty() ? 0.0 : result.curve.back().train_loss;
    }
    return result;
}

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve) {
    std::ofstream f(path);
    if (!f) fail_validation("train: cannot write curve csv " + path);
    f << "step,train_loss,val_loss,lr\n";
    f.precision(12);
    for (const auto& p : curve) {
        f << p.step << "," << p.train_loss << ",";
        if (std::isfinite(p.val_loss)) f << p.val_loss;
        f << "," << p.lr << "\n";
    }
}

InverseDesignResult sigmoid_gradient_descent(const std::function<std::pair<double, double>(double)>& eval,
                                             double target, double mu0, double lo, double hi,
                                             double step_size, int64_t iterations) {
    if (!(hi > lo)) fail_usage("inverse_design: bad admissible interval");
    double frac = (mu0 - lo) / (hi - lo);
    frac = std::min(std::max(frac, 1e-6), 1.0 - 1e-6);
    double z = std::log(frac / (1.0 - frac));
    auto mu_of = [&](double zz) { return lo + (hi - lo) / (1.0 + std::exp(-zz)); };
    auto objective_at = [&](double zz) {
        auto [s, ds] = eval(mu_of(zz));
        (void)ds;
        double d = s - target;
        return d * d;
    };

    InverseDesignResult out;
    double step = step_size;
    for (int64_t it = 0; it < iterations; ++it) {
        double mu = mu_of(z);
        auto [s, ds_dmu] = eval(mu);
        double diff = s - target;
        double obj = diff * diff;
        out.curve.push_back({mu, obj});
        double sig = 1.0 / (1.0 + std::exp(-z));
        double dmu_dz = (hi - lo) * sig * (1.0 - sig);
        double dz = 2.0 * diff * ds_dmu * dmu_dz;
        // plain descent with step halving when a move would not improve
        double trial = z - step * dz;
        int tries = 0;
        while (tries < 6 && objective_at(trial) > obj) {
            step *= 0.5;
            trial = z - step * dz;
            ++tries;
        }
        z = trial;
    }
    out.mu = mu_of(z);
    return out;
}

InverseDesignResult inverse_design(Model& model, const Trajectory& template_traj,
                                   const InverseDesignConfig& cfg) {
    if (cfg.mu_channel < 1 || cfg.mu_channel >= template_traj.attr_dim())
        fail_usage("inverse_design: mu channel out of range");
    int64_t steps = cfg.window > 0 ? cfg.window : template_traj.frame_count() - 1;
    if (steps < 1 || steps >= template_traj.frame_count())
        fail_usage("inverse_design: rollout window does not fit the template");
    Scene scene = model.make_scene(template_traj);
    int64_t n = template_traj.particle_count();

    // Columns of the attribute table other than mu stay constant.
    std::vector<Tensor> cols;
    for (int64_t c = 0; c < template_traj.attr_dim(); ++c) {
        Tensor col({n, 1});
        for (int64_t i = 0; i < n; ++i) col.at(i, 0) = template_traj.attributes.at(i, c);
        cols.push_back(std::move(col));
    }

    auto eval = [&](double mu) -> std::pair<double, double> {
        Graph g;
        Value mu_scalar = g.input(Tensor::scalar(mu), true);
        std::vector<Value> parts;
        for (int64_t c = 0; c < (int64_t)cols.size(); ++c)
            parts.push_back(c == cfg.mu_channel ? g.broadcast_scalar(mu_scalar, n)
                                                : g.constant(cols[(size_t)c]));
        Value attrs = g.concat_cols(parts);
        Value x = g.constant(template_traj.frames[0].positions);
        Value v = g.constant(template_traj.frames[0].velocities);
        for (int64_t s = 0; s < steps; ++s) {
            auto [px, pv] = predict_step(g, x, v, template_traj.frames[(size_t)s].forces, scene.masses,
                                         template_traj.dt);
            auto corr = model.correct(g, px, pv, attrs, scene);
            x = g.add(px, corr.dx);
            v = g.add(pv, corr.dv);
        }
        // Body particles by the terminal height predicate.
        std::vector<int32_t> body;
        for (int64_t i = 0; i < n; ++i)
            if (x.data()[i * 3 + 2] <= cfg.body_z_threshold) body.push_back((int32_t)i);
        if (body.empty()) fail_validation("inverse_design: empty body-particle set at terminal frame");
        Value s_val = g.reduce_mean(g.slice_cols(g.gather_rows(x, body), 0, 1));
        g.backward(s_val);
        return {s_val.data()[0], mu_scalar.grad()[0]};
    };

    return sigmoid_gradient_descent(eval, cfg.target_x, cfg.mu0, cfg.mu_min, cfg.mu_max, cfg.step_size,
                                    cfg.iterations);
}

}  // namespace pf
