#include "particleformer/loss.hpp"

#include <cmath>
#include <sstream>

#include "particleformer/error.hpp"
#include "particleformer/kernels.hpp"
#include "particleformer/neighborhood.hpp"

namespace pf {

void LossWeights::validate() const {
    if (beta_x < 0 || beta_v < 0 || lambda_phys < 0) fail_usage("loss: weights must be non-negative");
    if (beta_x + beta_v <= 0) fail_usage("loss: beta_x + beta_v must be positive");
    if (!(sph_support > 0)) fail_usage("loss: sph support must be positive");
}

Value rollout_loss(Graph& g, const std::vector<std::pair<Value, Value>>& predicted,
                   const std::vector<Trajectory::Frame>& truth, int64_t first_truth_frame,
                   const LossWeights& w) {
    w.validate();
    if (predicted.empty()) fail_usage("rollout_loss: no predicted frames");
    if (first_truth_frame + (int64_t)predicted.size() > (int64_t)truth.size())
        fail_usage("rollout_loss: ground truth has too few frames");
    Value acc;
    for (size_t s = 0; s < predicted.size(); ++s) {
        const auto& frame = truth[(size_t)first_truth_frame + s];
        Value term = g.affine(g.mse(predicted[s].first, g.constant(frame.positions)), w.beta_x, 0.0);
        term = g.add(term, g.affine(g.mse(predicted[s].second, g.constant(frame.velocities)), w.beta_v, 0.0));
        acc = s == 0 ? term : g.add(acc, term);
    }
    return g.affine(acc, 1.0 / (double)predicted.size(), 0.0);
}

Value sph_divergence_value(Graph& g, Value positions, Value velocities,
                           const std::vector<double>& masses, double h) {
    if (!(h > 0)) fail_usage("sph_divergence: support must be positive");
    Tensor px = positions.to_tensor();
    NeighborList nl = build_spatial(px, 2.0 * h);
    std::vector<int64_t> offsets = nl.offsets;
    std::vector<int32_t> neighbors = nl.indices;
    return g.sph_divergence(positions, velocities, masses, std::move(offsets), std::move(neighbors), h);
}

Tensor sph_divergence_field(const Tensor& positions, const Tensor& velocities,
                            const std::vector<double>& masses, double h) {
    if (!(h > 0)) fail_usage("sph_divergence: support must be positive");
    int64_t n = positions.shape[0];
    Tensor out({n, 1});
    const double w0 = kernels::sph_w(0.0, h);
    for (int64_t i = 0; i < n; ++i) {
        double rho = masses[(size_t)i] * w0;
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double e[3], r2 = 0.0;
            for (int64_t c = 0; c < 3; ++c) {
                e[c] = positions.at(i, c) - positions.at(j, c);
                r2 += e[c] * e[c];
            }
            double r = std::sqrt(r2);
            if (r > 2.0 * h) continue;
            rho += masses[(size_t)j] * kernels::sph_w(r, h);
            if (r > 0.0) {
                double gw = kernels::sph_dw(r, h) / r;
                double dv_dot = 0.0;
                for (int64_t c = 0; c < 3; ++c)
                    dv_dot += (velocities.at(i, c) - velocities.at(j, c)) * e[c];
                s += masses[(size_t)j] * gw * dv_dot;
            }
        }
        if (rho <= 0.0)
            fail_numeric("sph_divergence: particle " + std::to_string(i) + " isolated beyond support");
        out.at(i, 0) = -s / rho;
    }
    return out;
}

EvalReport eval_metrics(const Trajectory& predicted, const Trajectory& reference, int64_t ref_offset,
                        double seconds) {
    if (predicted.particle_count() != reference.particle_count())
        fail_validation("eval: particle counts differ");
    if (ref_offset < 0 || ref_offset + predicted.frame_count() > reference.frame_count())
        fail_validation("eval: frames not aligned (pred " + std::to_string(predicted.frame_count()) +
                        " + offset " + std::to_string(ref_offset) + " vs ref " +
                        std::to_string(reference.frame_count()) + ")");
    EvalReport rep;
    rep.frames = predicted.frame_count();
    int64_t n = predicted.particle_count();
    double pos_acc = 0.0, vel_acc = 0.0;
    for (int64_t f = 0; f < predicted.frame_count(); ++f) {
        const auto& pf_ = predicted.frames[(size_t)f];
        const auto& rf = reference.frames[(size_t)(f + ref_offset)];
        double pos = 0.0, vel = 0.0;
        for (int64_t i = 0; i < n * 3; ++i) {
            double dp = pf_.positions.data[(size_t)i] - rf.positions.data[(size_t)i];
            double dv = pf_.velocities.data[(size_t)i] - rf.velocities.data[(size_t)i];
            pos += dp * dp;
            vel += dv * dv;
        }
        pos /= (double)(n * 3);
        vel /= (double)(n * 3);
        rep.per_frame_position.push_back(pos);
        rep.per_frame_velocity.push_back(vel);
        pos_acc += pos;
        vel_acc += vel;
    }
    rep.position_mse = pos_acc / (double)rep.frames;
    rep.velocity_mse = vel_acc / (double)rep.frames;
    if (seconds > 0) rep.frames_per_second = (double)rep.frames / seconds;
    return rep;
}

std::string EvalReport::to_text() const {
    std::ostringstream out;
    out.precision(12);
    out << "frames = " << frames << "\n";
    out << "position_mse = " << position_mse << "\n";
    out << "velocity_mse = " << velocity_mse << "\n";
    if (frames_per_second > 0) out << "frames_per_second = " << frames_per_second << "\n";
    for (size_t f = 0; f < per_frame_position.size(); ++f) {
        out << "frame" << f << ".position_mse = " << per_frame_position[f] << "\n";
        out << "frame" << f << ".velocity_mse = " << per_frame_velocity[f] << "\n";
    }
    return out.str();
}

}  // namespace pf
