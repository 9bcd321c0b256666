#include "particleformer/encoder.hpp"

#include <cmath>

#include "particleformer/error.hpp"
#include "particleformer/kernels.hpp"

namespace pf {

MergePlan plan_merge(const double* tokens, int64_t m, int64_t d) {
    if (m < 1) fail_usage("plan_merge: need at least one token");
    MergePlan plan;
    plan.input_count = m;
    int64_t na = (m + 1) / 2, nb = m / 2;
    std::vector<int32_t> a_idx((size_t)na), b_idx((size_t)nb);
    for (int64_t i = 0; i < na; ++i) a_idx[(size_t)i] = (int32_t)(2 * i);
    for (int64_t i = 0; i < nb; ++i) b_idx[(size_t)i] = (int32_t)(2 * i + 1);

    plan.dest_a = a_idx;
    plan.dest_b.assign((size_t)na, -1);
    if (nb == 0) return plan;

    std::vector<double> a_rows((size_t)(na * d)), b_rows((size_t)(nb * d));
    for (int64_t i = 0; i < na; ++i)
        std::copy_n(tokens + (int64_t)a_idx[(size_t)i] * d, d, a_rows.begin() + i * d);
    for (int64_t i = 0; i < nb; ++i)
        std::copy_n(tokens + (int64_t)b_idx[(size_t)i] * d, d, b_rows.begin() + i * d);

    std::vector<double> sim((size_t)(nb * na));
    kernels::cosine_pairs(b_rows.data(), a_rows.data(), sim.data(), nb, na, d);

    // Exact zero vectors rank below everything.
    auto is_zero = [d](const double* row) {
        for (int64_t c = 0; c < d; ++c)
            if (row[c] != 0.0) return false;
        return true;
    };
    std::vector<bool> a_zero((size_t)na), b_zero((size_t)nb);
    for (int64_t i = 0; i < na; ++i) a_zero[(size_t)i] = is_zero(a_rows.data() + i * d);
    for (int64_t i = 0; i < nb; ++i) b_zero[(size_t)i] = is_zero(b_rows.data() + i * d);

    std::vector<bool> taken((size_t)na, false);
    for (int64_t b = 0; b < nb; ++b) {
        int64_t best = -1;
        double best_sim = 0.0;
        for (int64_t a = 0; a < na; ++a) {
            if (taken[(size_t)a]) continue;
            double s = (a_zero[(size_t)a] || b_zero[(size_t)b]) ? -std::numeric_limits<double>::infinity()
                                                                : sim[(size_t)(b * na + a)];
            if (best < 0 || s > best_sim) {
                best = a;
                best_sim = s;
            }
        }
        taken[(size_t)best] = true;
        plan.dest_b[(size_t)best] = b_idx[(size_t)b];
    }
    return plan;
}

TokenLevel merge(Graph& g, ParamStore& ps, const std::string& mlp_prefix, const TokenLevel& level,
                 const MergePlan& plan) {
    int64_t m_out = plan.output_count();
    if (plan.input_count != level.tokens.rows() || plan.input_count != (int64_t)level.multiplicity.size())
        fail_usage("merge: plan does not match token level");

    std::vector<int32_t> sources, segments;
    std::vector<double> weights, mult((size_t)m_out);
    sources.reserve((size_t)plan.input_count);
    for (int64_t i = 0; i < m_out; ++i) {
        int32_t a = plan.dest_a[(size_t)i];
        int32_t b = plan.dest_b[(size_t)i];
        double ma = level.multiplicity[(size_t)a];
        double mb = b >= 0 ? level.multiplicity[(size_t)b] : 0.0;
        double mi = ma + mb;
        mult[(size_t)i] = mi;
        sources.push_back(a);
        segments.push_back((int32_t)i);
        weights.push_back(ma / mi);
        if (b >= 0) {
            sources.push_back(b);
            segments.push_back((int32_t)i);
            weights.push_back(mb / mi);
        }
    }

    Value gathered_tokens = g.row_scale(g.gather_rows(level.tokens, sources), weights);
    Value gathered_anchors = g.row_scale(g.gather_rows(level.anchors, sources), weights);
    Value merged_tokens = g.segment_sum(gathered_tokens, segments, m_out);
    Value merged_anchors = g.segment_sum(gathered_anchors, segments, m_out);

    // Residual two-layer MLP on tokens; anchors bypass it.
    Value h = g.relu(g.add_bias(g.matmul(merged_tokens, g.param(ps.at(mlp_prefix + ".l1.w"))),
                                g.param(ps.at(mlp_prefix + ".l1.b"))));
    Value mlp_out = g.add_bias(g.matmul(h, g.param(ps.at(mlp_prefix + ".l2.w"))),
                               g.param(ps.at(mlp_prefix + ".l2.b")));
    TokenLevel out;
    out.tokens = g.add(merged_tokens, mlp_out);
    out.anchors = merged_anchors;
    out.multiplicity = std::move(mult);
    return out;
}

void register_encoder_params(ParamStore& ps, int64_t layers, int64_t dim, Rng& rng) {
    auto uniform = [&rng](std::vector<int64_t> shape, int64_t fan_in) {
        Tensor t(std::move(shape));
        double bound = std::sqrt(1.0 / (double)fan_in);
        for (auto& v : t.data) v = rng.uniform(-bound, bound);
        return t;
    };
    for (int64_t l = 1; l <= layers; ++l) {
        std::string prefix = "encoder.layer" + std::to_string(l);
        register_attention_params(ps, prefix + ".attn", dim, rng);
        ps.add(prefix + ".merge_mlp.l1.w", uniform({dim, dim}, dim));
        ps.add(prefix + ".merge_mlp.l1.b", uniform({dim}, dim));
        ps.add(prefix + ".merge_mlp.l2.w", uniform({dim, dim}, dim));
        ps.add(prefix + ".merge_mlp.l2.b", uniform({dim}, dim));
    }
}

EncodeResult encode(Graph& g, ParamStore& ps, const AttentionSpec& spec, TokenLevel level0,
                    int64_t layers) {
    if (layers < 1) fail_usage("encode: need at least one layer");
    EncodeResult out;
    TokenLevel level = std::move(level0);
    for (int64_t l = 1; l <= layers; ++l) {
        std::string prefix = "encoder.layer" + std::to_string(l);
        Value attended = self_attention_block(g, ps, prefix + ".attn", level.tokens, level.anchors, spec);
        MergePlan plan = plan_merge(attended.data(), attended.rows(), attended.cols());
        TokenLevel next = merge(g, ps, prefix + ".merge_mlp",
                                TokenLevel{attended, level.anchors, level.multiplicity}, plan);
        level = std::move(next);
        out.level_sizes.push_back(level.tokens.rows());
        double msum = 0.0;
        for (double m : level.multiplicity) msum += m;
        out.level_multiplicity_sums.push_back(msum);
    }
    out.supertokens = std::move(level);
    return out;
}

}  // namespace pf
