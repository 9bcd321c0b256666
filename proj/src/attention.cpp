#include "particleformer/attention.hpp"

#include <cmath>

#include "particleformer/error.hpp"
#include "particleformer/kernels.hpp"

namespace pf {

namespace {

Tensor uniform_init(Rng& rng, std::vector<int64_t> shape, int64_t fan_in) {
    Tensor t(std::move(shape));
    double bound = std::sqrt(1.0 / (double)fan_in);
    for (auto& v : t.data) v = rng.uniform(-bound, bound);
    return t;
}

Value linear(Graph& g, ParamStore& ps, const std::string& prefix, Value x) {
    return g.add_bias(g.matmul(x, g.param(ps.at(prefix + ".w"))), g.param(ps.at(prefix + ".b")));
}

Value pre_norm(Graph& g, ParamStore& ps, const std::string& prefix, Value x) {
    return g.layer_norm(x, g.param(ps.at(prefix + ".ln.gain")), g.param(ps.at(prefix + ".ln.bias")));
}

}  // namespace

void AttentionSpec::validate(const std::string& who) const {
    if (dim <= 0 || heads <= 0 || dim % heads != 0)
        fail_usage(who + ": head count must divide token width");
    if (rotary_dim % 6 != 0 || rotary_dim < 0 || rotary_dim > head_dim())
        fail_usage(who + ": rotary dim must be divisible by 6 and fit in the head dim");
    if (!(scale > 0.0) || !(base > 0.0)) fail_usage(who + ": rope base and scale must be positive");
}

void register_attention_params(ParamStore& ps, const std::string& prefix, int64_t dim, Rng& rng) {
    ps.add(prefix + ".ln.gain", Tensor::full({dim}, 1.0));
    ps.add(prefix + ".ln.bias", Tensor::zeros({dim}));
    for (const char* name : {"wq", "wk", "wv", "wo"})
        ps.add(prefix + "." + name, uniform_init(rng, {dim, dim}, dim));
    for (const char* name : {"bq", "bk", "bv", "bo"})
        ps.add(prefix + "." + name, uniform_init(rng, {dim}, dim));
}

void register_ffn_params(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t hidden, Rng& rng) {
    ps.add(prefix + ".ln.gain", Tensor::full({dim}, 1.0));
    ps.add(prefix + ".ln.bias", Tensor::zeros({dim}));
    ps.add(prefix + ".l1.w", uniform_init(rng, {dim, hidden}, dim));
    ps.add(prefix + ".l1.b", uniform_init(rng, {hidden}, dim));
    ps.add(prefix + ".l2.w", uniform_init(rng, {hidden, dim}, hidden));
    ps.add(prefix + ".l2.b", uniform_init(rng, {dim}, hidden));
}

namespace {

Value attention_block(Graph& g, ParamStore& ps, const std::string& prefix, Value q_tokens,
                      Value q_anchors, Value kv_tokens, Value kv_anchors, const AttentionSpec& spec,
                      bool shared_norm) {
    spec.validate(prefix);
    if (q_tokens.cols() != spec.dim || kv_tokens.cols() != spec.dim)
        fail_usage(prefix + ": token width does not match attention dim");
    Value q_ln = pre_norm(g, ps, prefix, q_tokens);
    Value kv_ln = shared_norm ? q_ln : pre_norm(g, ps, prefix, kv_tokens);
    Value q = g.rope_rotate(g.add_bias(g.matmul(q_ln, g.param(ps.at(prefix + ".wq"))),
                                       g.param(ps.at(prefix + ".bq"))),
                            q_anchors, spec.rope());
    Value k = g.rope_rotate(g.add_bias(g.matmul(kv_ln, g.param(ps.at(prefix + ".wk"))),
                                       g.param(ps.at(prefix + ".bk"))),
                            kv_anchors, spec.rope());
    Value v = g.add_bias(g.matmul(kv_ln, g.param(ps.at(prefix + ".wv"))), g.param(ps.at(prefix + ".bv")));
    Value att = g.attention_core(q, k, v, spec.heads);
    Value out = g.add_bias(g.matmul(att, g.param(ps.at(prefix + ".wo"))), g.param(ps.at(prefix + ".bo")));
    return g.add(q_tokens, out);
}

}  // namespace

Value self_attention_block(Graph& g, ParamStore& ps, const std::string& prefix, Value tokens,
                           Value anchors, const AttentionSpec& spec) {
    return attention_block(g, ps, prefix, tokens, anchors, tokens, anchors, spec, true);
}

Value cross_attention_block(Graph& g, ParamStore& ps, const std::string& prefix, Value q_tokens,
                            Value q_anchors, Value kv_tokens, Value kv_anchors,
                            const AttentionSpec& spec) {
    if (kv_tokens.rows() == 0) fail_usage(prefix + ": empty key set");
    return attention_block(g, ps, prefix, q_tokens, q_anchors, kv_tokens, kv_anchors, spec, false);
}

Value ffn_block(Graph& g, ParamStore& ps, const std::string& prefix, Value tokens) {
    Value h = g.relu(linear(g, ps, prefix + ".l1", pre_norm(g, ps, prefix, tokens)));
    return g.add(tokens, linear(g, ps, prefix + ".l2", h));
}

Tensor attention_weights(ParamStore& ps, const std::string& prefix, const Tensor& q_tokens,
                         const Tensor& q_anchors, const Tensor& kv_tokens, const Tensor& kv_anchors,
                         const AttentionSpec& spec) {
    spec.validate(prefix);
    Graph g(false);
    Value q_ln = g.layer_norm(g.constant(q_tokens), g.param(ps.at(prefix + ".ln.gain")),
                              g.param(ps.at(prefix + ".ln.bias")));
    Value kv_ln = g.layer_norm(g.constant(kv_tokens), g.param(ps.at(prefix + ".ln.gain")),
                               g.param(ps.at(prefix + ".ln.bias")));
    Value q = g.rope_rotate(g.add_bias(g.matmul(q_ln, g.param(ps.at(prefix + ".wq"))),
                                       g.param(ps.at(prefix + ".bq"))),
                            g.constant(q_anchors), spec.rope());
    Value k = g.rope_rotate(g.add_bias(g.matmul(kv_ln, g.param(ps.at(prefix + ".wk"))),
                                       g.param(ps.at(prefix + ".bk"))),
                            g.constant(kv_anchors), spec.rope());
    int64_t mq = q.rows(), mk = k.rows(), h = spec.heads, dh = spec.head_dim();
    double alpha = 1.0 / std::sqrt((double)dh);
    Tensor out({h, mq, mk});
    std::vector<double> logits((size_t)mk);
    for (int64_t hh = 0; hh < h; ++hh) {
        for (int64_t i = 0; i < mq; ++i) {
            for (int64_t j = 0; j < mk; ++j) {
                double s = 0.0;
                for (int64_t c = 0; c < dh; ++c)
                    s += q.data()[i * spec.dim + hh * dh + c] * k.data()[j * spec.dim + hh * dh + c];
                logits[(size_t)j] = alpha * s;
            }
            kernels::ref::softmax_rows(logits.data(), out.data.data() + (hh * mq + i) * mk, 1, mk);
        }
    }
    return out;
}

}  // namespace pf
