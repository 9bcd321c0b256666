#pragma once

#include <string>

#include "particleformer/graph.hpp"
#include "particleformer/param_store.hpp"
#include "particleformer/rng.hpp"

namespace pf {

struct AttentionSpec {
    int64_t dim = 64;
    int64_t heads = 4;
    int64_t rotary_dim = 12;  // per head; divisible by 6, <= head dim
    double base = 10000.0;
    double scale = 1.0;  // spatial scale mapped to 1 radian of phase

    int64_t head_dim() const { return dim / heads; }
    RopeConfig rope() const { return RopeConfig{heads, head_dim(), rotary_dim, base, scale}; }
    void validate(const std::string& who) const;
};

// Parameter registration. Attention blocks own q/k/v/o projections and a
// pre-norm layer norm; the FFN owns two linears and its own layer norm.
void register_attention_params(ParamStore& ps, const std::string& prefix, int64_t dim, Rng& rng);
void register_ffn_params(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t hidden, Rng& rng);

// y = x + O(MHA(rope(Q(LN x)), rope(K(LN x)), V(LN x))); anchors pass through.
Value self_attention_block(Graph& g, ParamStore& ps, const std::string& prefix, Value tokens,
                           Value anchors, const AttentionSpec& spec);

// Queries attend to the key/value token set; query count preserved. Rope uses
// query anchors for Q and key anchors for K.
Value cross_attention_block(Graph& g, ParamStore& ps, const std::string& prefix, Value q_tokens,
                            Value q_anchors, Value kv_tokens, Value kv_anchors,
                            const AttentionSpec& spec);

// y = x + W2 relu(W1 LN(x))
Value ffn_block(Graph& g, ParamStore& ps, const std::string& prefix, Value tokens);

// Debug/inspection: the explicit row-stochastic attention matrix [heads, mq, mk]
// a block would produce for these inputs (recomputed with plain kernels).
Tensor attention_weights(ParamStore& ps, const std::string& prefix, const Tensor& q_tokens,
                         const Tensor& q_anchors, const Tensor& kv_tokens, const Tensor& kv_anchors,
                         const AttentionSpec& spec);

}  // namespace pf
