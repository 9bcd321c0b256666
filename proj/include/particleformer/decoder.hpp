#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "particleformer/attention.hpp"
#include "particleformer/graph.hpp"

namespace pf {

// Widths of the particle-wise prediction head, input through output. All but
// the last layer are Linear+ReLU+LayerNorm; the last is a plain linear whose
// output splits into (dX | dV).
struct HeadSpec {
    std::vector<int64_t> widths;  // e.g. {64, 32, 32, 6}

    static HeadSpec paper_scale() { return HeadSpec{{1152, 512, 512, 512, 512, 6}}; }
};

void register_decoder_params(ParamStore& ps, int64_t layers, int64_t dim, int64_t ffn_hidden, Rng& rng);
void register_head_params(ParamStore& ps, const HeadSpec& spec, Rng& rng);

// L layers of cross-attention to the super tokens, self-attention over
// particle tokens, and an FFN; token count stays N throughout.
Value decode(Graph& g, ParamStore& ps, const AttentionSpec& spec, Value particle_tokens,
             Value particle_anchors, Value supertokens, Value super_anchors, int64_t layers);

// Per-particle head mapping tokens to (dX, dV).
std::pair<Value, Value> predict_head(Graph& g, ParamStore& ps, const HeadSpec& spec, Value tokens);

// Parameter count of a head with the given widths (linears plus layer-norm
// gain/bias on all but the last layer). Pure arithmetic; the paper-scale spec
// yields 1,385,478.
int64_t count_head_params(const HeadSpec& spec);

}  // namespace pf
