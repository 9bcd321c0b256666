#pragma once

#include <string>
#include <vector>

#include "particleformer/attention.hpp"
#include "particleformer/graph.hpp"

namespace pf {

// Pairing for one exact-halving merge step. Output token i keeps even-index
// source dest_a[i] and absorbs odd-index source dest_b[i] (-1 when the even
// token survives alone). Output count is ceil(M/2) for every M >= 1.
struct MergePlan {
    std::vector<int32_t> dest_a;
    std::vector<int32_t> dest_b;
    int64_t input_count = 0;

    int64_t output_count() const { return (int64_t)dest_a.size(); }
};

// Greedy bipartite matching: tokens split into even-index (kept) and
// odd-index (merged) halves; odd tokens in ascending order each take their
// most cosine-similar unmatched even token, ties to the lowest index.
// Zero vectors compare as -inf against everything.
MergePlan plan_merge(const double* tokens, int64_t m, int64_t d);

struct TokenLevel {
    Value tokens;
    Value anchors;
    std::vector<double> multiplicity;
};

// Multiplicity-weighted merge of tokens and anchors per the plan, followed by
// the residual merge MLP on tokens only.
TokenLevel merge(Graph& g, ParamStore& ps, const std::string& mlp_prefix, const TokenLevel& level,
                 const MergePlan& plan);

void register_encoder_params(ParamStore& ps, int64_t layers, int64_t dim, Rng& rng);

struct EncodeResult {
    TokenLevel supertokens;
    std::vector<int64_t> level_sizes;           // token count after each layer
    std::vector<double> level_multiplicity_sums;  // conserved particle count per level
};

// L layers of self-attention + merge; the survivors are the super tokens.
EncodeResult encode(Graph& g, ParamStore& ps, const AttentionSpec& spec, TokenLevel level0,
                    int64_t layers);

}  // namespace pf
