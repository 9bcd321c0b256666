#include "particleformer/decoder.hpp"

#include <cmath>

#include "particleformer/error.hpp"

namespace pf {

namespace {
Tensor uniform_init(Rng& rng, std::vector<int64_t> shape, int64_t fan_in) {
    Tensor t(std::move(shape));
    double bound = std::sqrt(1.0 / (double)fan_in);
    for (auto& v : t.data) v = rng.uniform(-bound, bound);
    return t;
}
}  // namespace

void register_decoder_params(ParamStore& ps, int64_t layers, int64_t dim, int64_t ffn_hidden, Rng& rng) {
    for (int64_t l = 1; l <= layers; ++l) {
        std::string prefix = "decoder.layer" + std::to_string(l);
        register_attention_params(ps, prefix + ".cross", dim, rng);
        register_attention_params(ps, prefix + ".self", dim, rng);
        register_ffn_params(ps, prefix + ".ffn", dim, ffn_hidden, rng);
    }
}

void register_head_params(ParamStore& ps, const HeadSpec& spec, Rng& rng) {
    if (spec.widths.size() < 2) fail_usage("head: need at least input and output widths");
    size_t layers = spec.widths.size() - 1;
    for (size_t l = 0; l < layers; ++l) {
        int64_t in = spec.widths[l], out = spec.widths[l + 1];
        std::string prefix = "head.l" + std::to_string(l + 1);
        bool last = l + 1 == layers;
        if (last) {
            // Zero weights and bias: the untrained corrector outputs exactly
            // (0,0), so the first rollout step equals the pure predictor.
            ps.add(prefix + ".w", Tensor::zeros({in, out}));
            ps.add(prefix + ".b", Tensor::zeros({out}));
        } else {
            ps.add(prefix + ".w", uniform_init(rng, {in, out}, in));
            ps.add(prefix + ".b", uniform_init(rng, {out}, in));
            ps.add(prefix + ".ln.gain", Tensor::full({out}, 1.0));
            ps.add(prefix + ".ln.bias", Tensor::zeros({out}));
        }
    }
}

Value decode(Graph& g, ParamStore& ps, const AttentionSpec& spec, Value particle_tokens,
             Value particle_anchors, Value supertokens, Value super_anchors, int64_t layers) {
    if (supertokens.rows() < 1) fail_usage("decode: need at least one super token");
    Value x = particle_tokens;
    for (int64_t l = 1; l <= layers; ++l) {
        std::string prefix = "decoder.layer" + std::to_string(l);
        x = cross_attention_block(g, ps, prefix + ".cross", x, particle_anchors, supertokens, super_anchors,
                                  spec);
        x = self_attention_block(g, ps, prefix + ".self", x, particle_anchors, spec);
        x = ffn_block(g, ps, prefix + ".ffn", x);
    }
    return x;
}

std::pair<Value, Value> predict_head(Graph& g, ParamStore& ps, const HeadSpec& spec, Value tokens) {
    if (tokens.cols() != spec.widths.front())
        fail_usage("predict_head: token width does not match head input width");
    size_t layers = spec.widths.size() - 1;
    Value x = tokens;
    for (size_t l = 0; l < layers; ++l) {
        std::string prefix = "head.l" + std::to_string(l + 1);
        x = g.add_bias(g.matmul(x, g.param(ps.at(prefix + ".w"))), g.param(ps.at(prefix + ".b")));
        if (l + 1 < layers)
            x = g.layer_norm(g.relu(x), g.param(ps.at(prefix + ".ln.gain")),
                             g.param(ps.at(prefix + ".ln.bias")));
    }
    if (x.cols() != 6) fail_usage("predict_head: output width must be 6");
    return {g.slice_cols(x, 0, 3), g.slice_cols(x, 3, 3)};
}

int64_t count_head_params(const HeadSpec& spec) {
    if (spec.widths.size() < 2) return 0;
    int64_t total = 0;
    size_t layers = spec.widths.size() - 1;
    for (size_t l = 0; l < layers; ++l) {
        int64_t in = spec.widths[l], out = spec.widths[l + 1];
        total += in * out + out;              // linear
        if (l + 1 < layers) total += 2 * out;  // layer-norm gain + bias
    }
    return total;
}

}  // namespace pf
