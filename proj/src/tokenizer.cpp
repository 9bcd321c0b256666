#include "particleformer/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "particleformer/error.hpp"
#include "particleformer/kernels.hpp"

namespace pf {

namespace {

Tensor uniform_init(Rng& rng, std::vector<int64_t> shape, double bound) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(-bound, bound);
    return t;
}

// Pair structure in a canonical geometric order: within each query, pairs are
// sorted by displacement (x,y,z lexicographic; neighbor index breaks exact
// ties). The summation order is then independent of particle labeling, which
// keeps tokenize exactly permutation-equivariant.
struct PairLayout {
    std::vector<int32_t> query;    // per pair
    std::vector<int32_t> target;   // per pair
    std::vector<int32_t> segment;  // = query, for segment_sum
    int64_t count = 0;
};

PairLayout canonical_pairs(const NeighborList& nl) {
    PairLayout out;
    out.count = nl.pair_count();
    out.query.resize((size_t)out.count);
    out.target.resize((size_t)out.count);
    out.segment.resize((size_t)out.count);
    int64_t cursor = 0;
    std::vector<int64_t> order;
    for (int64_t i = 0; i < nl.query_count; ++i) {
        int64_t deg = nl.offsets[i + 1] - nl.offsets[i];
        order.resize((size_t)deg);
        std::iota(order.begin(), order.end(), nl.offsets[i]);
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            const double* da = &nl.disp[(size_t)a * 3];
            const double* db = &nl.disp[(size_t)b * 3];
            for (int c = 0; c < 3; ++c) {
                if (da[c] < db[c]) return true;
                if (da[c] > db[c]) return false;
            }
            return nl.indices[(size_t)a] < nl.indices[(size_t)b];
        });
        for (int64_t p : order) {
            out.query[(size_t)cursor] = (int32_t)i;
            out.target[(size_t)cursor] = nl.indices[(size_t)p];
            out.segment[(size_t)cursor] = (int32_t)i;
            ++cursor;
        }
    }
    return out;
}

}  // namespace

void register_tokenizer_params(ParamStore& ps, const TokenizerDims& dims, Rng& rng) {
    const double lattice_bound = 1e-2;
    ps.add("tokenizer.lattice.S",
           uniform_init(rng, {dims.vertex_count(), dims.in_s() * dims.out_s}, lattice_bound));
    ps.add("tokenizer.lattice.T",
           uniform_init(rng, {dims.vertex_count(), dims.in_t() * dims.out_t}, lattice_bound));
    ps.add("tokenizer.lattice.B",
           uniform_init(rng, {dims.vertex_count(), dims.in_b() * dims.out_b}, lattice_bound));
    int64_t cat = dims.concat_width();
    double b1 = std::sqrt(1.0 / (double)cat);
    ps.add("tokenizer.mlp.l1.w", uniform_init(rng, {cat, dims.token_dim}, b1));
    ps.add("tokenizer.mlp.l1.b", uniform_init(rng, {dims.token_dim}, b1));
    double b2 = std::sqrt(1.0 / (double)dims.token_dim);
    ps.add("tokenizer.mlp.l2.w", uniform_init(rng, {dims.token_dim, dims.token_dim}, b2));
    ps.add("tokenizer.mlp.l2.b", uniform_init(rng, {dims.token_dim}, b2));
    ps.add("tokenizer.mlp.ln.gain", Tensor::full({dims.token_dim}, 1.0));
    ps.add("tokenizer.mlp.ln.bias", Tensor::zeros({dims.token_dim}));
}

Value branch_aggregate(Graph& g, Value theta, Value displacements, Value features,
                       const std::vector<int32_t>& segments, int64_t n, int64_t c_in, int64_t c_out,
                       int64_t lattice_res, double radius) {
    kernels::TriGeom geom{lattice_res, radius, c_in * c_out};
    if (displacements.rows() == 0) {
        Tensor zeros({n, c_out});
        return g.constant(zeros);
    }
    Value w = g.trilinear_lookup(theta, displacements, geom);
    Value y = g.pair_matvec(w, features, c_in, c_out);
    return g.segment_sum(y, segments, n);
}

Value tokenize(Graph& g, ParamStore& ps, const TokenizerDims& dims, const TokenizerInputs& in) {
    int64_t n = in.pred_positions.rows();
    if (in.attributes.cols() != dims.attr_dim)
        fail_usage("tokenize: attribute width " + std::to_string(in.attributes.cols()) +
                   " does not match configured " + std::to_string(dims.attr_dim));
    if (in.boundary_attrs.cols() != dims.boundary_attr_dim)
        fail_usage("tokenize: boundary attribute width mismatch");

    // Particle-particle branch: r = x_j - x_i, u = [v_j, c_j]
    Value a_s;
    {
        PairLayout pl = canonical_pairs(*in.spatial);
        Value xq = g.gather_rows(in.pred_positions, pl.query);
        Value xt = g.gather_rows(in.pred_positions, pl.target);
        Value r = g.sub(xt, xq);
        Value u = g.concat_cols({g.gather_rows(in.pred_velocities, pl.target),
                                 g.gather_rows(in.attributes, pl.target)});
        a_s = branch_aggregate(g, g.param(ps.at("tokenizer.lattice.S")), r, u, pl.segment, n, dims.in_s(),
                               dims.out_s, dims.lattice_res, in.radius_s);
    }

    // Topology branch: r = rest_j - rest_i (constant), u = [v_j, c_j, r]
    Value a_t;
    {
        PairLayout pl = canonical_pairs(*in.topology);
        if (pl.count > 0 && in.rest_positions.rows() != n)
            fail_usage("tokenize: topology branch requires rest positions");
        Value rq = g.gather_rows(in.rest_positions, pl.query);
        Value rt = g.gather_rows(in.rest_positions, pl.target);
        Value r = g.sub(rt, rq);
        Value u = g.concat_cols({g.gather_rows(in.pred_velocities, pl.target),
                                 g.gather_rows(in.attributes, pl.target), r});
        a_t = branch_aggregate(g, g.param(ps.at("tokenizer.lattice.T")), r, u, pl.segment, n, dims.in_t(),
                               dims.out_t, dims.lattice_res, in.radius_t);
    }

    // Boundary branch: r = xb_j - x_i, u = c^b_j
    Value a_b;
    {
        PairLayout pl = canonical_pairs(*in.boundary);
        Value xq = g.gather_rows(in.pred_positions, pl.query);
        Value xt = g.gather_rows(in.boundary_positions, pl.target);
        Value r = g.sub(xt, xq);
        Value u = g.gather_rows(in.boundary_attrs, pl.target);
        a_b = branch_aggregate(g, g.param(ps.at("tokenizer.lattice.B")), r, u, pl.segment, n, dims.in_b(),
                               dims.out_b, dims.lattice_res, in.radius_b);
    }

    Value cat = g.concat_cols({a_s, a_t, a_b, in.pred_velocities, in.attributes});
    Value h1 = g.relu(g.add_bias(g.matmul(cat, g.param(ps.at("tokenizer.mlp.l1.w"))),
                                 g.param(ps.at("tokenizer.mlp.l1.b"))));
    Value h2 = g.add_bias(g.matmul(h1, g.param(ps.at("tokenizer.mlp.l2.w"))),
                          g.param(ps.at("tokenizer.mlp.l2.b")));
    return g.layer_norm(h2, g.param(ps.at("tokenizer.mlp.ln.gain")), g.param(ps.at("tokenizer.mlp.ln.bias")));
}

Tensor kernel_eval(const Tensor& theta, int64_t lattice_res, double radius, int64_t c_in, int64_t c_out,
                   const double r[3]) {
    kernels::TriGeom geom{lattice_res, radius, c_in * c_out};
    if (theta.shape.size() != 2 || theta.shape[0] != geom.g * geom.g * geom.g || theta.shape[1] != geom.mat)
        fail_usage("kernel_eval: lattice shape does not match geometry");
    Tensor out({c_in, c_out});
    kernels::trilinear_gather(theta.data.data(), r, out.data.data(), 1, geom);
    return out;
}

}  // namespace pf
