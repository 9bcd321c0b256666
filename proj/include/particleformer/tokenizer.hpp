#pragma once

#include <string>

#include "particleformer/graph.hpp"
#include "particleformer/neighborhood.hpp"
#include "particleformer/param_store.hpp"
#include "particleformer/rng.hpp"
#include "particleformer/state.hpp"

namespace pf {

// Channel widths of the three aggregation branches and the token MLP.
struct TokenizerDims {
    int64_t attr_dim = 1;           // Cp
    int64_t boundary_attr_dim = 3;  // Cb
    int64_t token_dim = 64;         // d
    int64_t out_s = 16, out_t = 16, out_b = 16;
    int64_t lattice_res = 4;  // G

    int64_t in_s() const { return 3 + attr_dim; }            // [v_j, c_j]
    int64_t in_t() const { return 6 + attr_dim; }            // [v_j, c_j, rest_j - rest_i]
    int64_t in_b() const { return boundary_attr_dim; }       // c^b_j
    int64_t concat_width() const { return out_s + out_t + out_b + 3 + attr_dim; }
    int64_t vertex_count() const { return lattice_res * lattice_res * lattice_res; }
};

void register_tokenizer_params(ParamStore& ps, const TokenizerDims& dims, Rng& rng);

struct TokenizerInputs {
    Value pred_positions;   // [N,3], differentiable
    Value pred_velocities;  // [N,3], differentiable
    Value attributes;       // [N,Cp], differentiable (inverse design)
    Value boundary_positions;  // [Nb,3] constant
    Value boundary_attrs;      // [Nb,Cb] constant
    Value rest_positions;      // [N,3] constant
    const NeighborList* spatial = nullptr;
    const NeighborList* boundary = nullptr;
    const NeighborList* topology = nullptr;
    double radius_s = 0, radius_b = 0, radius_t = 0;
};

// Eq-style particle tokens: h_i = MLP([a_S, a_T, a_B, v_i, c_i]). Absent
// branches (empty neighbor lists) contribute exact zero blocks.
Value tokenize(Graph& g, ParamStore& ps, const TokenizerDims& dims, const TokenizerInputs& in);

// One aggregation branch: a_i = sum_{j in N_i} W(r_ij) u_ij, with W read from
// the lattice by trilinear interpolation. Pair rows are summed per segment in
// listed order; empty segments yield zero rows.
Value branch_aggregate(Graph& g, Value theta, Value displacements, Value features,
                       const std::vector<int32_t>& segments, int64_t n, int64_t c_in, int64_t c_out,
                       int64_t lattice_res, double radius);

// Standalone kernel evaluation for one displacement (tests): returns the
// interpolated c_in x c_out mixing matrix.
Tensor kernel_eval(const Tensor& theta, int64_t lattice_res, double radius, int64_t c_in, int64_t c_out,
                   const double r[3]);

}  // namespace pf
