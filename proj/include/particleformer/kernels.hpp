#pragma once

#include <cmath>
#include <cstdint>

namespace pf {
namespace kernels {

// Numeric inner loops, OpenMP-parallel over independent output elements.
// Every output element is produced by exactly one thread with a fixed
// internal reduction order, so results are bit-identical for any thread
// count and match the serial twins in kernels::ref (kept for testing and
// the benchmark target).

// y(m,n) = a(m,k) * b(k,n)
void matmul(const double* a, const double* b, double* y, int64_t m, int64_t k, int64_t n);
// db(k,n) += a(m,k)^T * dy(m,n)
void matmul_at_acc(const double* a, const double* dy, double* db, int64_t m, int64_t k, int64_t n);
// da(m,k) += dy(m,n) * b(k,n)^T
void matmul_bt_acc(const double* dy, const double* b, double* da, int64_t m, int64_t k, int64_t n);

void softmax_rows(const double* x, double* y, int64_t m, int64_t n);

// y = gain .* (x - mean)/sqrt(var + eps) + bias, per row; caches row mean and
// 1/sqrt(var+eps) for the backward pass.
void layer_norm_rows(const double* x, const double* gain, const double* bias, double* y,
                     double* mean_cache, double* inv_std_cache, int64_t m, int64_t n, double eps);

// y[s,:] = sum over rows x[members[offsets[s]..offsets[s+1]),:]. Empty
// segments yield zero rows.
void segment_sum(const double* x, const int32_t* members, const int64_t* offsets, double* y,
                 int64_t segs, int64_t n);

void gather_rows(const double* x, const int32_t* idx, double* y, int64_t p, int64_t n);

void relu(const double* x, double* y, int64_t n);

// s(ma,mb) = cosine similarity table; norm products below 1e-30 give 0.
void cosine_pairs(const double* a, const double* b, double* s, int64_t ma, int64_t mb, int64_t d);

// Multi-head attention core: o_i = sum_j softmax_j(q_i.k_j/sqrt(dh)) v_j per
// head. Head h occupies columns [h*dh,(h+1)*dh). Never materializes the
// (mq x mk) logit matrix; caches per-(head,query) running max and exp-sum so
// the backward pass can reconstruct attention weights pointwise.
void attention_forward(const double* q, const double* k, const double* v, double* o,
                       double* row_max, double* row_sum, int64_t mq, int64_t mk, int64_t heads,
                       int64_t dh);
void attention_backward(const double* q, const double* k, const double* v, const double* dout,
                        const double* row_max, const double* row_sum, double* dq, double* dk,
                        double* dv, int64_t mq, int64_t mk, int64_t heads, int64_t dh);

struct TriGeom {
    int64_t g = 0;       // lattice resolution per axis
    double radius = 0;   // support radius
    int64_t mat = 0;     // c_in * c_out entries per vertex
};

// w[p,:] = trilinearly interpolated vertex matrices of theta(g^3, mat) at
// displacement r[p,3]; zero outside the support radius.
void trilinear_gather(const double* theta, const double* r, double* w, int64_t pairs,
                      const TriGeom& geom);

// Cubic spline SPH kernel, support 2h, 3D normalization 1/(pi h^3).
inline double sph_w(double dist, double h) {
    double q = dist / h;
    double sigma = 1.0 / (3.14159265358979323846 * h * h * h);
    if (q < 1.0) return sigma * (1.0 - 1.5 * q * q + 0.75 * q * q * q);
    if (q < 2.0) {
        double u = 2.0 - q;
        return sigma * 0.25 * u * u * u;
    }
    return 0.0;
}

// dW/ddist
inline double sph_dw(double dist, double h) {
    double q = dist / h;
    double sigma = 1.0 / (3.14159265358979323846 * h * h * h);
    if (q < 1.0) return sigma * (-3.0 * q + 2.25 * q * q) / h;
    if (q < 2.0) {
        double u = 2.0 - q;
        return sigma * (-0.75 * u * u) / h;
    }
    return 0.0;
}

// d2W/ddist2
inline double sph_d2w(double dist, double h) {
    double q = dist / h;
    double sigma = 1.0 / (3.14159265358979323846 * h * h * h);
    if (q < 1.0) return sigma * (-3.0 + 4.5 * q) / (h * h);
    if (q < 2.0) return sigma * 1.5 * (2.0 - q) / (h * h);
    return 0.0;
}

namespace detail {
// Corner indices and trilinear weights for one displacement; false outside
// the support. Shared by forward and backward lattice code.
bool trilinear_corners(const double* r, int64_t g, double radius, int64_t corner[8],
                       double weight[8]);
}  // namespace detail

namespace ref {

// Serial reference implementations. Same per-element reduction order as the
// parallel kernels above, so outputs are bit-identical.
void matmul(const double* a, const double* b, double* y, int64_t m, int64_t k, int64_t n);
void matmul_at_acc(const double* a, const double* dy, double* db, int64_t m, int64_t k, int64_t n);
void matmul_bt_acc(const double* dy, const double* b, double* da, int64_t m, int64_t k, int64_t n);
void softmax_rows(const double* x, double* y, int64_t m, int64_t n);
void layer_norm_rows(const double* x, const double* gain, const double* bias, double* y,
                     double* mean_cache, double* inv_std_cache, int64_t m, int64_t n, double eps);
void segment_sum(const double* x, const int32_t* members, const int64_t* offsets, double* y,
                 int64_t segs, int64_t n);
void gather_rows(const double* x, const int32_t* idx, double* y, int64_t p, int64_t n);
void cosine_pairs(const double* a, const double* b, double* s, int64_t ma, int64_t mb, int64_t d);
void attention_forward(const double* q, const double* k, const double* v, double* o,
                       double* row_max, double* row_sum, int64_t mq, int64_t mk, int64_t heads,
                       int64_t dh);
void trilinear_gather(const double* theta, const double* r, double* w, int64_t pairs,
                      const TriGeom& geom);

}  // namespace ref
}  // namespace kernels
}  // namespace pf
