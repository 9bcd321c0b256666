#include "particleformer/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace pf {
namespace kernels {

namespace {
// Minimum per-loop work before spawning a parallel region.
constexpr int64_t kGrain = 1 << 13;

inline double dot(const double* a, const double* b, int64_t n) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}
}  // namespace

void matmul(const double* a, const double* b, double* y, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for if (m * k * n > kGrain) schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        double* yi = y + i * n;
        std::memset(yi, 0, (size_t)n * sizeof(double));
        const double* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            double aip = ai[p];
            const double* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) yi[j] += aip * bp[j];
        }
    }
}

void matmul_at_acc(const double* a, const double* dy, double* db, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for if (m * k * n > kGrain) schedule(static)
    for (int64_t p = 0; p < k; ++p) {
        double* dbp = db + p * n;
        for (int64_t i = 0; i < m; ++i) {
            double aip = a[i * k + p];
            const double* dyi = dy + i * n;
            for (int64_t j = 0; j < n; ++j) dbp[j] += aip * dyi[j];
        }
    }
}

void matmul_bt_acc(const double* dy, const double* b, double* da, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for if (m * k * n > kGrain) schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        const double* dyi = dy + i * n;
        double* dai = da + i * k;
        for (int64_t p = 0; p < k; ++p) dai[p] += dot(dyi, b + p * n, n);
    }
}

void softmax_rows(const double* x, double* y, int64_t m, int64_t n) {
#pragma omp parallel for if (m * n > kGrain) schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        const double* xi = x + i * n;
        double* yi = y + i * n;
        double mx = xi[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            s += yi[j];
        }
        double inv = 1.0 / s;
        for (int64_t j = 0; j < n; ++j) yi[j] *= inv;
    }
}

void layer_norm_rows(const double* x, const double* gain, const double* bias, double* y,
                     double* mean_cache, double* inv_std_cache, int64_t m, int64_t n, double eps) {
#pragma omp parallel for if (m * n > kGrain) schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        const double* xi = x + i * n;
        double* yi = y + i * n;
        double mu = 0.0;
        for (int64_t j = 0; j < n; ++j) mu += xi[j];
        mu /= (double)n;
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double d = xi[j] - mu;
            var += d * d;
        }
        var /= (double)n;
        double istd = 1.0 / std::sqrt(var + eps);
        mean_cache[i] = mu;
        inv_std_cache[i] = istd;
        for (int64_t j = 0; j < n; ++j) yi[j] = gain[j] * ((xi[j] - mu) * istd) + bias[j];
    }
}

void segment_sum(const double* x, const int32_t* members, const int64_t* offsets, double* y,
                 int64_t segs, int64_t n) {
#pragma omp parallel for if (segs * n > kGrain) schedule(static)
    for (int64_t s = 0; s < segs; ++s) {
        double* ys = y + s * n;
        std::memset(ys, 0, (size_t)n * sizeof(double));
        for (int64_t p = offsets[s]; p < offsets[s + 1]; ++p) {
            const double* xr = x + (int64_t)members[p] * n;
            for (int64_t j = 0; j < n; ++j) ys[j] += xr[j];
        }
    }
}

void gather_rows(const double* x, const int32_t* idx, double* y, int64_t p, int64_t n) {
#pragma omp parallel for if (p * n > kGrain) schedule(static)
    for (int64_t r = 0; r < p; ++r)
        std::memcpy(y + r * n, x + (int64_t)idx[r] * n, (size_t)n * sizeof(double));
}

void relu(const double* x, double* y, int64_t n) {
#pragma omp parallel for if (n > kGrain) schedule(static)
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void cosine_pairs(const double* a, const double* b, double* s, int64_t ma, int64_t mb, int64_t d) {
    std::vector<double> nb(mb);
    for (int64_t j = 0; j < mb; ++j) nb[j] = std::sqrt(dot(b + j * d, b + j * d, d));
#pragma omp parallel for if (ma * mb * d > kGrain) schedule(static)
    for (int64_t i = 0; i < ma; ++i) {
        const double* ai = a + i * d;
        double na = std::sqrt(dot(ai, ai, d));
        double* si = s + i * mb;
        for (int64_t j = 0; j < mb; ++j) {
            double den = na * nb[j];
            si[j] = den > 1e-30 ? dot(ai, b + j * d, d) / den : 0.0;
        }
    }
}

void attention_forward(const double* q, const double* k, const double* v, double* o,
                       double* row_max, double* row_sum, int64_t mq, int64_t mk, int64_t heads,
                       int64_t dh) {
    const double alpha = 1.0 / std::sqrt((double)dh);
    const int64_t w = heads * dh;
#pragma omp parallel for if (heads * mq * mk * dh > kGrain) schedule(static) collapse(2)
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < mq; ++i) {
            const double* qi = q + i * w + h * dh;
            double mx = -1e300;
            for (int64_t j = 0; j < mk; ++j)
                mx = std::max(mx, alpha * dot(qi, k + j * w + h * dh, dh));
            double* oi = o + i * w + h * dh;
            std::memset(oi, 0, (size_t)dh * sizeof(double));
            double s = 0.0;
            for (int64_t j = 0; j < mk; ++j) {
                double wj = std::exp(alpha * dot(qi, k + j * w + h * dh, dh) - mx);
                s += wj;
                const double* vj = v + j * w + h * dh;
                for (int64_t c = 0; c < dh; ++c) oi[c] += wj * vj[c];
            }
            double inv = 1.0 / s;
            for (int64_t c = 0; c < dh; ++c) oi[c] *= inv;
            row_max[h * mq + i] = mx;
            row_sum[h * mq + i] = s;
        }
    }
}

void attention_backward(const double* q, const double* k, const double* v, const double* dout,
                        const double* row_max, const double* row_sum, double* dq, double* dk,
                        double* dv, int64_t mq, int64_t mk, int64_t heads, int64_t dh) {
    const double alpha = 1.0 / std::sqrt((double)dh);
    const int64_t w = heads * dh;
    // D[h,i] = sum_j p_ij (dout_i . v_j), needed by both remaining phases.
    std::vector<double> dstat((size_t)(heads * mq));
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < mq; ++i) {
            const double* qi = q + i * w + h * dh;
            const double* doi = dout + i * w + h * dh;
            double mx = row_max[h * mq + i];
            double inv_s = 1.0 / row_sum[h * mq + i];
            double acc = 0.0;
            for (int64_t j = 0; j < mk; ++j) {
                double p = std::exp(alpha * dot(qi, k + j * w + h * dh, dh) - mx) * inv_s;
                acc += p * dot(doi, v + j * w + h * dh, dh);
            }
            dstat[(size_t)(h * mq + i)] = acc;
        }
    }
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < mq; ++i) {
            const double* qi = q + i * w + h * dh;
            const double* doi = dout + i * w + h * dh;
            double mx = row_max[h * mq + i];
            double inv_s = 1.0 / row_sum[h * mq + i];
            double di = dstat[(size_t)(h * mq + i)];
            double* dqi = dq + i * w + h * dh;
            for (int64_t j = 0; j < mk; ++j) {
                const double* kj = k + j * w + h * dh;
                double p = std::exp(alpha * dot(qi, kj, dh) - mx) * inv_s;
                double dl = alpha * p * (dot(doi, v + j * w + h * dh, dh) - di);
                for (int64_t c = 0; c < dh; ++c) dqi[c] += dl * kj[c];
            }
        }
    }
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t j = 0; j < mk; ++j) {
            const double* kj = k + j * w + h * dh;
            const double* vj = v + j * w + h * dh;
            double* dkj = dk + j * w + h * dh;
            double* dvj = dv + j * w + h * dh;
            for (int64_t i = 0; i < mq; ++i) {
                const double* qi = q + i * w + h * dh;
                const double* doi = dout + i * w + h * dh;
                double mx = row_max[h * mq + i];
                double inv_s = 1.0 / row_sum[h * mq + i];
                double p = std::exp(alpha * dot(qi, kj, dh) - mx) * inv_s;
                double dl = alpha * p * (dot(doi, vj, dh) - dstat[(size_t)(h * mq + i)]);
                for (int64_t c = 0; c < dh; ++c) {
                    dvj[c] += p * doi[c];
                    dkj[c] += dl * qi[c];
                }
            }
        }
    }
}

namespace {
// Shared trilinear weight computation: corner indices and weights for one
// displacement, or false when outside the support.
inline bool trilinear_setup(const double* r, int64_t g, double radius, int64_t corner[8],
                            double weight[8]) {
    double d2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    if (d2 > radius * radius) return false;
    int64_t n[3];
    double t[3];
    for (int a = 0; a < 3; ++a) {
        double xi = (r[a] / radius + 1.0) * 0.5 * (double)(g - 1);
        int64_t nf = (int64_t)std::floor(xi);
        nf = std::clamp(nf, (int64_t)0, g - 2);
        n[a] = nf;
        t[a] = std::clamp(xi - (double)nf, 0.0, 1.0);
    }
    for (int c = 0; c < 8; ++c) {
        int dx = (c >> 2) & 1, dy = (c >> 1) & 1, dz = c & 1;
        corner[c] = ((n[0] + dx) * g + (n[1] + dy)) * g + (n[2] + dz);
        weight[c] = (dx ? t[0] : 1.0 - t[0]) * (dy ? t[1] : 1.0 - t[1]) * (dz ? t[2] : 1.0 - t[2]);
    }
    return true;
}
}  // namespace

void trilinear_gather(const double* theta, const double* r, double* w, int64_t pairs,
                      const TriGeom& geom) {
#pragma omp parallel for if (pairs * geom.mat > kGrain) schedule(static)
    for (int64_t p = 0; p < pairs; ++p) {
        double* wp = w + p * geom.mat;
        int64_t corner[8];
        double weight[8];
        if (!trilinear_setup(r + p * 3, geom.g, geom.radius, corner, weight)) {
            std::memset(wp, 0, (size_t)geom.mat * sizeof(double));
            continue;
        }
        std::memset(wp, 0, (size_t)geom.mat * sizeof(double));
        for (int c = 0; c < 8; ++c) {
            const double* vtx = theta + corner[c] * geom.mat;
            double wc = weight[c];
            for (int64_t e = 0; e < geom.mat; ++e) wp[e] += wc * vtx[e];
        }
    }
}

namespace detail {
bool trilinear_corners(const double* r, int64_t g, double radius, int64_t corner[8],
                       double weight[8]) {
    return trilinear_setup(r, g, radius, corner, weight);
}
}  // namespace detail

namespace ref {

void matmul(const double* a, const double* b, double* y, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        double* yi = y + i * n;
        std::memset(yi, 0, (size_t)n * sizeof(double));
        for (int64_t p = 0; p < k; ++p) {
            double aip = a[i * k + p];
            const double* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) yi[j] += aip * bp[j];
        }
    }
}

void matmul_at_acc(const double* a, const double* dy, double* db, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < k; ++p) {
        double* dbp = db + p * n;
        for (int64_t i = 0; i < m; ++i) {
            double aip = a[i * k + p];
            const double* dyi = dy + i * n;
            for (int64_t j = 0; j < n; ++j) dbp[j] += aip * dyi[j];
        }
    }
}

void matmul_bt_acc(const double* dy, const double* b, double* da, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* dyi = dy + i * n;
        double* dai = da + i * k;
        for (int64_t p = 0; p < k; ++p) dai[p] += dot(dyi, b + p * n, n);
    }
}

void softmax_rows(const double* x, double* y, int64_t m, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* xi = x + i * n;
        double* yi = y + i * n;
        double mx = xi[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            s += yi[j];
        }
        double inv = 1.0 / s;
        for (int64_t j = 0; j < n; ++j) yi[j] *= inv;
    }
}

void layer_norm_rows(const double* x, const double* gain, const double* bias, double* y,
                     double* mean_cache, double* inv_std_cache, int64_t m, int64_t n, double eps) {
    for (int64_t i = 0; i < m; ++i) {
        const double* xi = x + i * n;
        double* yi = y + i * n;
        double mu = 0.0;
        for (int64_t j = 0; j < n; ++j) mu += xi[j];
        mu /= (double)n;
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double d = xi[j] - mu;
            var += d * d;
        }
        var /= (double)n;
        double istd = 1.0 / std::sqrt(var + eps);
        mean_cache[i] = mu;
        inv_std_cache[i] = istd;
        for (int64_t j = 0; j < n; ++j) yi[j] = gain[j] * ((xi[j] - mu) * istd) + bias[j];
    }
}

void segment_sum(const double* x, const int32_t* members, const int64_t* offsets, double* y,
                 int64_t segs, int64_t n) {
    for (int64_t s = 0; s < segs; ++s) {
        double* ys = y + s * n;
        std::memset(ys, 0, (size_t)n * sizeof(double));
        for (int64_t p = offsets[s]; p < offsets[s + 1]; ++p) {
            const double* xr = x + (int64_t)members[p] * n;
            for (int64_t j = 0; j < n; ++j) ys[j] += xr[j];
        }
    }
}

void gather_rows(const double* x, const int32_t* idx, double* y, int64_t p, int64_t n) {
    for (int64_t r = 0; r < p; ++r)
        std::memcpy(y + r * n, x + (int64_t)idx[r] * n, (size_t)n * sizeof(double));
}

void cosine_pairs(const double* a, const double* b, double* s, int64_t ma, int64_t mb, int64_t d) {
    std::vector<double> nb(mb);
    for (int64_t j = 0; j < mb; ++j) nb[j] = std::sqrt(dot(b + j * d, b + j * d, d));
    for (int64_t i = 0; i < ma; ++i) {
        const double* ai = a + i * d;
        double na = std::sqrt(dot(ai, ai, d));
        double* si = s + i * mb;
        for (int64_t j = 0; j < mb; ++j) {
            double den = na * nb[j];
            si[j] = den > 1e-30 ? dot(ai, b + j * d, d) / den : 0.0;
        }
    }
}

void attention_forward(const double* q, const double* k, const double* v, double* o,
                       double* row_max, double* row_sum, int64_t mq, int64_t mk, int64_t heads,
                       int64_t dh) {
    const double alpha = 1.0 / std::sqrt((double)dh);
    const int64_t w = heads * dh;
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < mq; ++i) {
            const double* qi = q + i * w + h * dh;
            double mx = -1e300;
            for (int64_t j = 0; j < mk; ++j)
                mx = std::max(mx, alpha * dot(qi, k + j * w + h * dh, dh));
            double* oi = o + i * w + h * dh;
            std::memset(oi, 0, (size_t)dh * sizeof(double));
            double s = 0.0;
            for (int64_t j = 0; j < mk; ++j) {
                double wj = std::exp(alpha * dot(qi, k + j * w + h * dh, dh) - mx);
                s += wj;
                const double* vj = v + j * w + h * dh;
                for (int64_t c = 0; c < dh; ++c) oi[c] += wj * vj[c];
            }
            double inv = 1.0 / s;
            for (int64_t c = 0; c < dh; ++c) oi[c] *= inv;
            row_max[h * mq + i] = mx;
            row_sum[h * mq + i] = s;
        }
    }
}

void trilinear_gather(const double* theta, const double* r, double* w, int64_t pairs,
                      const TriGeom& geom) {
    for (int64_t p = 0; p < pairs; ++p) {
        double* wp = w + p * geom.mat;
        std::memset(wp, 0, (size_t)geom.mat * sizeof(double));
        int64_t corner[8];
        double weight[8];
        if (!trilinear_setup(r + p * 3, geom.g, geom.radius, corner, weight)) continue;
        for (int c = 0; c < 8; ++c) {
            const double* vtx = theta + corner[c] * geom.mat;
            double wc = weight[c];
            for (int64_t e = 0; e < geom.mat; ++e) wp[e] += wc * vtx[e];
        }
    }
}

}  // namespace ref
}  // namespace kernels
}  // namespace pf
