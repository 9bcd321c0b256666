#include "particleformer/graph.hpp"

#include <cmath>
#include <cstring>
#include <memory>

#include "particleformer/error.hpp"

namespace pf {

namespace {

void require_2d(const Value& v, const char* op) {
    if (v.shape().size() != 2) fail_usage(std::string(op) + ": expected rank-2 input, got " + shape_str(v.shape()));
}

void require_same_shape(const Value& a, const Value& b, const char* op) {
    if (a.shape() != b.shape())
        fail_usage(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Graph::Node& Graph::make(std::vector<int64_t> shape, bool requires_grad) {
    auto n = std::make_unique<Node>();
    n->shape = std::move(shape);
    n->numel = Tensor::numel_of(n->shape);
    n->buf.assign((size_t)n->numel, 0.0);
    n->data = n->buf.data();
    n->requires_grad = requires_grad && grad_enabled_;
    if (n->requires_grad) {
        n->gbuf.assign((size_t)n->numel, 0.0);
        n->grad = n->gbuf.data();
    }
    nodes_.push_back(std::move(n));
    return *nodes_.back();
}

Value Graph::wrap(Node& n) {
    // Ops call wrap() immediately after make(), so the node is the newest.
    if (nodes_.empty() || nodes_.back().get() != &n) fail_usage("graph: internal wrap misuse");
    return Value{this, (int32_t)(nodes_.size() - 1)};
}

void Graph::check_finite(const Node& n, const char* op) {
#ifndef NDEBUG
    for (int64_t i = 0; i < n.numel; ++i)
        if (!std::isfinite(n.data[i])) fail_numeric(std::string(op) + ": non-finite value produced");
#else
    (void)n;
    (void)op;
#endif
}

Value Graph::param(Param& p) {
    auto n = std::make_unique<Node>();
    n->shape = p.value.shape;
    n->numel = p.value.numel();
    n->data = p.value.data.data();
    n->requires_grad = grad_enabled_;
    if (n->requires_grad) n->grad = p.grad.data.data();
    nodes_.push_back(std::move(n));
    return Value{this, (int32_t)(nodes_.size() - 1)};
}

Value Graph::constant(const Tensor& t) {
    Node& n = make(t.shape, false);
    std::memcpy(n.data, t.data.data(), (size_t)n.numel * sizeof(double));
    return wrap(n);
}

Value Graph::constant(std::vector<int64_t> shape, const double* d) {
    Node& n = make(std::move(shape), false);
    std::memcpy(n.data, d, (size_t)n.numel * sizeof(double));
    return wrap(n);
}

Value Graph::input(const Tensor& t, bool requires_grad) {
    Node& n = make(t.shape, requires_grad);
    std::memcpy(n.data, t.data.data(), (size_t)n.numel * sizeof(double));
    return wrap(n);
}

Value Graph::add(Value a, Value b) {
    require_same_shape(a, b, "add");
    Node& out = make(a.shape(), a.requires_grad() || b.requires_grad());
    const double* pa = a.data();
    const double* pb = b.data();
    for (int64_t i = 0; i < out.numel; ++i) out.data[i] = pa[i] + pb[i];
    check_finite(out, "add");
    if (out.requires_grad) {
        Node* na = &node(a.id);
        Node* nb = &node(b.id);
        Node* no = &out;
        out.backward = [na, nb, no] {
            if (na->grad)
                for (int64_t i = 0; i < no->numel; ++i) na->grad[i] += no->grad[i];
            if (nb->grad)
                for (int64_t i = 0; i < no->numel; ++i) nb->grad[i] += no->grad[i];
        };
    }
    return wrap(out);
}

Value Graph::sub(Value a, Value b) {
    require_same_shape(a, b, "sub");
    Node& out = make(a.shape(), a.requires_grad() || b.requires_grad());
    const double* pa = a.data();
    const double* pb = b.data();
    for (int64_t i = 0; i < out.numel; ++i) out.data[i] = pa[i] - pb[i];
    check_finite(out, "sub");
    if (out.requires_grad) {
        Node* na = &node(a.id);
        Node* nb = &node(b.id);
        Node* no = &out;
        out.backward = [na, nb, no] {
            if (na->grad)
                for (int64_t i = 0; i < no->numel; ++i) na->grad[i] += no->grad[i];
            if (nb->grad)
                for (int64_t i = 0; i < no->numel; ++i) nb->grad[i] -= no->grad[i];
        };
    }
    return wrap(out);
}

Value Graph::mul(Value a, Value b) {
    require_same_shape(a, b, "mul");
    Node& out = make(a.shape(), a.requires_grad() || b.requires_grad());
    const double* pa = a.data();
    const double* pb = b.data();
    for (int64_t i = 0; i < out.numel; ++i) out.data[i] = pa[i] * pb[i];
    check_finite(out, "mul");
    if (out.requires_grad) {
        Node* na = &node(a.id);
        Node* nb = &node(b.id);
        Node* no = &out;
        out.backward = [na, nb, no] {
            if (na->grad)
                for (int64_t i = 0; i < no->numel; ++i) na->grad[i] += no->grad[i] * nb->data[i];
            if (nb->grad)
                for (int64_t i = 0; i < no->numel; ++i) nb->grad[i] += no->grad[i] * na->data[i];
        };
    }
    return wrap(out);
}

Value Graph::affine(Value x, double scale, double shift) {
    Node& out = make(x.shape(), x.requires_grad());
    const double* px = x.data();
    for (int64_t i = 0; i < out.numel; ++i) out.data[i] = scale * px[i] + shift;
    check_finite(out, "affine");
    if (out.requires_grad) {
        Node* nx = &node(x.id);
        Node* no = &out;
        out.backward = [nx, no, scale] {
            for (int64_t i = 0; i < no->numel; ++i) nx->grad[i] += scale * no->grad[i];
        };
    }
    return wrap(out);
}

Value Graph::matmul(Value a, Value b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.shape()[1] != b.shape()[0])
        fail_usage("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Node& out = make({m, n}, a.requires_grad() || b.requires_grad());
    kernels::matmul(a.data(), b.data(), out.data, m, k, n);
    check_finite(out, "matmul");
    if (out.requires_grad) {
        Node* na = &node(a.id);
        Node* nb = &node(b.id);
        Node* no = &out;
        out.backward = [na, nb, no, m, k, n] {
            if (na->grad) kernels::matmul_bt_acc(no->grad, nb->data, na->grad, m, k, n);
            if (nb->grad) kernels::matmul_at_acc(na->data, no->grad, nb->grad, m, k, n);
        };
    }
    return wrap(out);
}

Value Graph::add_bias(Value x, Value bias) {
    require_2d(x, "add_bias");
    if (bias.shape().size() != 1 || bias.shape()[0] != x.shape()[1])
        fail_usage("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    int64_t m = x.shape()[0], n = x.shape()[1];
    Node& out = make(x.shape(), x.requires_grad() || bias.requires_grad());
    const double* px = x.data();
    const double* pb = bias.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data[i * n + j] = px[i * n + j] + pb[j];
    check_finite(out, "add_bias");
    if (out.requires_grad) {
        Node* nx = &node(x.id);
        Node* nb = &node(bias.id);
        Node* no = &out;
        out.backward = [nx, nb, no, m, n] {
            if (nx->grad)
                for (int64_t i = 0; i < m * n; ++i) nx->grad[i] += no->grad[i];
            if (nb->grad)
                for (int64_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int64_t i = 0; i < m; ++i) s += no->grad[i * n + j];
                    nb->grad[j] += s;
                }
        };
    }
    return wrap(out);
}

Value Graph::concat_cols(const std::vector<Value>& xs) {
    if (xs.empty()) fail_usage("concat_cols: no inputs");
    int64_t m = xs[0].shape()[0];
    int64_t total = 0;
    bool rg = false;
    for (const auto& v : xs) {
        require_2d(v, "concat_cols");
        if (v.shape()[0] != m) fail_usage("concat_cols: row mismatch " + shape_str(v.shape()));
        total += v.shape()[1];
        rg = rg || v.requires_grad();
    }
    Node& out = make({m, total}, rg);
    int64_t off = 0;
    for (const auto& v : xs) {
        int64_t n = v.shape()[1];
        const double* p = v.data();
        for (int64_t i = 0; i < m; ++i)
            std::memcpy(out.data + i * total + off, p + i * n, (size_t)n * sizeof(double));
        off += n;
    }
    check_finite(out, "concat_cols");
    if (out.requires_grad) {
        std::vector<Node*> ins;
        ins.reserve(xs.size());
        for (const auto& v : xs) ins.push_back(&node(v.id));
        Node* no = &out;
        out.backward = [ins, no, m, total] {
            int64_t off2 = 0;
            for (Node* in : ins) {
                int64_t n = in->shape[1];
                if (in->grad)
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j) in->grad[i * n + j] += no->grad[i * total + off2 + j];
                off2 += n;
            }
        };
    }
    return wrap(out);
}

Value Graph::slice_cols(Value x, int64_t start, int64_t len) {
    require_2d(x, "slice_cols");
    int64_t m = x.shape()[0], n = x.shape()[1];
    if (start < 0 || len < 0 || start + len > n) fail_usage("slice_cols: range out of bounds");
    Node& out = make({m, len}, x.requires_grad());
    const double* px = x.data();
    for (int64_t i = 0; i < m; ++i)
        std::memcpy(out.data + i * len, px + i * n + start, (size_t)len * sizeof(double));
    if (out.requires_grad) {
        Node* nx = &node(x.id);
        Node* no = &out;
        out.backward = [nx, no, m, n, start, len] {
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < len; ++j) nx->grad[i * n + start + j] += no->grad[i * len + j];
        };
    }
    return wrap(out);
}

Value Graph::gather_rows(Value x, std::vector<int32_t> idx) {
    require_2d(x, "gather_rows");
    int64_t m = x.shape()[0], n = x.shape()[1];
    for (int32_t i : idx)
        if (i < 0 || i >= m) fail_usage("gather_rows: index out of range");
    int64_t p = (int64_t)idx.size();
    Node& out = make({p, n}, x.requires_grad());
    kernels::gather_rows(x.data(), idx.data(), out.data, p, n);
    if (out.requires_grad) {
        // Inverse lists: positions referencing each source row, ascending.
        auto inv_off = std::make_shared<std::vector<int64_t>>(m + 1, 0);
        auto inv_pos = std::make_shared<std::vector<int32_t>>(p);
        for (int32_t i : idx) (*inv_off)[i + 1]++;
        for (int64_t i = 0; i < m; ++i) (*inv_off)[i + 1] += (*inv_off)[i];
        std::vector<int64_t> cursor(inv_off->begin(), inv_off->end() - 1);
        for (int64_t pos = 0; pos < p; ++pos) (*inv_pos)[cursor[idx[pos]]++] = (int32_t)pos;
        Node* nx = &node(x.id);
        Node* no = &out;
        out.backward = [nx, no, inv_off, inv_pos, m, n] {
#pragma omp parallel for if (m * n > 8192) schedule(static)
            for (int64_t r = 0; r < m; ++r) {
                double* gr = nx->grad + r * n;
                for (int64_t c = (*inv_off)[r]; c < (*inv_off)[r + 1]; ++c) {
                    const double* gy = no->grad + (int64_t)(*inv_pos)[c] * n;
                    for (int64_t j = 0; j < n; ++j) gr[j] += gy[j];
                }
            }
        };
    }
    return wrap(out);
}

Value Graph::segment_sum(Value x, std::vector<int32_t> segment_of_row, int64_t segments) {
    require_2d(x, "segment_sum");
    int64_t m = x.shape()[0], n = x.shape()[1];
    if ((int64_t)segment_of_row.size() != m) fail_usage("segment_sum: segment id count does not match rows");
    for (int32_t s : segment_of_row)
        if (s < 0 || s >= segments) fail_usage("segment_sum: segment id out of range");
    // CSR members in ascending row order within each segment.
    auto offsets = std::make_shared<std::vector<int64_t>>(segments + 1, 0);
    auto members = std::make_shared<std::vector<int32_t>>(m);
    for (int32_t s : segment_of_row) (*offsets)[s + 1]++;
    for (int64_t s = 0; s < segments; ++s) (*offsets)[s + 1] += (*offsets)[s];
    std::vector<int64_t> cursor(offsets->begin(), offsets->end() - 1);
    for (int64_t r = 0; r < m; ++r) (*members)[cursor[segment_of_row[r]]++] = (int32_t)r;
    Node& out = make({segments, n}, x.requires_grad());
    kernels::segment_sum(x.data(), members->data(), offsets->data(), out.data, segments, n);
    check_finite(out, "segment_sum");
    if (out.requires_grad) {
        auto seg = std::make_shared<std::vector<int32_t>>(std::move(segment_of_row));
        Node* nx = &node(x.id);
        Node* no = &out;
        out.backward = [nx, no, seg, m, n] {
#pragma omp parallel for if (m * n > 8192) schedule(static)
            for (int64_t r = 0; r < m; ++r) {
                const double* gy = no->grad + (int64_t)(*seg)[r] * n;
                double* gx = nx->grad + r * n;
                for (int64_t j = 0; j < n; ++j) gx[j] += gy[j];
            }
        };
    }
    return wrap(out);
}

Value Graph::row_scale(Value x, std::vector<double> weights) {
    require_2d(x, "row_scale");
    int64_t m = x.shape()[0], n = x.shape()[1];
    if ((int64_t)weights.size() != m) fail_usage("row_scale: weight count does not match rows");
    Node& out = make(x.shape(), x.requires_grad());
    const double* px = x.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data[i * n + j] = weights[i] * px[i * n + j];
    check_finite(out, "row_scale");
    if (out.requires_grad) {
        auto w = std::make_shared<std::vector<double>>(std::move(weights));
        Node* nx = &node(x.id);
        Node* no = &out;
        out.backward = [nx, no, w, m, n] {
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) nx->grad[i * n + j] += (*w)[i] * no->grad[i * n + j];
        };
    }
    return wrap(out);
}

Value Graph::relu(Value x) {
    Node& out = make(x.shape(), x.requires_grad());
    kernels::relu(x.data(), out.data, out.numel);
    if (out.requires_grad) {
        Node* nx = &node(x.id);
        Node* no = &out;
        out.backward = [nx, no] {
            for (int64_t i = 0; i < no->numel; ++i)
                if (nx->data[i] > 0.0) nx->grad[i] += no->grad[i];
        };
    }
    return wrap(out);
}

Value Graph::sigmoid(Value x) {
    Node& out = make(x.shape(), x.requires_grad());
    const double* px = x.data();
    for (int64_t i = 0; i < out.numel; ++i) out.data[i] = 1.0 / (1.0 + std::exp(-px[i]));
    if (out.requires_grad) {
        Node* nx = &node(x.id);
        Node* no = &out;
        out.backward = [nx, no] {
            for (int64_t i = 0; i < no->numel; ++i) {
                double y = no->data[i];
                nx->grad[i] += no->grad[i] * y * (1.0 - y);
            }
        };
    }
    return wrap(out);
}

Value Graph::layer_norm(Value x, Value gain, Value bias) {
    require_2d(x, "layer_norm");
    int64_t m = x.shape()[0], n = x.shape()[1];
    if (gain.shape().size() != 1 || gain.shape()[0] != n || bias.shape() != gain.shape())
        fail_usage("layer_norm: gain/bias must be [" + std::to_string(n) + "]");
    constexpr double kEps = 1e-5;
    Node& out = make(x.shape(), x.requires_grad() || gain.requires_grad() || bias.requires_grad());
    auto mean = std::make_shared<std::vector<double>>(m);
    auto istd = std::make_shared<std::vector<double>>(m);
    kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), out.data, mean->data(), istd->data(), m, n, kEps);
    check_finite(out, "layer_norm");
    if (out.requires_grad) {
        Node* nx = &node(x.id);
        Node* ng = &node(gain.id);
        Node* nb = &node(bias.id);
        Node* no = &out;
        out.backward = [nx, ng, nb, no, mean, istd, m, n] {
            if (ng->grad || nb->grad) {
                for (int64_t j = 0; j < n; ++j) {
                    double sg = 0.0, sb = 0.0;
                    for (int64_t i = 0; i < m; ++i) {
                        double xh = (nx->data[i * n + j] - (*mean)[i]) * (*istd)[i];
                        sg += no->grad[i * n + j] * xh;
                        sb += no->grad[i * n + j];
                    }
                    if (ng->grad) ng->grad[j] += sg;
                    if (nb->grad) nb->grad[j] += sb;
                }
            }
            if (nx->grad) {
#pragma omp parallel for if (m * n > 8192) schedule(static)
                for (int64_t i = 0; i < m; ++i) {
                    double mdxh = 0.0, mdxh_xh = 0.0;
                    for (int64_t j = 0; j < n; ++j) {
                        double xh = (nx->data[i * n + j] - (*mean)[i]) * (*istd)[i];
                        double dxh = no->grad[i * n + j] * ng->data[j];
                        mdxh += dxh;
                        mdxh_xh += dxh * xh;
                    }
                    mdxh /= (double)n;
                    mdxh_xh /= (double)n;
                    for (int64_t j = 0; j < n; ++j) {
                        double xh = (nx->data[i * n + j] - (*mean)[i]) * (*istd)[i];
                        double dxh = no->grad[i * n + j] * ng->data[j];
                        nx->grad[i * n + j] += (*istd)[i] * (dxh - mdxh - xh * mdxh_xh);
                    }
                }
            }
        };
    }
    return wrap(out);
}

Value Graph::softmax_rows(Value x) {
    require_2d(x, "softmax");
    int64_t m = x.shape()[0], n = x.shape()[1];
    Node& out = make(x.shape(), x.requires_grad());
    kernels::softmax_rows(x.data(), out.data, m, n);
    if (out.requires_grad) {
        Node* nx = &node(x.id);
        Node* no = &out;
        out.backward = [nx, no, m, n] {
#pragma omp parallel for if (m * n > 8192) schedule(static)
            for (int64_t i = 0; i < m; ++i) {
                const double* y = no->data + i * n;
                const double* dy = no->grad + i * n;
                double t = 0.0;
                for (int64_t j = 0; j < n; ++j) t += y[j] * dy[j];
                double* dx = nx->grad + i * n;
                for (int64_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - t);
            }
        };
    }
    return wrap(out);
}

Value Graph::cosine_pairs(Value a, Value b) {
    require_2d(a, "cosine_pairs");
    require_2d(b, "cosine_pairs");
    if (a.shape()[1] != b.shape()[1]) fail_usage("cosine_pairs: feature width mismatch");
    int64_t ma = a.shape()[0], mb = b.shape()[0], d = a.shape()[1];
    Node& out = make({ma, mb}, a.requires_grad() || b.requires_grad());
    kernels::cosine_pairs(a.data(), b.data(), out.data, ma, mb, d);
    if (out.requires_grad) {
        auto na = std::make_shared<std::vector<double>>(ma);
        auto nb = std::make_shared<std::vector<double>>(mb);
        for (int64_t i = 0; i < ma; ++i) {
            double s = 0.0;
            for (int64_t c = 0; c < d; ++c) s += a.data()[i * d + c] * a.data()[i * d + c];
            (*na)[i] = std::sqrt(s);
        }
        for (int64_t j = 0; j < mb; ++j) {
            double s = 0.0;
            for (int64_t c = 0; c < d; ++c) s += b.data()[j * d + c] * b.data()[j * d + c];
            (*nb)[j] = std::sqrt(s);
        }
        Node* pa = &node(a.id);
        Node* pb = &node(b.id);
        Node* no = &out;
        out.backward = [pa, pb, no, na, nb, ma, mb, d] {
            if (pa->grad) {
#pragma omp parallel for if (ma * mb * d > 8192) schedule(static)
                for (int64_t i = 0; i < ma; ++i) {
                    double nai = (*na)[i];
                    for (int64_t j = 0; j < mb; ++j) {
                        double den = nai * (*nb)[j];
                        if (den <= 1e-30) continue;
                        double ds = no->grad[i * mb + j];
                        if (ds == 0.0) continue;
                        double s = no->data[i * mb + j];
                        for (int64_t c = 0; c < d; ++c)
                            pa->grad[i * d + c] +=
                                ds * (pb->data[j * d + c] / den - s * pa->data[i * d + c] / (nai * nai));
                    }
                }
            }
            if (pb->grad) {
#pragma omp parallel for if (ma * mb * d > 8192) schedule(static)
                for (int64_t j = 0; j < mb; ++j) {
                    double nbj = (*nb)[j];
                    for (int64_t i = 0; i < ma; ++i) {
                        double den = (*na)[i] * nbj;
                        if (den <= 1e-30) continue;
                        double ds = no->grad[i * mb + j];
                        if (ds == 0.0) continue;
                        double s = no->data[i * mb + j];
                        for (int64_t c = 0; c < d; ++c)
                            pb->grad[j * d + c] +=
                                ds * (pa->data[i * d + c] / den - s * pb->data[j * d + c] / (nbj * nbj));
                    }
                }
            }
        };
    }
    return wrap(out);
}

Value Graph::reduce_sum(Value x) {
    Node& out = make({1}, x.requires_grad());
    double s = 0.0;
    const double* px = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) s += px[i];
    out.data[0] = s;
    check_finite(out, "reduce_sum");
    if (out.requires_grad) {
        Node* nx = &node(x.id);
        Node* no = &out;
        out.backward = [nx, no] {
            double g = no->grad[0];
            for (int64_t i = 0; i < nx->numel; ++i) nx->grad[i] += g;
        };
    }
    return wrap(out);
}

Value Graph::reduce_mean(Value x) {
    Node& out = make({1}, x.requires_grad());
    double s = 0.0;
    const double* px = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) s += px[i];
    out.data[0] = s / (double)x.numel();
    check_finite(out, "reduce_mean");
    if (out.requires_grad) {
        Node* nx = &node(x.id);
        Node* no = &out;
        out.backward = [nx, no] {
            double g = no->grad[0] / (double)nx->numel;
            for (int64_t i = 0; i < nx->numel; ++i) nx->grad[i] += g;
        };
    }
    return wrap(out);
}

Value Graph::broadcast_scalar(Value s, int64_t rows) {
    if (s.numel() != 1) fail_usage("broadcast_scalar: input must be scalar");
    Node& out = make({rows, 1}, s.requires_grad());
    double v = s.data()[0];
    for (int64_t i = 0; i < rows; ++i) out.data[i] = v;
    if (out.requires_grad) {
        Node* ns = &node(s.id);
        Node* no = &out;
        out.backward = [ns, no] {
            double g = 0.0;
            for (int64_t i = 0; i < no->numel; ++i) g += no->grad[i];
            ns->grad[0] += g;
        };
    }
    return wrap(out);
}

Value Graph::trilinear_lookup(Value theta, Value displacements, const kernels::TriGeom& geom) {
    require_2d(theta, "trilinear_lookup");
    require_2d(displacements, "trilinear_lookup");
    if (displacements.shape()[1] != 3) fail_usage("trilinear_lookup: displacements must be [p,3]");
    if (theta.shape()[0] != geom.g * geom.g * geom.g || theta.shape()[1] != geom.mat)
        fail_usage("trilinear_lookup: lattice shape " + shape_str(theta.shape()) + " does not match geometry");
    int64_t pairs = displacements.shape()[0];
    Node& out = make({pairs, geom.mat}, theta.requires_grad() || displacements.requires_grad());
    kernels::trilinear_gather(theta.data(), displacements.data(), out.data, pairs, geom);
    check_finite(out, "trilinear_lookup");
    if (out.requires_grad) {
        Node* nt = &node(theta.id);
        Node* nr = &node(displacements.id);
        Node* no = &out;
        kernels::TriGeom gm = geom;
        out.backward = [nt, nr, no, gm, pairs] {
            const double t_per_r = (double)(gm.g - 1) / (2.0 * gm.radius);
            // Scatter into lattice vertices stays serial for determinism.
            for (int64_t p = 0; p < pairs; ++p) {
                int64_t corner[8];
                double weight[8];
                const double* r = nr->data + p * 3;
                if (!kernels::detail::trilinear_corners(r, gm.g, gm.radius, corner, weight)) continue;
                const double* gy = no->grad + p * gm.mat;
                if (nt->grad) {
                    for (int c = 0; c < 8; ++c) {
                        double* gv = nt->grad + corner[c] * gm.mat;
                        double wc = weight[c];
                        for (int64_t e = 0; e < gm.mat; ++e) gv[e] += wc * gy[e];
                    }
                }
                if (nr->grad) {
                    // Recover t from the corner weights of the unit cell:
                    // weight of corner (1,1,1) pattern factors.
                    double t[3];
                    for (int a = 0; a < 3; ++a) {
                        double xi = (r[a] / gm.radius + 1.0) * 0.5 * (double)(gm.g - 1);
                        double nf = std::floor(xi);
                        nf = std::min(std::max(nf, 0.0), (double)(gm.g - 2));
                        t[a] = std::min(std::max(xi - nf, 0.0), 1.0);
                    }
                    for (int a = 0; a < 3; ++a) {
                        double acc = 0.0;
                        for (int c = 0; c < 8; ++c) {
                            int bit[3] = {(c >> 2) & 1, (c >> 1) & 1, c & 1};
                            double dw = 1.0;
                            for (int ax = 0; ax < 3; ++ax) {
                                if (ax == a)
                                    dw *= bit[ax] ? 1.0 : -1.0;
                                else
                                    dw *= bit[ax] ? t[ax] : 1.0 - t[ax];
                            }
                            const double* vtx = nt->data + corner[c] * gm.mat;
                            double inner = 0.0;
                            for (int64_t e = 0; e < gm.mat; ++e) inner += vtx[e] * gy[e];
                            acc += dw * inner;
                        }
                        nr->grad[p * 3 + a] += acc * t_per_r;
                    }
                }
            }
        };
    }
    return wrap(out);
}

Value Graph::pair_matvec(Value w, Value u, int64_t c_in, int64_t c_out) {
    require_2d(w, "pair_matvec");
    require_2d(u, "pair_matvec");
    int64_t pairs = w.shape()[0];
    if (w.shape()[1] != c_in * c_out) fail_usage("pair_matvec: matrix width mismatch " + shape_str(w.shape()));
    if (u.shape()[0] != pairs || u.shape()[1] != c_in)
        fail_usage("pair_matvec: feature shape mismatch " + shape_str(u.shape()));
    Node& out = make({pairs, c_out}, w.requires_grad() || u.requires_grad());
#pragma omp parallel for if (pairs * c_in * c_out > 8192) schedule(static)
    for (int64_t p = 0; p < pairs; ++p) {
        const double* wp = w.data() + p * c_in * c_out;
        const double* up = u.data() + p * c_in;
        double* yp = out.data + p * c_out;
        std::memset(yp, 0, (size_t)c_out * sizeof(double));
        for (int64_t a = 0; a < c_in; ++a) {
            double ua = up[a];
            const double* row = wp + a * c_out;
            for (int64_t c = 0; c < c_out; ++c) yp[c] += ua * row[c];
        }
    }
    check_finite(out, "pair_matvec");
    if (out.requires_grad) {
        Node* nw = &node(w.id);
        Node* nu = &node(u.id);
        Node* no = &out;
        out.backward = [nw, nu, no, pairs, c_in, c_out] {
#pragma omp parallel for if (pairs * c_in * c_out > 8192) schedule(static)
            for (int64_t p = 0; p < pairs; ++p) {
                const double* gy = no->grad + p * c_out;
                const double* wp = nw->data + p * c_in * c_out;
                const double* up = nu->data + p * c_in;
                for (int64_t a = 0; a < c_in; ++a) {
                    if (nu->grad) {
                        double s = 0.0;
                        const double* row = wp + a * c_out;
                        for (int64_t c = 0; c < c_out; ++c) s += row[c] * gy[c];
                        nu->grad[p * c_in + a] += s;
                    }
                    if (nw->grad) {
                        double ua = up[a];
                        double* gw = nw->grad + p * c_in * c_out + a * c_out;
                        for (int64_t c = 0; c < c_out; ++c) gw[c] += ua * gy[c];
                    }
                }
            }
        };
    }
    return wrap(out);
}

Value Graph::rope_rotate(Value x, Value anchors, const RopeConfig& cfg) {
    require_2d(x, "rope_rotate");
    require_2d(anchors, "rope_rotate");
    int64_t m = x.shape()[0];
    if (anchors.shape()[0] != m || anchors.shape()[1] != 3) fail_usage("rope_rotate: anchors must be [m,3]");
    if (x.shape()[1] != cfg.heads * cfg.head_dim) fail_usage("rope_rotate: width does not match heads*head_dim");
    if (cfg.rotary_dim % 6 != 0 || cfg.rotary_dim > cfg.head_dim || cfg.rotary_dim < 0)
        fail_usage("rope_rotate: rotary_dim must be divisible by 6 and <= head_dim");
    const int64_t freqs = cfg.rotary_dim / 6;  // rotation pairs per axis
    auto inv_freq = std::make_shared<std::vector<double>>(freqs);
    for (int64_t f = 0; f < freqs; ++f)
        (*inv_freq)[f] = std::pow(cfg.base, -2.0 * (double)f / ((double)cfg.rotary_dim / 3.0));
    int64_t w = x.shape()[1];
    Node& out = make(x.shape(), x.requires_grad() || anchors.requires_grad());
    const double* px = x.data();
    const double* pa = anchors.data();
    RopeConfig c = cfg;
#pragma omp parallel for if (m * w > 8192) schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        const double* xi = px + i * w;
        double* yi = out.data + i * w;
        std::memcpy(yi, xi, (size_t)w * sizeof(double));
        for (int64_t h = 0; h < c.heads; ++h) {
            for (int axis = 0; axis < 3; ++axis) {
                double phase_base = pa[i * 3 + axis] / c.scale;
                for (int64_t f = 0; f < freqs; ++f) {
                    double th = phase_base * (*inv_freq)[f];
                    double cs = std::cos(th), sn = std::sin(th);
                    int64_t o = h * c.head_dim + axis * (c.rotary_dim / 3) + 2 * f;
                    double x0 = xi[o], x1 = xi[o + 1];
                    yi[o] = x0 * cs - x1 * sn;
                    yi[o + 1] = x0 * sn + x1 * cs;
                }
            }
        }
    }
    check_finite(out, "rope_rotate");
    if (out.requires_grad) {
        Node* nx = &node(x.id);
        Node* na = &node(anchors.id);
        Node* no = &out;
        out.backward = [nx, na, no, c, inv_freq, freqs, m, w] {
#pragma omp parallel for if (m * w > 8192) schedule(static)
            for (int64_t i = 0; i < m; ++i) {
                const double* xi = nx->data + i * w;
                const double* gy = no->grad + i * w;
                // Pass-through dims (beyond rotary_dim in each head).
                if (nx->grad) {
                    double* gx = nx->grad + i * w;
                    for (int64_t h = 0; h < c.heads; ++h)
                        for (int64_t d = c.rotary_dim; d < c.head_dim; ++d)
                            gx[h * c.head_dim + d] += gy[h * c.head_dim + d];
                }
                for (int64_t h = 0; h < c.heads; ++h) {
                    for (int axis = 0; axis < 3; ++axis) {
                        double phase_base = na->data[i * 3 + axis] / c.scale;
                        double danchor = 0.0;
                        for (int64_t f = 0; f < freqs; ++f) {
                            double th = phase_base * (*inv_freq)[f];
                            double cs = std::cos(th), sn = std::sin(th);
                            int64_t o = h * c.head_dim + axis * (c.rotary_dim / 3) + 2 * f;
                            double x0 = xi[o], x1 = xi[o + 1];
                            double g0 = gy[o], g1 = gy[o + 1];
                            if (nx->grad) {
                                nx->grad[i * w + o] += g0 * cs + g1 * sn;
                                nx->grad[i * w + o + 1] += -g0 * sn + g1 * cs;
                            }
                            if (na->grad) {
                                double dth = g0 * (-x0 * sn - x1 * cs) + g1 * (x0 * cs - x1 * sn);
                                danchor += dth * (*inv_freq)[f];
                            }
                        }
                        if (na->grad) na->grad[i * 3 + axis] += danchor / c.scale;
                    }
                }
            }
        };
    }
    return wrap(out);
}

Value Graph::attention_core(Value q, Value k, Value v, int64_t heads) {
    require_2d(q, "attention_core");
    require_2d(k, "attention_core");
    require_2d(v, "attention_core");
    int64_t w = q.shape()[1];
    if (k.shape()[1] != w || v.shape()[1] != w) fail_usage("attention_core: width mismatch");
    if (k.shape()[0] != v.shape()[0]) fail_usage("attention_core: key/value count mismatch");
    if (k.shape()[0] == 0) fail_usage("attention_core: empty key set");
    if (w % heads != 0) fail_usage("attention_core: width not divisible by heads");
    int64_t mq = q.shape()[0], mk = k.shape()[0], dh = w / heads;
    Node& out = make(q.shape(), q.requires_grad() || k.requires_grad() || v.requires_grad());
    auto row_max = std::make_shared<std::vector<double>>(heads * mq);
    auto row_sum = std::make_shared<std::vector<double>>(heads * mq);
    kernels::attention_forward(q.data(), k.data(), v.data(), out.data, row_max->data(), row_sum->data(), mq, mk,
                               heads, dh);
    check_finite(out, "attention_core");
    if (out.requires_grad) {
        Node* nq = &node(q.id);
        Node* nk = &node(k.id);
        Node* nv = &node(v.id);
        Node* no = &out;
        out.backward = [nq, nk, nv, no, row_max, row_sum, mq, mk, heads, dh] {
            std::vector<double> scratch;
            double* dq = nq->grad;
            double* dk = nk->grad;
            double* dv = nv->grad;
            if (!dq || !dk || !dv) {
                scratch.assign((size_t)((dq ? 0 : mq) + (dk ? 0 : mk) + (dv ? 0 : mk)) * heads * dh, 0.0);
                double* s = scratch.data();
                if (!dq) { dq = s; s += mq * heads * dh; }
                if (!dk) { dk = s; s += mk * heads * dh; }
                if (!dv) dv = s;
            }
            kernels::attention_backward(nq->data, nk->data, nv->data, no->grad, row_max->data(), row_sum->data(),
                                        dq, dk, dv, mq, mk, heads, dh);
        };
    }
    return wrap(out);
}

Value Graph::sph_divergence(Value positions, Value velocities, std::vector<double> masses,
                            std::vector<int64_t> offsets, std::vector<int32_t> neighbors, double h) {
    require_2d(positions, "sph_divergence");
    require_2d(velocities, "sph_divergence");
    int64_t n = positions.shape()[0];
    if (velocities.shape()[0] != n || positions.shape()[1] != 3 || velocities.shape()[1] != 3)
        fail_usage("sph_divergence: positions/velocities must be [n,3]");
    if ((int64_t)masses.size() != n || (int64_t)offsets.size() != n + 1)
        fail_usage("sph_divergence: masses/offsets size mismatch");
    if (h <= 0) fail_usage("sph_divergence: support must be positive");
    Node& out = make({n, 1}, positions.requires_grad() || velocities.requires_grad());
    auto ms = std::make_shared<std::vector<double>>(std::move(masses));
    auto off = std::make_shared<std::vector<int64_t>>(std::move(offsets));
    auto nbr = std::make_shared<std::vector<int32_t>>(std::move(neighbors));
    auto rho = std::make_shared<std::vector<double>>(n);
    const double* px = positions.data();
    const double* pv = velocities.data();
    const double w0 = kernels::sph_w(0.0, h);
#pragma omp parallel for if (n > 64) schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        double rho_i = (*ms)[i] * w0;
        double s = 0.0;
        for (int64_t c = (*off)[i]; c < (*off)[i + 1]; ++c) {
            int64_t j = (*nbr)[c];
            double e[3] = {px[i * 3] - px[j * 3], px[i * 3 + 1] - px[j * 3 + 1], px[i * 3 + 2] - px[j * 3 + 2]};
            double r = std::sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2]);
            rho_i += (*ms)[j] * kernels::sph_w(r, h);
            if (r > 0.0) {
                double gw = kernels::sph_dw(r, h) / r;
                double dv[3] = {pv[i * 3] - pv[j * 3], pv[i * 3 + 1] - pv[j * 3 + 1],
                                pv[i * 3 + 2] - pv[j * 3 + 2]};
                s += (*ms)[j] * gw * (dv[0] * e[0] + dv[1] * e[1] + dv[2] * e[2]);
            }
        }
        if (rho_i <= 0.0) fail_numeric("sph_divergence: zero density at particle " + std::to_string(i));
        (*rho)[i] = rho_i;
        out.data[i] = -s / rho_i;
    }
    check_finite(out, "sph_divergence");
    if (out.requires_grad) {
        Node* nx = &node(positions.id);
        Node* nv = &node(velocities.id);
        Node* no = &out;
        out.backward = [nx, nv, no, ms, off, nbr, rho, h, n] {
            // Scatter into neighbor rows stays serial for determinism.
            for (int64_t i = 0; i < n; ++i) {
                double g = no->grad[i];
                if (g == 0.0) continue;
                double rho_i = (*rho)[i];
                double div_i = no->data[i];
                double dS = -g / rho_i;            // d out_i / d S_i
                double dRho = -g * div_i / rho_i;  // d out_i / d rho_i  ( = g*S/rho^2 )
                for (int64_t c = (*off)[i]; c < (*off)[i + 1]; ++c) {
                    int64_t j = (*nbr)[c];
                    double e[3] = {nx->data[i * 3] - nx->data[j * 3], nx->data[i * 3 + 1] - nx->data[j * 3 + 1],
                                   nx->data[i * 3 + 2] - nx->data[j * 3 + 2]};
                    double r2 = e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
                    double r = std::sqrt(r2);
                    if (r <= 0.0) continue;
                    double m_j = (*ms)[j];
                    double dwr = kernels::sph_dw(r, h);
                    double gw = dwr / r;
                    double dvv[3] = {nv->data[i * 3] - nv->data[j * 3], nv->data[i * 3 + 1] - nv->data[j * 3 + 1],
                                     nv->data[i * 3 + 2] - nv->data[j * 3 + 2]};
                    if (nv->grad) {
                        for (int a = 0; a < 3; ++a) {
                            double t = dS * m_j * gw * e[a];
                            nv->grad[i * 3 + a] += t;
                            nv->grad[j * 3 + a] -= t;
                        }
                    }
                    if (nx->grad) {
                        // d/dx_i of (dv . grad W) with grad W = (W'(r)/r) e:
                        // H = (W''/r^2 - W'/r^3) e e^T + (W'/r) I applied to dv.
                        double d2 = kernels::sph_d2w(r, h);
                        double k1 = d2 / r2 - dwr / (r2 * r);
                        double edotdv = e[0] * dvv[0] + e[1] * dvv[1] + e[2] * dvv[2];
                        for (int a = 0; a < 3; ++a) {
                            double hdv = k1 * e[a] * edotdv + gw * dvv[a];
                            double t = dS * m_j * hdv + dRho * m_j * gw * e[a];
                            nx->grad[i * 3 + a] += t;
                            nx->grad[j * 3 + a] -= t;
                        }
                    }
                }
            }
        };
    }
    return wrap(out);
}

void Graph::backward(Value loss) {
    if (!loss.valid() || loss.g != this) fail_usage("backward: loss does not belong to this graph");
    if (loss.numel() != 1) fail_usage("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!grad_enabled_) fail_usage("backward: graph was created with gradients disabled");
    // Interior node grads are per-pass scratch; only leaves accumulate across
    // repeated backward calls.
    for (auto& n : nodes_)
        if (n->requires_grad && n->backward) std::fill(n->gbuf.begin(), n->gbuf.end(), 0.0);
    Node& ln = node(loss.id);
    if (ln.grad) ln.grad[0] += 1.0;
    for (size_t i = nodes_.size(); i-- > 0;) {
        Node& n = *nodes_[i];
        if (n.requires_grad && n.backward) n.backward();
    }
}

}  // namespace pf
