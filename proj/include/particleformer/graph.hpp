#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "particleformer/kernels.hpp"
#include "particleformer/param_store.hpp"
#include "particleformer/tensor.hpp"

namespace pf {

class Graph;

struct Value {
    Graph* g = nullptr;
    int32_t id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const std::vector<int64_t>& shape() const;
    int64_t numel() const;
    int64_t rows() const { return shape()[0]; }
    int64_t cols() const { return shape().size() < 2 ? 1 : shape()[1]; }
    const double* data() const;
    double* grad() const;  // nullptr when the node does not require gradients
    bool requires_grad() const;
    Tensor to_tensor() const;
};

struct RopeConfig {
    int64_t heads = 1;
    int64_t head_dim = 0;
    int64_t rotary_dim = 0;  // per head; divisible by 6 and <= head_dim
    double base = 10000.0;
    double scale = 1.0;  // length that maps to a phase of 1 radian at frequency index 0
};

// Tape of eagerly evaluated array operations with reverse-mode gradients.
// Discrete structure (gather indices, segment ids, neighbor lists) is fixed
// at node creation and carries no gradient. A graph is confined to one
// worker; parallelism lives inside the kernels.
class Graph {
  public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    // ---- leaves -----------------------------------------------------------
    Value param(Param& p);                            // aliases external value/grad storage
    Value constant(const Tensor& t);                  // copied, never differentiated
    Value constant(std::vector<int64_t> shape, const double* d);
    Value input(const Tensor& t, bool requires_grad);

    // ---- op vocabulary ----------------------------------------------------
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value affine(Value x, double scale, double shift);  // scale*x + shift
    Value matmul(Value a, Value b);
    Value add_bias(Value x, Value bias);
    Value concat_cols(const std::vector<Value>& xs);
    Value slice_cols(Value x, int64_t start, int64_t len);
    Value gather_rows(Value x, std::vector<int32_t> idx);
    Value segment_sum(Value x, std::vector<int32_t> segment_of_row, int64_t segments);
    Value row_scale(Value x, std::vector<double> weights);
    Value relu(Value x);
    Value sigmoid(Value x);
    Value layer_norm(Value x, Value gain, Value bias);  // last axis, eps = 1e-5
    Value softmax_rows(Value x);
    Value cosine_pairs(Value a, Value b);
    Value reduce_sum(Value x);
    Value reduce_mean(Value x);
    Value broadcast_scalar(Value s, int64_t rows);  // [1] -> [rows,1]
    Value trilinear_lookup(Value theta, Value displacements, const kernels::TriGeom& geom);
    Value pair_matvec(Value w, Value u, int64_t c_in, int64_t c_out);
    Value rope_rotate(Value x, Value anchors, const RopeConfig& cfg);
    Value attention_core(Value q, Value k, Value v, int64_t heads);
    Value sph_divergence(Value positions, Value velocities, std::vector<double> masses,
                         std::vector<int64_t> offsets, std::vector<int32_t> neighbors, double h);

    Value mse(Value a, Value b) { return reduce_mean(mul(sub(a, b), sub(a, b))); }

    // Accumulates reverse-mode gradients of a scalar loss into every
    // requires_grad node (and through param leaves into the ParamStore).
    // Repeated calls accumulate.
    void backward(Value loss);

    size_t node_count() const { return nodes_.size(); }
    bool grad_enabled() const { return grad_enabled_; }

    struct Node {
        std::vector<int64_t> shape;
        std::vector<double> buf;
        double* data = nullptr;
        std::vector<double> gbuf;
        double* grad = nullptr;
        bool requires_grad = false;
        std::function<void()> backward;
        int64_t numel = 0;
    };

    Node& node(int32_t id) { return *nodes_[id]; }
    const Node& node(int32_t id) const { return *nodes_[id]; }

  private:
    Node& make(std::vector<int64_t> shape, bool requires_grad);
    Value wrap(Node& n);
    void check_finite(const Node& n, const char* op);

    std::vector<std::unique_ptr<Node>> nodes_;
    bool grad_enabled_ = true;
};

inline const std::vector<int64_t>& Value::shape() const { return g->node(id).shape; }
inline int64_t Value::numel() const { return g->node(id).numel; }
inline const double* Value::data() const { return g->node(id).data; }
inline double* Value::grad() const { return g->node(id).grad; }
inline bool Value::requires_grad() const { return g->node(id).requires_grad; }
inline Tensor Value::to_tensor() const {
    const auto& n = g->node(id);
    return Tensor(n.shape, std::vector<double>(n.data, n.data + n.numel));
}

}  // namespace pf
