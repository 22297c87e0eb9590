#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace stlpd {

struct NumericFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

struct TensorNode {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  int64_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), int64_t(1), std::multiplies<int64_t>());
  }
  float* grad_buf() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad.data();
  }
};

// Rank-N real array participating in a dynamic reverse-mode graph. Value
// semantics over a shared node; the graph is rebuilt on every forward pass.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    for (int e : n->shape)
      if (e <= 0) throw ShapeError("tensor extent must be positive, got " + shape_str(n->shape));
    n->data.assign(size_t(n->numel()), 0.0f);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (data.size() != t.data().size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(t.shape()));
    t.node_->data = std::move(data);
    return t;
  }

  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[size_t(i)]; }
  int rank() const { return int(node_->shape.size()); }
  int64_t numel() const { return node_->numel(); }
  std::vector<float>& data() { return node_->data; }
  const std::vector<float>& data() const { return node_->data; }
  std::vector<float>& grad() { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  std::shared_ptr<TensorNode> node() const { return node_; }
  bool defined() const { return node_ != nullptr; }

  float& at(int n, int c, int h, int w) {
    const auto& s = node_->shape;
    return node_->data[size_t(((n * s[1] + c) * s[2] + h) * s[3] + w)];
  }
  float at(int n, int c, int h, int w) const {
    const auto& s = node_->shape;
    return node_->data[size_t(((n * s[1] + c) * s[2] + h) * s[3] + w)];
  }

 private:
  std::shared_ptr<TensorNode> node_;
};

inline void check_finite(const Tensor& t, const char* op) {
  for (float v : t.data())
    if (!std::isfinite(v)) throw NumericFault(std::string("numeric fault (NaN/Inf) in ") + op);
}

namespace detail {

inline void topo_visit(TensorNode* n, std::unordered_set<TensorNode*>& seen,
                       std::vector<TensorNode*>& order) {
  if (!n || seen.count(n)) return;
  seen.insert(n);
  for (auto& p : n->parents) topo_visit(p.get(), seen, order);
  order.push_back(n);
}

}  // namespace detail

// Reverse-mode sweep from multiple roots whose grad buffers are already
// seeded by the caller (the loss writes gradients straight into the head maps).
inline void backward_multi(const std::vector<Tensor>& roots) {
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> order;
  for (const auto& r : roots) detail::topo_visit(r.node().get(), seen, order);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// Scalar-style backward: seeds the root gradient with ones.
inline void backward(Tensor& root) {
  float* g = root.node()->grad_buf();
  for (int64_t i = 0; i < root.numel(); ++i) g[size_t(i)] = 1.0f;
  backward_multi({root});
}

}  // namespace stlpd
