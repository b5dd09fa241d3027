#pragma once

// Reverse-mode automatic differentiation over cycledm::Tensor.
//
// Most backward rules are themselves written with differentiable ops, so
// grad(..., create_graph = true) yields gradients that can be differentiated
// again (needed for the discriminator gradient penalty). A few fused kernels
// (group_norm, silu, softmax_cross_entropy) only support first-order
// gradients and refuse to take part in a create_graph pass.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "cycledm/tensor.hpp"

namespace cycledm::ag {

class Var;

using BackwardFn = std::function<std::vector<Var>(const std::vector<Var>& inputs, const Var& out,
                                                  const Var& grad, const std::vector<bool>& needs)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  BackwardFn backward;
  bool higher_order = true;
  const char* op = "leaf";
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  // Only valid on leaves; used by optimizers to update parameters in place.
  Tensor& mutable_value();
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int i) const { return node_->value.dim(i); }
  int64_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  float item() const { return node_->value.item(); }
  const char* op() const { return node_->op; }

  Var detach() const { return Var(node_->value); }

  Node* node() const { return node_.get(); }

 private:
  friend Var make_result(Tensor, std::vector<Var>, BackwardFn, const char*, bool);
  friend std::vector<Var> grad(const Var&, std::span<const Var>, bool);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Records an op result. Inputs are kept only when grad mode is on and at
// least one input requires grad.
Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op,
                bool higher_order = true);

// Gradients of scalar `output` w.r.t. each of `inputs`. Inputs the output does
// not depend on get zero gradients. With create_graph the returned Vars are
// differentiable functions of the graph.
std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph = false);

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float k);
Var add_scalar(const Var& a, float k);
Var neg(const Var& a);

Var square(const Var& a);
Var sqrt(const Var& a);
Var abs(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, float slope);
Var clamp_min(const Var& a, float lo);
// Fused x * sigmoid(x); first-order only.
Var silu(const Var& a);

// Shape manipulation. expand broadcasts size-1 dims of equal-rank input;
// reduce_to sums the other way.
Var reshape(const Var& a, Shape shape);
Var expand(const Var& a, Shape shape);
Var reduce_to(const Var& a, Shape shape);
// x + b with b of shape [C] added along the last dimension of x.
Var add_channel_bias(const Var& x, const Var& b);
Var sum(const Var& a);
Var mean(const Var& a);

// C = op(A) * op(B) for rank-2 operands.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);

// NHWC patch extraction: [N,H,W,C] -> [N*OH*OW, k*k*C], column order (ky, kx, c).
Var im2col(const Var& x, int kernel, int stride, int pad);
Var col2im(const Var& cols, const Shape& image_shape, int kernel, int stride, int pad);

Var upsample_nearest2x(const Var& x);
Var sum_pool2x(const Var& x);

Var concat_last(const Var& a, const Var& b);
Var slice_last(const Var& a, int64_t begin, int64_t end);
Var pad_last(const Var& a, int64_t total, int64_t begin);

// Embedding lookup on a [K, d] table and its adjoint.
Var gather_rows(const Var& table, std::vector<int> rows);
Var scatter_add_rows(const Var& src, std::vector<int> rows, int64_t num_rows);

// NHWC group normalization with per-channel affine; first-order only.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f);

// Mean softmax cross-entropy over rows of [N, K] logits; first-order only.
Var softmax_cross_entropy(const Var& logits, std::vector<int> labels);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, float k) { return scale(a, k); }
inline Var operator*(float k, const Var& a) { return scale(a, k); }
inline Var operator+(const Var& a, float k) { return add_scalar(a, k); }
inline Var operator-(const Var& a, float k) { return add_scalar(a, -k); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace cycledm::ag
