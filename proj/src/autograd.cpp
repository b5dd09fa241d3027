#include "cycledm/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>

namespace cycledm::ag {
namespace {

thread_local bool g_grad_enabled = true;

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : prev_(g_grad_enabled) { g_grad_enabled = enabled; }
  ~GradModeGuard() { g_grad_enabled = prev_; }

 private:
  bool prev_;
};

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

template <class F>
Tensor map_values(const Tensor& a, F f) {
  Tensor out(a.shape());
  const float* src = a.ptr();
  float* dst = out.ptr();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Tensor zip_values(const Tensor& a, const Tensor& b, F f, const char* what) {
  check_same_shape(a, b, what);
  Tensor out(a.shape());
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* dst = out.ptr();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) dst[i] = f(pa[i], pb[i]);
  return out;
}

Var constant(Tensor t) { return Var(std::move(t)); }

Var reciprocal(const Var& a) {
  return make_result(map_values(a.value(), [](float x) { return 1.0f / x; }), {a},
                     [](const std::vector<Var>&, const Var& out, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{neg(mul(g, square(out)))};
                     },
                     "reciprocal");
}

Var mask_mul(const Var& g, Tensor mask) { return mul(g, constant(std::move(mask))); }

void check_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_str(t.shape()));
  }
}

// Row-major strides of `shape`, with zero stride on dims that broadcast
// against `target`.
std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& target) {
  std::vector<int64_t> strides(shape.size(), 0);
  int64_t s = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    strides[static_cast<size_t>(i)] = shape[static_cast<size_t>(i)] == target[static_cast<size_t>(i)] ? s : 0;
    s *= shape[static_cast<size_t>(i)];
  }
  return strides;
}

void check_broadcastable(const Shape& small, const Shape& big, const char* what) {
  bool ok = small.size() == big.size();
  for (size_t i = 0; ok && i < small.size(); ++i) ok = small[i] == big[i] || small[i] == 1;
  if (!ok) {
    throw std::invalid_argument(std::string(what) + ": cannot broadcast " + shape_str(small) + " to " +
                                shape_str(big));
  }
}

// Visits every index of `big` together with the matching broadcast offset
// into `small`.
template <class F>
void for_each_broadcast(const Shape& small, const Shape& big, F f) {
  const auto strides = broadcast_strides(small, big);
  const size_t rank = big.size();
  const int64_t total = shape_numel(big);
  if (total == 0) return;
  if (rank == 0) {
    f(int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> idx(rank, 0);
  int64_t src = 0;
  // Innermost dim handled as a tight loop.
  const int64_t inner = big[rank - 1];
  const int64_t inner_stride = strides[rank - 1];
  for (int64_t base = 0; base < total; base += inner) {
    for (int64_t j = 0; j < inner; ++j) f(base + j, src + j * inner_stride);
    for (int d = static_cast<int>(rank) - 2; d >= 0; --d) {
      auto ud = static_cast<size_t>(d);
      ++idx[ud];
      src += strides[ud];
      if (idx[ud] < big[ud]) break;
      src -= strides[ud] * idx[ud];
      idx[ud] = 0;
    }
  }
}

struct ConvGeom {
  int64_t n, h, w, c, oh, ow;
};

ConvGeom conv_geom(const Shape& image, int kernel, int stride, int pad) {
  if (image.size() != 4) throw std::invalid_argument("im2col: expected NHWC image, got " + shape_str(image));
  if (kernel < 1 || stride < 1 || pad < 0) throw std::invalid_argument("im2col: bad kernel/stride/pad");
  ConvGeom g{image[0], image[1], image[2], image[3], 0, 0};
  g.oh = (g.h + 2 * pad - kernel) / stride + 1;
  g.ow = (g.w + 2 * pad - kernel) / stride + 1;
  if (g.oh <= 0 || g.ow <= 0) throw std::invalid_argument("im2col: kernel larger than padded image");
  return g;
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor& Var::mutable_value() {
  if (!node_->inputs.empty()) throw std::logic_error("mutable_value() on a non-leaf Var");
  return node_->value;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op, bool higher_order) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (g_grad_enabled &&
      std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); })) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    node->higher_order = higher_order;
  }
  return Var(std::move(node));
}

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph) {
  if (!output.defined() || output.numel() != 1) throw std::invalid_argument("grad: output must be a scalar");
  std::vector<Var> result(inputs.size());
  auto zeros_for = [&](size_t i) { return Var(Tensor(inputs[i].shape(), 0.0f)); };

  std::unordered_set<Node*> targets;
  for (const auto& v : inputs) targets.insert(v.node());

  // Post-order over the recorded graph: inputs before the nodes using them.
  std::vector<std::shared_ptr<Node>> order;
  if (output.requires_grad()) {
    std::unordered_set<Node*> visited;
    std::vector<std::pair<std::shared_ptr<Node>, size_t>> stack{{output.node_, 0}};
    visited.insert(output.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const auto& child = node->inputs[next++].node_;
        if (child->requires_grad && visited.insert(child.get()).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Node*, bool> relevant;
  for (const auto& n : order) {
    bool r = targets.count(n.get()) > 0;
    for (const auto& in : n->inputs) r = r || (in.requires_grad() && relevant[in.node()]);
    relevant[n.get()] = r;
  }

  std::unordered_map<Node*, Var> grads;
  grads[output.node()] = Var(Tensor(output.shape(), 1.0f));
  GradModeGuard mode(create_graph);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& node = *it;
    auto g = grads.find(node.get());
    if (g == grads.end() || !node->backward || !relevant[node.get()]) continue;
    std::vector<bool> needs(node->inputs.size());
    bool any = false;
    for (size_t i = 0; i < needs.size(); ++i) {
      needs[i] = node->inputs[i].requires_grad() && relevant[node->inputs[i].node()];
      any = any || needs[i];
    }
    if (!any) continue;
    if (create_graph && !node->higher_order) {
      throw std::logic_error(std::string("grad: op '") + node->op + "' does not support create_graph");
    }
    const Var gout = g->second;
    auto in_grads = node->backward(node->inputs, Var(node), gout, needs);
    for (size_t i = 0; i < needs.size(); ++i) {
      if (!needs[i] || !in_grads[i].defined()) continue;
      Node* key = node->inputs[i].node();
      auto [slot, inserted] = grads.try_emplace(key, in_grads[i]);
      if (!inserted) slot->second = add(slot->second, in_grads[i]);
    }
    if (!targets.count(node.get())) grads.erase(node.get());
  }

  for (size_t i = 0; i < inputs.size(); ++i) {
    auto g = grads.find(inputs[i].node());
    result[i] = g == grads.end() ? zeros_for(i) : g->second;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  return make_result(zip_values(a.value(), b.value(), std::plus<float>(), "add"), {a, b},
                     [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{g, g};
                     },
                     "add");
}

Var sub(const Var& a, const Var& b) {
  return make_result(zip_values(a.value(), b.value(), std::minus<float>(), "sub"), {a, b},
                     [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>& needs) {
                       return std::vector<Var>{g, needs[1] ? neg(g) : Var()};
                     },
                     "sub");
}

Var mul(const Var& a, const Var& b) {
  return make_result(zip_values(a.value(), b.value(), std::multiplies<float>(), "mul"), {a, b},
                     [](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>& needs) {
                       return std::vector<Var>{needs[0] ? mul(g, in[1]) : Var(), needs[1] ? mul(g, in[0]) : Var()};
                     },
                     "mul");
}

Var scale(const Var& a, float k) {
  return make_result(map_values(a.value(), [k](float x) { return x * k; }), {a},
                     [k](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{scale(g, k)};
                     },
                     "scale");
}

Var add_scalar(const Var& a, float k) {
  return make_result(map_values(a.value(), [k](float x) { return x + k; }), {a},
                     [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{g};
                     },
                     "add_scalar");
}

Var neg(const Var& a) { return scale(a, -1.0f); }

Var square(const Var& a) {
  return make_result(map_values(a.value(), [](float x) { return x * x; }), {a},
                     [](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{scale(mul(g, in[0]), 2.0f)};
                     },
                     "square");
}

Var sqrt(const Var& a) {
  return make_result(map_values(a.value(), [](float x) { return std::sqrt(x); }), {a},
                     [](const std::vector<Var>&, const Var& out, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{scale(mul(g, reciprocal(out)), 0.5f)};
                     },
                     "sqrt");
}

Var abs(const Var& a) {
  return make_result(map_values(a.value(), [](float x) { return std::fabs(x); }), {a},
                     [](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>&) {
                       auto sign = map_values(in[0].value(), [](float x) {
                         return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f);
                       });
                       return std::vector<Var>{mask_mul(g, std::move(sign))};
                     },
                     "abs");
}

Var log(const Var& a) {
  return make_result(map_values(a.value(), [](float x) { return std::log(x); }), {a},
                     [](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{mul(g, reciprocal(in[0]))};
                     },
                     "log");
}

Var exp(const Var& a) {
  return make_result(map_values(a.value(), [](float x) { return std::exp(x); }), {a},
                     [](const std::vector<Var>&, const Var& out, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{mul(g, out)};
                     },
                     "exp");
}

Var sigmoid(const Var& a) {
  return make_result(map_values(a.value(),
                                [](float x) {
                                  return x >= 0.0f ? 1.0f / (1.0f + std::exp(-x))
                                                   : std::exp(x) / (1.0f + std::exp(x));
                                }),
                     {a},
                     [](const std::vector<Var>&, const Var& out, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{mul(g, mul(out, add_scalar(neg(out), 1.0f)))};
                     },
                     "sigmoid");
}

Var relu(const Var& a) { return leaky_relu(a, 0.0f); }

Var leaky_relu(const Var& a, float slope) {
  return make_result(map_values(a.value(), [slope](float x) { return x > 0.0f ? x : slope * x; }), {a},
                     [slope](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{
                           mask_mul(g, map_values(in[0].value(), [slope](float x) { return x > 0.0f ? 1.0f : slope; }))};
                     },
                     "leaky_relu");
}

Var clamp_min(const Var& a, float lo) {
  return make_result(map_values(a.value(), [lo](float x) { return std::max(x, lo); }), {a},
                     [lo](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{
                           mask_mul(g, map_values(in[0].value(), [lo](float x) { return x >= lo ? 1.0f : 0.0f; }))};
                     },
                     "clamp_min");
}

Var silu(const Var& a) {
  // Results are evaluated into Eigen-owned (aligned) arrays: writing through
  // a Map would let the heap address decide between the scalar and the
  // vectorized exp, and with it the rounding.
  using Arr = Eigen::Map<const Eigen::ArrayXf>;
  const Arr x(a.value().ptr(), a.numel());
  const Eigen::ArrayXf y = x / (1.0f + (-x).exp());
  Tensor out(a.shape(), std::vector<float>(y.data(), y.data() + y.size()));
  return make_result(std::move(out), {a},
                     [](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>&) {
                       const int64_t n = in[0].numel();
                       const Arr xv(in[0].value().ptr(), n), gv(g.value().ptr(), n);
                       const Eigen::ArrayXf s = 1.0f / (1.0f + (-xv).exp());
                       const Eigen::ArrayXf d = gv * s * (1.0f + xv * (1.0f - s));
                       return std::vector<Var>{constant(Tensor(in[0].shape(), std::vector<float>(d.data(), d.data() + n)))};
                     },
                     "silu", /*higher_order=*/false);
}

// ---------------------------------------------------------------------------
// Shapes and reductions

Var reshape(const Var& a, Shape shape) {
  Tensor v = a.value().reshaped(std::move(shape));
  return make_result(std::move(v), {a},
                     [](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{reshape(g, in[0].shape())};
                     },
                     "reshape");
}

Var expand(const Var& a, Shape shape) {
  check_broadcastable(a.shape(), shape, "expand");
  Tensor out(shape);
  const float* src = a.value().ptr();
  float* dst = out.ptr();
  for_each_broadcast(a.shape(), shape, [&](int64_t i, int64_t j) { dst[i] = src[j]; });
  return make_result(std::move(out), {a},
                     [](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{reduce_to(g, in[0].shape())};
                     },
                     "expand");
}

Var reduce_to(const Var& a, Shape shape) {
  check_broadcastable(shape, a.shape(), "reduce_to");
  std::vector<double> acc(static_cast<size_t>(shape_numel(shape)), 0.0);
  const float* src = a.value().ptr();
  for_each_broadcast(shape, a.shape(), [&](int64_t i, int64_t j) { acc[static_cast<size_t>(j)] += src[i]; });
  Tensor out(shape);
  for (size_t i = 0; i < acc.size(); ++i) out[static_cast<int64_t>(i)] = static_cast<float>(acc[i]);
  return make_result(std::move(out), {a},
                     [](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{expand(g, in[0].shape())};
                     },
                     "reduce_to");
}

Var add_channel_bias(const Var& x, const Var& b) {
  if (b.value().rank() != 1 || x.value().rank() < 1 || x.shape().back() != b.dim(0)) {
    throw std::invalid_argument("add_channel_bias: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  }
  const int64_t c = b.dim(0), rows = x.numel() / c;
  Tensor out(x.shape());
  MutMap(out.ptr(), rows, c) = ConstMap(x.value().ptr(), rows, c).rowwise() + ConstMap(b.value().ptr(), 1, c).row(0);
  return make_result(std::move(out), {x, b},
                     [rows, c](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>& needs) {
                       Var db;
                       if (needs[1]) db = reshape(reduce_to(reshape(g, {rows, c}), {1, c}), {c});
                       return std::vector<Var>{g, db};
                     },
                     "add_channel_bias");
}

Var sum(const Var& a) {
  double acc = 0.0;
  for (float x : a.value().data()) acc += x;
  return make_result(Tensor::scalar(static_cast<float>(acc)), {a},
                     [](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>&) {
                       Shape ones(in[0].shape().size(), 1);
                       return std::vector<Var>{expand(reshape(g, ones), in[0].shape())};
                     },
                     "sum");
}

Var mean(const Var& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  check_rank(a.value(), 2, "matmul lhs");
  check_rank(b.value(), 2, "matmul rhs");
  const int64_t ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const int64_t m = ta ? ac : ar, k = ta ? ar : ac;
  const int64_t k2 = tb ? bc : br, n = tb ? br : bc;
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dims differ " + shape_str(a.shape()) + (ta ? "^T" : "") + " x " +
                                shape_str(b.shape()) + (tb ? "^T" : ""));
  }
  Tensor out(Shape{m, n});
  ConstMap A(a.value().ptr(), ar, ac);
  ConstMap B(b.value().ptr(), br, bc);
  MutMap C(out.ptr(), m, n);
  if (!ta && !tb) C.noalias() = A * B;
  else if (!ta && tb) C.noalias() = A * B.transpose();
  else if (ta && !tb) C.noalias() = A.transpose() * B;
  else C.noalias() = A.transpose() * B.transpose();
  return make_result(std::move(out), {a, b},
                     [ta, tb](const std::vector<Var>& in, const Var&, const Var& g, const std::vector<bool>& needs) {
                       const Var& A = in[0];
                       const Var& B = in[1];
                       Var da, db;
                       if (!ta && !tb) {
                         if (needs[0]) da = matmul(g, B, false, true);
                         if (needs[1]) db = matmul(A, g, true, false);
                       } else if (!ta && tb) {
                         if (needs[0]) da = matmul(g, B, false, false);
                         if (needs[1]) db = matmul(g, A, true, false);
                       } else if (ta && !tb) {
                         if (needs[0]) da = matmul(B, g, false, true);
                         if (needs[1]) db = matmul(A, g, false, false);
                       } else {
                         if (needs[0]) da = matmul(B, g, true, true);
                         if (needs[1]) db = matmul(g, A, true, true);
                       }
                       return std::vector<Var>{da, db};
                     },
                     "matmul");
}

Var im2col(const Var& x, int kernel, int stride, int pad) {
  const auto g = conv_geom(x.shape(), kernel, stride, pad);
  const int64_t kc = kernel * kernel * g.c;
  Tensor out(Shape{g.n * g.oh * g.ow, kc}, 0.0f);
  const float* src = x.value().ptr();
  float* dst = out.ptr();
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t oy = 0; oy < g.oh; ++oy) {
      for (int64_t ox = 0; ox < g.ow; ++ox) {
        float* row = dst + ((n * g.oh + oy) * g.ow + ox) * kc;
        const int64_t ix0 = ox * stride - pad;
        const int kx_lo = static_cast<int>(std::max<int64_t>(0, -ix0));
        const int kx_hi = static_cast<int>(std::min<int64_t>(kernel, g.w - ix0));
        if (kx_lo >= kx_hi) continue;
        for (int ky = 0; ky < kernel; ++ky) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          // Taps kx_lo..kx_hi-1 of one kernel row are adjacent pixels in NHWC.
          std::copy_n(src + ((n * g.h + iy) * g.w + ix0 + kx_lo) * g.c, (kx_hi - kx_lo) * g.c,
                      row + (ky * kernel + kx_lo) * g.c);
        }
      }
    }
  }
  return make_result(std::move(out), {x},
                     [kernel, stride, pad](const std::vector<Var>& in, const Var&, const Var& gr,
                                           const std::vector<bool>&) {
                       return std::vector<Var>{col2im(gr, in[0].shape(), kernel, stride, pad)};
                     },
                     "im2col");
}

Var col2im(const Var& cols, const Shape& image_shape, int kernel, int stride, int pad) {
  const auto g = conv_geom(image_shape, kernel, stride, pad);
  const int64_t kc = kernel * kernel * g.c;
  if (cols.value().rank() != 2 || cols.dim(0) != g.n * g.oh * g.ow || cols.dim(1) != kc) {
    throw std::invalid_argument("col2im: columns " + shape_str(cols.shape()) + " do not match image " +
                                shape_str(image_shape));
  }
  Tensor out(image_shape, 0.0f);
  const float* src = cols.value().ptr();
  float* dst = out.ptr();
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t oy = 0; oy < g.oh; ++oy) {
      for (int64_t ox = 0; ox < g.ow; ++ox) {
        const float* row = src + ((n * g.oh + oy) * g.ow + ox) * kc;
        const int64_t ix0 = ox * stride - pad;
        const int kx_lo = static_cast<int>(std::max<int64_t>(0, -ix0));
        const int kx_hi = static_cast<int>(std::min<int64_t>(kernel, g.w - ix0));
        if (kx_lo >= kx_hi) continue;
        const int64_t span = (kx_hi - kx_lo) * g.c;
        for (int ky = 0; ky < kernel; ++ky) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          float* px = dst + ((n * g.h + iy) * g.w + ix0 + kx_lo) * g.c;
          const float* pr = row + (ky * kernel + kx_lo) * g.c;
          for (int64_t j = 0; j < span; ++j) px[j] += pr[j];
        }
      }
    }
  }
  return make_result(std::move(out), {cols},
                     [kernel, stride, pad](const std::vector<Var>&, const Var&, const Var& gr,
                                           const std::vector<bool>&) {
                       return std::vector<Var>{im2col(gr, kernel, stride, pad)};
                     },
                     "col2im");
}

Var upsample_nearest2x(const Var& x) {
  check_rank(x.value(), 4, "upsample_nearest2x");
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor out(Shape{n, 2 * h, 2 * w, c});
  const float* src = x.value().ptr();
  float* dst = out.ptr();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t y = 0; y < 2 * h; ++y)
      for (int64_t xx = 0; xx < 2 * w; ++xx)
        std::copy_n(src + ((b * h + y / 2) * w + xx / 2) * c, c, dst + ((b * 2 * h + y) * 2 * w + xx) * c);
  return make_result(std::move(out), {x},
                     [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{sum_pool2x(g)};
                     },
                     "upsample_nearest2x");
}

Var sum_pool2x(const Var& x) {
  check_rank(x.value(), 4, "sum_pool2x");
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2 || w % 2) throw std::invalid_argument("sum_pool2x: odd spatial size " + shape_str(x.shape()));
  Tensor out(Shape{n, h / 2, w / 2, c}, 0.0f);
  const float* src = x.value().ptr();
  float* dst = out.ptr();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xx = 0; xx < w; ++xx) {
        const float* ps = src + ((b * h + y) * w + xx) * c;
        float* pd = dst + ((b * (h / 2) + y / 2) * (w / 2) + xx / 2) * c;
        for (int64_t k = 0; k < c; ++k) pd[k] += ps[k];
      }
  return make_result(std::move(out), {x},
                     [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{upsample_nearest2x(g)};
                     },
                     "sum_pool2x");
}

Var concat_last(const Var& a, const Var& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.empty() || sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
    throw std::invalid_argument("concat_last: incompatible " + shape_str(sa) + " and " + shape_str(sb));
  }
  const int64_t ca = sa.back(), cb = sb.back();
  const int64_t rows = a.numel() / std::max<int64_t>(ca, 1);
  Shape so = sa;
  so.back() = ca + cb;
  Tensor out(so);
  for (int64_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().ptr() + r * ca, ca, out.ptr() + r * (ca + cb));
    std::copy_n(b.value().ptr() + r * cb, cb, out.ptr() + r * (ca + cb) + ca);
  }
  return make_result(std::move(out), {a, b},
                     [ca, cb](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>& needs) {
                       return std::vector<Var>{needs[0] ? slice_last(g, 0, ca) : Var(),
                                               needs[1] ? slice_last(g, ca, ca + cb) : Var()};
                     },
                     "concat_last");
}

Var slice_last(const Var& a, int64_t begin, int64_t end) {
  const auto& s = a.shape();
  if (s.empty() || begin < 0 || end > s.back() || begin >= end) {
    throw std::invalid_argument("slice_last: bad range on " + shape_str(s));
  }
  const int64_t c = s.back(), w = end - begin, rows = a.numel() / c;
  Shape so = s;
  so.back() = w;
  Tensor out(so);
  for (int64_t r = 0; r < rows; ++r) std::copy_n(a.value().ptr() + r * c + begin, w, out.ptr() + r * w);
  return make_result(std::move(out), {a},
                     [c, begin](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{pad_last(g, c, begin)};
                     },
                     "slice_last");
}

Var pad_last(const Var& a, int64_t total, int64_t begin) {
  const auto& s = a.shape();
  if (s.empty() || begin < 0 || begin + s.back() > total) {
    throw std::invalid_argument("pad_last: bad range on " + shape_str(s));
  }
  const int64_t w = s.back(), rows = a.numel() / std::max<int64_t>(w, 1);
  Shape so = s;
  so.back() = total;
  Tensor out(so, 0.0f);
  for (int64_t r = 0; r < rows; ++r) std::copy_n(a.value().ptr() + r * w, w, out.ptr() + r * total + begin);
  return make_result(std::move(out), {a},
                     [begin, w](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{slice_last(g, begin, begin + w)};
                     },
                     "pad_last");
}

Var gather_rows(const Var& table, std::vector<int> rows) {
  check_rank(table.value(), 2, "gather_rows");
  const int64_t k = table.dim(0), d = table.dim(1);
  Tensor out(Shape{static_cast<int64_t>(rows.size()), d});
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= k) throw std::out_of_range("gather_rows: index " + std::to_string(rows[i]));
    std::copy_n(table.value().ptr() + rows[i] * d, d, out.ptr() + static_cast<int64_t>(i) * d);
  }
  return make_result(std::move(out), {table},
                     [rows, k](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{scatter_add_rows(g, rows, k)};
                     },
                     "gather_rows");
}

Var scatter_add_rows(const Var& src, std::vector<int> rows, int64_t num_rows) {
  check_rank(src.value(), 2, "scatter_add_rows");
  if (src.dim(0) != static_cast<int64_t>(rows.size())) throw std::invalid_argument("scatter_add_rows: row count");
  const int64_t d = src.dim(1);
  Tensor out(Shape{num_rows, d}, 0.0f);
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= num_rows) throw std::out_of_range("scatter_add_rows: index");
    const float* ps = src.value().ptr() + static_cast<int64_t>(i) * d;
    float* pd = out.ptr() + rows[i] * d;
    for (int64_t j = 0; j < d; ++j) pd[j] += ps[j];
  }
  return make_result(std::move(out), {src},
                     [rows](const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>&) {
                       return std::vector<Var>{gather_rows(g, rows)};
                     },
                     "scatter_add_rows");
}

// ---------------------------------------------------------------------------
// Fused kernels

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps) {
  const auto& s = x.shape();
  if (s.size() < 2) throw std::invalid_argument("group_norm: rank < 2");
  const int64_t n = s.front(), c = s.back();
  if (groups < 1 || c % groups) throw std::invalid_argument("group_norm: channels not divisible by groups");
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw std::invalid_argument("group_norm: affine shape");
  const int64_t spatial = x.numel() / (n * c), cpg = c / groups;
  const double count = static_cast<double>(spatial * cpg);

  Tensor xhat(s), out(s);
  std::vector<float> rstd(static_cast<size_t>(n * c));
  std::vector<double> acc(static_cast<size_t>(c));
  std::vector<float> mean_c(static_cast<size_t>(c));
  const float* pg = gamma.value().ptr();
  const float* pb = beta.value().ptr();
  for (int64_t b = 0; b < n; ++b) {
    const float* px = x.value().ptr() + b * spatial * c;
    float* ph = xhat.ptr() + b * spatial * c;
    float* po = out.ptr() + b * spatial * c;
    float* pr = rstd.data() + b * c;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t p = 0; p < spatial; ++p)
      for (int64_t k = 0; k < c; ++k) acc[k] += px[p * c + k];
    for (int64_t gi = 0; gi < groups; ++gi) {
      double m = 0.0;
      for (int64_t k = gi * cpg; k < (gi + 1) * cpg; ++k) m += acc[k];
      for (int64_t k = gi * cpg; k < (gi + 1) * cpg; ++k) mean_c[k] = static_cast<float>(m / count);
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t p = 0; p < spatial; ++p)
      for (int64_t k = 0; k < c; ++k) {
        const double d = px[p * c + k] - mean_c[k];
        acc[k] += d * d;
      }
    for (int64_t gi = 0; gi < groups; ++gi) {
      double v = 0.0;
      for (int64_t k = gi * cpg; k < (gi + 1) * cpg; ++k) v += acc[k];
      const float r = static_cast<float>(1.0 / std::sqrt(v / count + eps));
      for (int64_t k = gi * cpg; k < (gi + 1) * cpg; ++k) pr[k] = r;
    }
    for (int64_t p = 0; p < spatial; ++p)
      for (int64_t k = 0; k < c; ++k) {
        const float xh = (px[p * c + k] - mean_c[k]) * pr[k];
        ph[p * c + k] = xh;
        po[p * c + k] = xh * pg[k] + pb[k];
      }
  }

  auto backward = [groups, xhat = std::move(xhat), rstd = std::move(rstd), n, c, spatial, cpg, count](
                      const std::vector<Var>& in, const Var&, const Var& g,
                      const std::vector<bool>& needs) {
    const float* gam = in[1].value().ptr();
    Tensor dx(in[0].shape(), 0.0f), dgamma(Shape{c}, 0.0f), dbeta(Shape{c}, 0.0f);
    std::vector<double> dgam(static_cast<size_t>(c), 0.0), dbet(static_cast<size_t>(c), 0.0);
    std::vector<double> sg(static_cast<size_t>(c)), sgx(static_cast<size_t>(c));
    std::vector<float> m1c(static_cast<size_t>(c)), m2c(static_cast<size_t>(c));
    for (int64_t b = 0; b < n; ++b) {
      const float* pg = g.value().ptr() + b * spatial * c;
      const float* ph = xhat.ptr() + b * spatial * c;
      const float* pr = rstd.data() + b * c;
      std::fill(sg.begin(), sg.end(), 0.0);
      std::fill(sgx.begin(), sgx.end(), 0.0);
      for (int64_t p = 0; p < spatial; ++p)
        for (int64_t k = 0; k < c; ++k) {
          sg[k] += pg[p * c + k];
          sgx[k] += static_cast<double>(pg[p * c + k]) * ph[p * c + k];
        }
      for (int64_t k = 0; k < c; ++k) {
        dgam[k] += sgx[k];
        dbet[k] += sg[k];
      }
      if (!needs[0]) continue;
      for (int64_t gi = 0; gi < groups; ++gi) {
        double m1 = 0.0, m2 = 0.0;
        for (int64_t k = gi * cpg; k < (gi + 1) * cpg; ++k) {
          m1 += gam[k] * sg[k];
          m2 += gam[k] * sgx[k];
        }
        for (int64_t k = gi * cpg; k < (gi + 1) * cpg; ++k) {
          m1c[k] = static_cast<float>(m1 / count);
          m2c[k] = static_cast<float>(m2 / count);
        }
      }
      float* pd = dx.ptr() + b * spatial * c;
      for (int64_t p = 0; p < spatial; ++p)
        for (int64_t k = 0; k < c; ++k) {
          pd[p * c + k] = pr[k] * (pg[p * c + k] * gam[k] - m1c[k] - ph[p * c + k] * m2c[k]);
        }
    }
    for (int64_t k = 0; k < c; ++k) {
      dgamma[k] = static_cast<float>(dgam[static_cast<size_t>(k)]);
      dbeta[k] = static_cast<float>(dbet[static_cast<size_t>(k)]);
    }
    return std::vector<Var>{constant(std::move(dx)), constant(std::move(dgamma)), constant(std::move(dbeta))};
  };
  return make_result(std::move(out), {x, gamma, beta}, std::move(backward), "group_norm", /*higher_order=*/false);
}

Var softmax_cross_entropy(const Var& logits, std::vector<int> labels) {
  check_rank(logits.value(), 2, "softmax_cross_entropy");
  const int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) throw std::invalid_argument("softmax_cross_entropy: label count");
  if (n == 0) throw std::invalid_argument("softmax_cross_entropy: empty batch");
  Tensor probs(logits.shape());
  double loss = 0.0;
  const float* pl = logits.value().ptr();
  for (int64_t i = 0; i < n; ++i) {
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= k) {
      throw std::out_of_range("softmax_cross_entropy: label out of range");
    }
    const float* row = pl + i * k;
    const float mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (int64_t j = 0; j < k; ++j) probs[i * k + j] = static_cast<float>(std::exp(row[j] - mx) / z);
    loss += std::log(z) + mx - row[labels[static_cast<size_t>(i)]];
  }
  return make_result(Tensor::scalar(static_cast<float>(loss / static_cast<double>(n))), {logits},
                     [probs = std::move(probs), labels = std::move(labels), n, k](
                         const std::vector<Var>&, const Var&, const Var& g, const std::vector<bool>&) {
                       Tensor d = probs;
                       const float scale = g.item() / static_cast<float>(n);
                       for (int64_t i = 0; i < n; ++i) d[i * k + labels[static_cast<size_t>(i)]] -= 1.0f;
                       for (auto& v : d.data()) v *= scale;
                       return std::vector<Var>{constant(std::move(d))};
                     },
                     "softmax_cross_entropy", /*higher_order=*/false);
}

}  // namespace cycledm::ag
