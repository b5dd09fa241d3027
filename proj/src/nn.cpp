#include "cycledm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace cycledm::nn {
namespace {

Tensor uniform_init(const Shape& shape, int fan_in, RngStream& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  return rng.uniform_tensor(shape, -bound, bound);
}

}  // namespace

Var Module::register_parameter(std::string name, Tensor init) {
  Var v(std::move(init), /*requires_grad=*/true);
  params_.push_back({std::move(name), v});
  return v;
}

void Module::collect(const std::string& prefix, std::vector<NamedParameter>& out) const {
  for (const auto& p : params_) out.push_back({prefix + p.name, p.var});
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

std::vector<NamedParameter> Module::named_parameters() const {
  std::vector<NamedParameter> out;
  collect("", out);
  return out;
}

std::vector<Var> Module::parameters() const {
  std::vector<Var> out;
  for (auto& p : named_parameters()) out.push_back(p.var);
  return out;
}

int64_t Module::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : named_parameters()) n += p.var.numel();
  return n;
}

std::vector<Tensor> Module::state() const {
  std::vector<Tensor> out;
  for (const auto& p : named_parameters()) out.push_back(p.var.value());
  return out;
}

void Module::load_state(const std::vector<Tensor>& state) {
  auto params = named_parameters();
  if (params.size() != state.size()) {
    throw std::invalid_argument("load_state: expected " + std::to_string(params.size()) + " tensors, got " +
                                std::to_string(state.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].var.shape() != state[i].shape()) {
      throw std::invalid_argument("load_state: shape mismatch for " + params[i].name + ": " +
                                  shape_str(params[i].var.shape()) + " vs " + shape_str(state[i].shape()));
    }
    params[i].var.mutable_value() = state[i];
  }
}

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, RngStream& rng)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad) {
  const int fan_in = kernel * kernel * in_channels;
  weight_ = register_parameter("weight", uniform_init({fan_in, out_channels}, fan_in, rng));
  bias_ = register_parameter("bias", uniform_init({out_channels}, fan_in, rng));
}

Var Conv2d::forward(const Var& x) const {
  if (x.value().rank() != 4 || x.dim(3) != in_) {
    throw std::invalid_argument("Conv2d: expected NHWC input with " + std::to_string(in_) + " channels, got " +
                                shape_str(x.shape()));
  }
  const int64_t n = x.dim(0);
  Var cols = kernel_ == 1 && stride_ == 1 && pad_ == 0 ? ag::reshape(x, {x.numel() / in_, in_})
                                                       : ag::im2col(x, kernel_, stride_, pad_);
  Var y = ag::matmul(cols, weight_);
  y = ag::add_channel_bias(y, bias_);
  const int64_t oh = (x.dim(1) + 2 * pad_ - kernel_) / stride_ + 1;
  const int64_t ow = (x.dim(2) + 2 * pad_ - kernel_) / stride_ + 1;
  return ag::reshape(y, {n, oh, ow, out_});
}

Linear::Linear(int in_features, int out_features, RngStream& rng) {
  weight_ = register_parameter("weight", uniform_init({in_features, out_features}, in_features, rng));
  bias_ = register_parameter("bias", uniform_init({out_features}, in_features, rng));
}

Var Linear::forward(const Var& x) const {
  Var y = ag::matmul(x, weight_);
  return ag::add_channel_bias(y, bias_);
}

GroupNorm::GroupNorm(int groups, int channels) : groups_(groups) {
  if (channels % groups) throw std::invalid_argument("GroupNorm: channels not divisible by groups");
  gamma_ = register_parameter("gamma", Tensor({channels}, 1.0f));
  beta_ = register_parameter("beta", Tensor({channels}, 0.0f));
}

Embedding::Embedding(int count, int dim, RngStream& rng) {
  table_ = register_parameter("table", rng.normal_tensor({count, dim}));
}

Var add_per_channel(const Var& x, const Var& rows) {
  if (x.value().rank() != 4 || rows.value().rank() != 2 || rows.dim(0) != x.dim(0) || rows.dim(1) != x.dim(3)) {
    throw std::invalid_argument("add_per_channel: " + shape_str(x.shape()) + " vs " + shape_str(rows.shape()));
  }
  return x + ag::expand(ag::reshape(rows, {x.dim(0), 1, 1, x.dim(3)}), x.shape());
}

void zero_parameters(const Module& m) {
  for (auto& p : m.parameters()) {
    Var v = p;
    for (auto& x : v.mutable_value().data()) x = 0.0f;
  }
}

Adam::Adam(std::vector<Var> params, Options options) : params_(std::move(params)), opt_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    v_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
  }
}

void Adam::step(const std::vector<Var>& grads) {
  if (grads.size() != params_.size()) throw std::invalid_argument("Adam::step: gradient count mismatch");
  ++t_;
  double clip_scale = 1.0;
  if (opt_.grad_clip > 0.0) {
    double norm2 = 0.0;
    for (const auto& g : grads)
      for (float x : g.value().data()) norm2 += static_cast<double>(x) * x;
    const double norm = std::sqrt(norm2);
    if (norm > opt_.grad_clip) clip_scale = opt_.grad_clip / norm;
  }
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  const float step = static_cast<float>(opt_.lr / bc1);
  const float b1 = static_cast<float>(opt_.beta1), b2 = static_cast<float>(opt_.beta2);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(opt_.eps);
  for (size_t i = 0; i < params_.size(); ++i) {
    if (grads[i].shape() != params_[i].shape()) {
      throw std::invalid_argument("Adam::step: gradient shape mismatch " + shape_str(grads[i].shape()));
    }
    float* w = params_[i].mutable_value().ptr();
    const float* g = grads[i].value().ptr();
    float* m = m_[i].data();
    float* v = v_[i].data();
    const int64_t n = params_[i].numel();
    for (int64_t j = 0; j < n; ++j) {
      const float gj = static_cast<float>(g[j] * clip_scale);
      m[j] = b1 * m[j] + (1.0f - b1) * gj;
      v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
      w[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

Ema::Ema(const Module& m, double decay) : decay_(decay), shadow_(m.state()) {}

void Ema::update(const Module& m) {
  const auto params = m.parameters();
  const float d = static_cast<float>(decay_);
  for (size_t i = 0; i < params.size(); ++i) {
    float* s = shadow_[i].ptr();
    const float* p = params[i].value().ptr();
    for (int64_t j = 0; j < shadow_[i].numel(); ++j) s[j] = d * s[j] + (1.0f - d) * p[j];
  }
}

}  // namespace cycledm::nn
