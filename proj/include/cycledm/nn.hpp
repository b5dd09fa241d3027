#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cycledm/autograd.hpp"
#include "cycledm/rng.hpp"

namespace cycledm::nn {

using ag::Var;

struct NamedParameter {
  std::string name;
  Var var;
};

// Parameter container. Registration order defines the serialization order,
// so it must not depend on anything but the architecture.
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  std::vector<NamedParameter> named_parameters() const;
  std::vector<Var> parameters() const;
  int64_t parameter_count() const;

  // Flat copy of every parameter value, in registration order.
  std::vector<Tensor> state() const;
  void load_state(const std::vector<Tensor>& state);

 protected:
  Var register_parameter(std::string name, Tensor init);
  template <class M>
  std::shared_ptr<M> register_module(std::string name, std::shared_ptr<M> module) {
    children_.emplace_back(std::move(name), module);
    return module;
  }

 private:
  void collect(const std::string& prefix, std::vector<NamedParameter>& out) const;
  std::vector<NamedParameter> params_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
};

class Conv2d : public Module {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, RngStream& rng);
  Var forward(const Var& x) const;  // NHWC
  int out_channels() const { return out_; }

 private:
  int in_, out_, kernel_, stride_, pad_;
  Var weight_, bias_;
};

class Linear : public Module {
 public:
  Linear(int in_features, int out_features, RngStream& rng);
  Var forward(const Var& x) const;  // [N, in] -> [N, out]

 private:
  Var weight_, bias_;
};

class GroupNorm : public Module {
 public:
  GroupNorm(int groups, int channels);
  Var forward(const Var& x) const { return ag::group_norm(x, gamma_, beta_, groups_); }

 private:
  int groups_;
  Var gamma_, beta_;
};

class Embedding : public Module {
 public:
  Embedding(int count, int dim, RngStream& rng);
  Var forward(const std::vector<int>& ids) const { return ag::gather_rows(table_, ids); }

 private:
  Var table_;
};

// Adds a per-row vector [N, C] to every spatial position of an NHWC tensor.
Var add_per_channel(const Var& x, const Var& rows);

// Sets every parameter to zero; used for output layers that should start as
// a no-op.
void zero_parameters(const Module& m);

class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // global L2 norm clip; 0 disables
  };

  Adam(std::vector<Var> params, Options options);
  // `grads` aligned with the parameter list.
  void step(const std::vector<Var>& grads);
  int64_t steps() const { return t_; }
  void set_lr(double lr) { opt_.lr = lr; }

 private:
  std::vector<Var> params_;
  Options opt_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

// Exponential moving average of a module's parameters.
class Ema {
 public:
  Ema(const Module& m, double decay);
  void update(const Module& m);
  const std::vector<Tensor>& state() const { return shadow_; }

 private:
  double decay_;
  std::vector<Tensor> shadow_;
};

}  // namespace cycledm::nn
