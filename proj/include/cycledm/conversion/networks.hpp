#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cycledm/nn.hpp"
#include "json.hpp"

namespace cycledm::conversion {

// A class-conditioned map between noisy image manifolds (F_t or G_t).
class Converter {
 public:
  virtual ~Converter() = default;
  virtual ag::Var convert(const ag::Var& x, const std::vector<int>& classes) const = 0;
};

// A class-conditioned critic returning one real-valued score per image, [N].
class Critic {
 public:
  virtual ~Critic() = default;
  virtual ag::Var score(const ag::Var& x, const std::vector<int>& classes) const = 0;
};

// Adapters for closed-form maps, mostly useful in tests and ablations.
class FunctionConverter : public Converter {
 public:
  using Fn = std::function<ag::Var(const ag::Var&, const std::vector<int>&)>;
  explicit FunctionConverter(Fn fn) : fn_(std::move(fn)) {}
  ag::Var convert(const ag::Var& x, const std::vector<int>& classes) const override { return fn_(x, classes); }

 private:
  Fn fn_;
};

class FunctionCritic : public Critic {
 public:
  using Fn = std::function<ag::Var(const ag::Var&, const std::vector<int>&)>;
  explicit FunctionCritic(Fn fn) : fn_(std::move(fn)) {}
  ag::Var score(const ag::Var& x, const std::vector<int>& classes) const override { return fn_(x, classes); }

 private:
  Fn fn_;
};

// Returns x unchanged.
const Converter& identity_converter();

struct ConverterConfig {
  int channels = 8;         // full-resolution width; the bottleneck has twice as many
  int res_blocks = 2;
  int groups = 4;
  int disc_channels = 16;   // first discriminator layer; doubles per stride-2 layer
  int disc_layers = 3;

  void validate() const;
  nlohmann::json to_json() const;
  static ConverterConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ConverterConfig&, const ConverterConfig&) = default;
};

// Encoder-decoder: conv, stride-2 conv, residual blocks at half resolution
// with a class embedding added at the bottleneck, nearest upsample joined
// with the full-resolution features, conv.
class ConversionNet : public nn::Module, public Converter {
 public:
  ConversionNet(const ConverterConfig& config, RngStream& rng);
  ag::Var convert(const ag::Var& x, const std::vector<int>& classes) const override;

 private:
  struct Block {
    std::shared_ptr<nn::GroupNorm> norm1, norm2;
    std::shared_ptr<nn::Conv2d> conv1, conv2;
  };
  std::shared_ptr<nn::Conv2d> conv_in_, down_, up_, conv_out_;
  std::shared_ptr<nn::GroupNorm> norm_in_, norm_down_, norm_up_;
  std::shared_ptr<nn::Embedding> class_emb_;
  std::vector<Block> blocks_;
};

// Stride-2 convolutions with leaky ReLU, spatial mean pooling, a linear head
// and a projection term <pool(h), embed(c)>. Built only from operations that
// support second derivatives so the gradient penalty can be trained.
class Discriminator : public nn::Module, public Critic {
 public:
  Discriminator(const ConverterConfig& config, RngStream& rng);
  ag::Var score(const ag::Var& x, const std::vector<int>& classes) const override;

 private:
  std::vector<std::shared_ptr<nn::Conv2d>> convs_;
  std::shared_ptr<nn::Linear> head_;
  std::shared_ptr<nn::Embedding> class_emb_;
};

}  // namespace cycledm::conversion
