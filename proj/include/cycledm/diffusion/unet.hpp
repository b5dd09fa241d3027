#pragma once

#include <memory>
#include <vector>

#include "cycledm/diffusion/process.hpp"
#include "cycledm/nn.hpp"
#include "json.hpp"

namespace cycledm::diffusion {

struct UNetConfig {
  int image_size = 32;
  int base_channels = 16;
  std::vector<int> channel_mult{1, 2, 2};  // one resolution level per entry
  int groups = 8;
  int embed_dim = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

// Sinusoidal timestep features, [N, dim].
Tensor timestep_embedding(std::span<const int> timesteps, int dim);

class ResBlock : public nn::Module {
 public:
  ResBlock(int in_channels, int out_channels, int embed_dim, int groups, RngStream& rng);
  ag::Var forward(const ag::Var& x, const ag::Var& emb) const;

 private:
  std::shared_ptr<nn::GroupNorm> norm1_, norm2_;
  std::shared_ptr<nn::Conv2d> conv1_, conv2_, skip_;
  std::shared_ptr<nn::Linear> emb_proj_;
};

// Small encoder-decoder with skip connections. Timestep, class token and
// domain embeddings are summed into one conditioning vector that every
// residual block adds after its first convolution.
class UNet : public nn::Module {
 public:
  UNet(const UNetConfig& config, RngStream& rng);
  ag::Var forward(const ag::Var& x, const PredictorInputs& in) const;
  const UNetConfig& config() const { return config_; }

 private:
  UNetConfig config_;
  std::shared_ptr<nn::Linear> time1_, time2_;
  std::shared_ptr<nn::Embedding> class_emb_, domain_emb_;
  std::shared_ptr<nn::Conv2d> conv_in_, conv_out_;
  std::vector<std::shared_ptr<ResBlock>> down_blocks_, up_blocks_;
  std::vector<std::shared_ptr<nn::Conv2d>> downsample_, upsample_;
  std::shared_ptr<ResBlock> mid_;
  std::shared_ptr<nn::GroupNorm> norm_out_;
};

// The trainable noise predictor: one domain-conditioned UNet shared by both
// domains, or (per_domain) a separate UNet per domain.
class DenoiserNetwork : public nn::Module, public NoisePredictor {
 public:
  DenoiserNetwork(const UNetConfig& config, bool per_domain, RngStream& rng);
  ag::Var predict(const ag::Var& x_t, const PredictorInputs& in) const override;

  const UNetConfig& config() const { return config_; }
  bool per_domain() const { return nets_.size() == 2; }

 private:
  UNetConfig config_;
  std::vector<std::shared_ptr<UNet>> nets_;
};

}  // namespace cycledm::diffusion
