#include "cycledm/diffusion/unet.hpp"

#include <cmath>
#include <stdexcept>

namespace cycledm::diffusion {

void UNetConfig::validate() const {
  if (channel_mult.empty()) throw std::invalid_argument("UNetConfig: channel_mult is empty");
  if (base_channels < 1 || groups < 1 || embed_dim < 2 || embed_dim % 2) {
    throw std::invalid_argument("UNetConfig: bad base_channels/groups/embed_dim");
  }
  const int factor = 1 << (channel_mult.size() - 1);
  if (image_size < 1 || image_size % factor) {
    throw std::invalid_argument("UNetConfig: image_size " + std::to_string(image_size) + " not divisible by " +
                                std::to_string(factor));
  }
  for (int m : channel_mult) {
    if (m < 1 || (base_channels * m) % groups) {
      throw std::invalid_argument("UNetConfig: channel count not divisible by groups");
    }
  }
}

nlohmann::json UNetConfig::to_json() const {
  return {{"image_size", image_size}, {"base_channels", base_channels}, {"channel_mult", channel_mult},
          {"groups", groups},         {"embed_dim", embed_dim}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  c.groups = j.at("groups").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.validate();
  return c;
}

Tensor timestep_embedding(std::span<const int> timesteps, int dim) {
  const int half = dim / 2;
  Tensor out({static_cast<int64_t>(timesteps.size()), dim});
  for (size_t i = 0; i < timesteps.size(); ++i) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      const double arg = timesteps[i] * freq;
      out[static_cast<int64_t>(i) * dim + k] = static_cast<float>(std::sin(arg));
      out[static_cast<int64_t>(i) * dim + half + k] = static_cast<float>(std::cos(arg));
    }
  }
  return out;
}

ResBlock::ResBlock(int in_channels, int out_channels, int embed_dim, int groups, RngStream& rng) {
  norm1_ = register_module("norm1", std::make_shared<nn::GroupNorm>(groups, in_channels));
  conv1_ = register_module("conv1", std::make_shared<nn::Conv2d>(in_channels, out_channels, 3, 1, 1, rng));
  emb_proj_ = register_module("emb_proj", std::make_shared<nn::Linear>(embed_dim, out_channels, rng));
  norm2_ = register_module("norm2", std::make_shared<nn::GroupNorm>(groups, out_channels));
  conv2_ = register_module("conv2", std::make_shared<nn::Conv2d>(out_channels, out_channels, 3, 1, 1, rng));
  if (in_channels != out_channels) {
    skip_ = register_module("skip", std::make_shared<nn::Conv2d>(in_channels, out_channels, 1, 1, 0, rng));
  }
}

ag::Var ResBlock::forward(const ag::Var& x, const ag::Var& emb) const {
  ag::Var h = conv1_->forward(ag::silu(norm1_->forward(x)));
  h = nn::add_per_channel(h, emb_proj_->forward(ag::silu(emb)));
  h = conv2_->forward(ag::silu(norm2_->forward(h)));
  return (skip_ ? skip_->forward(x) : x) + h;
}

UNet::UNet(const UNetConfig& config, RngStream& rng) : config_(config) {
  config_.validate();
  const int e = config_.embed_dim;
  const int g = config_.groups;
  time1_ = register_module("time1", std::make_shared<nn::Linear>(e, e, rng));
  time2_ = register_module("time2", std::make_shared<nn::Linear>(e, e, rng));
  class_emb_ = register_module("class_emb", std::make_shared<nn::Embedding>(kNumClasses + 1, e, rng));
  domain_emb_ = register_module("domain_emb", std::make_shared<nn::Embedding>(kNumDomains, e, rng));

  const int levels = static_cast<int>(config_.channel_mult.size());
  std::vector<int> ch;
  for (int m : config_.channel_mult) ch.push_back(config_.base_channels * m);
  conv_in_ = register_module("conv_in", std::make_shared<nn::Conv2d>(1, config_.base_channels, 3, 1, 1, rng));
  int prev = config_.base_channels;
  for (int i = 0; i < levels; ++i) {
    down_blocks_.push_back(register_module("down" + std::to_string(i),
                                           std::make_shared<ResBlock>(prev, ch[static_cast<size_t>(i)], e, g, rng)));
    prev = ch[static_cast<size_t>(i)];
    if (i + 1 < levels) {
      downsample_.push_back(
          register_module("downsample" + std::to_string(i), std::make_shared<nn::Conv2d>(prev, prev, 3, 2, 1, rng)));
    }
  }
  mid_ = register_module("mid", std::make_shared<ResBlock>(prev, prev, e, g, rng));
  up_blocks_.resize(static_cast<size_t>(levels));
  upsample_.resize(static_cast<size_t>(levels));
  for (int i = levels - 1; i >= 0; --i) {
    const int c = ch[static_cast<size_t>(i)];
    up_blocks_[static_cast<size_t>(i)] =
        register_module("up" + std::to_string(i), std::make_shared<ResBlock>(2 * c, c, e, g, rng));
    if (i > 0) {
      upsample_[static_cast<size_t>(i)] = register_module(
          "upsample" + std::to_string(i),
          std::make_shared<nn::Conv2d>(c, ch[static_cast<size_t>(i - 1)], 3, 1, 1, rng));
    }
  }
  norm_out_ = register_module("norm_out", std::make_shared<nn::GroupNorm>(g, ch[0]));
  conv_out_ = register_module("conv_out", std::make_shared<nn::Conv2d>(ch[0], 1, 3, 1, 1, rng));
  nn::zero_parameters(*conv_out_);
}

ag::Var UNet::forward(const ag::Var& x, const PredictorInputs& in) const {
  if (x.value().rank() != 4 || x.dim(1) != config_.image_size || x.dim(2) != config_.image_size || x.dim(3) != 1) {
    throw std::invalid_argument("UNet: expected [N," + std::to_string(config_.image_size) + "," +
                                std::to_string(config_.image_size) + ",1] input, got " + shape_str(x.shape()));
  }
  if (static_cast<int64_t>(in.size()) != x.dim(0) || in.classes.size() != in.size() ||
      in.domains.size() != in.size()) {
    throw std::invalid_argument("UNet: conditioning size does not match batch");
  }
  std::vector<int> class_ids, domain_ids;
  for (const auto& c : in.classes) class_ids.push_back(token_index(c));
  for (auto d : in.domains) domain_ids.push_back(static_cast<int>(d));

  ag::Var emb = time2_->forward(ag::silu(time1_->forward(ag::Var(timestep_embedding(in.timesteps, config_.embed_dim)))));
  emb = emb + class_emb_->forward(class_ids) + domain_emb_->forward(domain_ids);

  const size_t levels = down_blocks_.size();
  std::vector<ag::Var> skips;
  ag::Var h = conv_in_->forward(x);
  for (size_t i = 0; i < levels; ++i) {
    h = down_blocks_[i]->forward(h, emb);
    skips.push_back(h);
    if (i + 1 < levels) h = downsample_[i]->forward(h);
  }
  h = mid_->forward(h, emb);
  for (size_t i = levels; i-- > 0;) {
    h = up_blocks_[i]->forward(ag::concat_last(h, skips[i]), emb);
    if (i > 0) h = upsample_[i]->forward(ag::upsample_nearest2x(h));
  }
  return conv_out_->forward(ag::silu(norm_out_->forward(h)));
}

DenoiserNetwork::DenoiserNetwork(const UNetConfig& config, bool per_domain, RngStream& rng) : config_(config) {
  if (per_domain) {
    nets_.push_back(register_module("hw", std::make_shared<UNet>(config, rng)));
    nets_.push_back(register_module("mp", std::make_shared<UNet>(config, rng)));
  } else {
    nets_.push_back(register_module("joint", std::make_shared<UNet>(config, rng)));
  }
}

ag::Var DenoiserNetwork::predict(const ag::Var& x_t, const PredictorInputs& in) const {
  if (nets_.size() == 1) return nets_[0]->forward(x_t, in);
  // Route each image to its domain's network and stitch the rows back.
  const int64_t n = x_t.dim(0);
  const int64_t per = x_t.numel() / std::max<int64_t>(n, 1);
  const ag::Var flat = ag::reshape(x_t, {n, per});
  ag::Var out;
  for (int d = 0; d < kNumDomains; ++d) {
    std::vector<int> rows;
    PredictorInputs sub;
    for (int64_t i = 0; i < n; ++i) {
      if (static_cast<int>(in.domains[static_cast<size_t>(i)]) != d) continue;
      rows.push_back(static_cast<int>(i));
      sub.timesteps.push_back(in.timesteps[static_cast<size_t>(i)]);
      sub.classes.push_back(in.classes[static_cast<size_t>(i)]);
      sub.domains.push_back(in.domains[static_cast<size_t>(i)]);
    }
    if (rows.empty()) continue;
    Shape s = x_t.shape();
    s[0] = static_cast<int64_t>(rows.size());
    ag::Var pred = nets_[static_cast<size_t>(d)]->forward(ag::reshape(ag::gather_rows(flat, rows), s), sub);
    ag::Var placed = ag::scatter_add_rows(ag::reshape(pred, {static_cast<int64_t>(rows.size()), per}), rows, n);
    out = out.defined() ? out + placed : placed;
  }
  return ag::reshape(out, x_t.shape());
}

}  // namespace cycledm::diffusion
