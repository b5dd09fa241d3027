#include "cycledm/conversion/networks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cycledm/types.hpp"

namespace cycledm::conversion {

const Converter& identity_converter() {
  static const FunctionConverter id([](const ag::Var& x, const std::vector<int>&) { return x; });
  return id;
}

void ConverterConfig::validate() const {
  if (channels < 1 || res_blocks < 0 || groups < 1 || channels % groups) {
    throw std::invalid_argument("converter channels must be a positive multiple of groups");
  }
  if (disc_channels < 1 || disc_layers < 1) throw std::invalid_argument("discriminator size must be positive");
}

nlohmann::json ConverterConfig::to_json() const {
  return {{"channels", channels},
          {"res_blocks", res_blocks},
          {"groups", groups},
          {"disc_channels", disc_channels},
          {"disc_layers", disc_layers}};
}

ConverterConfig ConverterConfig::from_json(const nlohmann::json& j) {
  ConverterConfig c;
  c.channels = j.at("channels").get<int>();
  c.res_blocks = j.at("res_blocks").get<int>();
  c.groups = j.at("groups").get<int>();
  c.disc_channels = j.at("disc_channels").get<int>();
  c.disc_layers = j.at("disc_layers").get<int>();
  c.validate();
  return c;
}

namespace {

void check_classes(const ag::Var& x, const std::vector<int>& classes, const char* who) {
  if (x.value().rank() != 4 || x.dim(3) != 1) throw std::invalid_argument(std::string(who) + ": expected [N, H, W, 1]");
  if (static_cast<int64_t>(classes.size()) != x.dim(0)) {
    throw std::invalid_argument(std::string(who) + ": one class per image required");
  }
  for (int c : classes) {
    if (c < 0 || c >= kNumClasses) throw std::invalid_argument(std::string(who) + ": class out of range");
  }
}

}  // namespace

ConversionNet::ConversionNet(const ConverterConfig& config, RngStream& rng) {
  config.validate();
  const int c = config.channels, c2 = 2 * config.channels;
  conv_in_ = register_module("conv_in", std::make_shared<nn::Conv2d>(1, c, 3, 1, 1, rng));
  norm_in_ = register_module("norm_in", std::make_shared<nn::GroupNorm>(config.groups, c));
  down_ = register_module("down", std::make_shared<nn::Conv2d>(c, c2, 3, 2, 1, rng));
  norm_down_ = register_module("norm_down", std::make_shared<nn::GroupNorm>(config.groups, c2));
  class_emb_ = register_module("class_emb", std::make_shared<nn::Embedding>(kNumClasses, c2, rng));
  for (int i = 0; i < config.res_blocks; ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    Block b;
    b.norm1 = register_module(p + "norm1", std::make_shared<nn::GroupNorm>(config.groups, c2));
    b.conv1 = register_module(p + "conv1", std::make_shared<nn::Conv2d>(c2, c2, 3, 1, 1, rng));
    b.norm2 = register_module(p + "norm2", std::make_shared<nn::GroupNorm>(config.groups, c2));
    b.conv2 = register_module(p + "conv2", std::make_shared<nn::Conv2d>(c2, c2, 3, 1, 1, rng));
    blocks_.push_back(b);
  }
  up_ = register_module("up", std::make_shared<nn::Conv2d>(c2, c, 3, 1, 1, rng));
  norm_up_ = register_module("norm_up", std::make_shared<nn::GroupNorm>(config.groups, c));
  conv_out_ = register_module("conv_out", std::make_shared<nn::Conv2d>(c, 1, 3, 1, 1, rng));
}

ag::Var ConversionNet::convert(const ag::Var& x, const std::vector<int>& classes) const {
  check_classes(x, classes, "ConversionNet");
  if (x.dim(1) % 2 || x.dim(2) % 2) throw std::invalid_argument("ConversionNet: image size must be even");
  const ag::Var skip = ag::silu(norm_in_->forward(conv_in_->forward(x)));
  ag::Var h = ag::silu(norm_down_->forward(down_->forward(skip)));
  h = nn::add_per_channel(h, class_emb_->forward(classes));
  for (const auto& b : blocks_) {
    ag::Var r = b.conv1->forward(ag::silu(b.norm1->forward(h)));
    r = b.conv2->forward(ag::silu(b.norm2->forward(r)));
    h = h + r;
  }
  h = ag::silu(norm_up_->forward(up_->forward(ag::upsample_nearest2x(h)) + skip));
  return conv_out_->forward(h);
}

Discriminator::Discriminator(const ConverterConfig& config, RngStream& rng) {
  config.validate();
  int in = 1, out = config.disc_channels;
  for (int i = 0; i < config.disc_layers; ++i) {
    convs_.push_back(register_module("conv" + std::to_string(i), std::make_shared<nn::Conv2d>(in, out, 3, 2, 1, rng)));
    in = out;
    out *= 2;
  }
  head_ = register_module("head", std::make_shared<nn::Linear>(in, 1, rng));
  class_emb_ = register_module("class_emb", std::make_shared<nn::Embedding>(kNumClasses, in, rng));
}

ag::Var Discriminator::score(const ag::Var& x, const std::vector<int>& classes) const {
  check_classes(x, classes, "Discriminator");
  ag::Var h = x;
  for (const auto& conv : convs_) h = ag::leaky_relu(conv->forward(h), 0.2f);
  const int64_t n = h.dim(0), hw = h.dim(1) * h.dim(2), c = h.dim(3);
  const ag::Var pooled =
      ag::reshape(ag::reduce_to(ag::reshape(h, {n, hw, c}), {n, 1, c}), {n, c}) * (1.0f / static_cast<float>(hw));
  const ag::Var linear = ag::reshape(head_->forward(pooled), {n});
  const ag::Var proj = ag::reshape(ag::reduce_to(pooled * class_emb_->forward(classes), {n, 1}), {n});
  return linear + proj * (1.0f / std::sqrt(static_cast<float>(c)));
}

}  // namespace cycledm::conversion
