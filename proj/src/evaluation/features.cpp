#include "cycledm/evaluation/features.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "cycledm/checkpoint.hpp"

namespace cycledm::evaluation {
namespace {

constexpr int64_t kInferenceBatch = 128;

Tensor rows_of(const Tensor& images, int64_t begin, int64_t end) { return images.slice_rows(begin, end); }

double accuracy_on(const FeatureExtractor& m, const datasets::DomainDataset& hw, const datasets::DomainDataset& mp,
                   bool domain_only) {
  int64_t correct = 0, total = 0;
  for (const auto* ds : {&hw, &mp}) {
    if (ds->empty()) continue;
    const ImageBatch b = ds->all();
    if (domain_only) {
      for (Domain d : m.predict_domain(b.pixels)) correct += d == ds->domain;
    } else {
      const auto pred = m.predict_joint(b.pixels);
      for (size_t i = 0; i < pred.size(); ++i) correct += pred[i] == joint_label(ds->domain, b.classes[i]);
    }
    total += b.size();
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace

void ExtractorConfig::validate() const {
  if (image_size < 8 || image_size % 8) throw std::invalid_argument("extractor image_size must be a positive multiple of 8");
  if (channels < 1 || embed_dim < 1) throw std::invalid_argument("extractor channels/embed_dim must be positive");
  if (steps < 1 || batch_size < 1) throw std::invalid_argument("extractor steps/batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("extractor learning_rate must be > 0");
}

nlohmann::json ExtractorConfig::to_json() const {
  return {{"image_size", image_size}, {"channels", channels},     {"embed_dim", embed_dim},
          {"steps", steps},           {"batch_size", batch_size}, {"learning_rate", learning_rate}};
}

ExtractorConfig ExtractorConfig::from_json(const nlohmann::json& j) {
  ExtractorConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.steps = j.at("steps").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.validate();
  return c;
}

FeatureExtractor::FeatureExtractor(const ExtractorConfig& config, RngStream& rng) : config_(config) {
  config.validate();
  const int c = config.channels;
  conv1_ = register_module("conv1", std::make_shared<nn::Conv2d>(1, c, 3, 1, 1, rng));
  conv2_ = register_module("conv2", std::make_shared<nn::Conv2d>(c, 2 * c, 3, 2, 1, rng));
  conv3_ = register_module("conv3", std::make_shared<nn::Conv2d>(2 * c, 2 * c, 3, 2, 1, rng));
  embed_ = register_module("embed", std::make_shared<nn::Linear>(2 * c * (config.image_size / 4) * (config.image_size / 4) / 4,
                                                                 config.embed_dim, rng));
  head_ = register_module("head", std::make_shared<nn::Linear>(config.embed_dim, kJointLabels, rng));
}

ag::Var FeatureExtractor::embedding(const ag::Var& x) const {
  if (x.value().rank() != 4 || x.dim(1) != config_.image_size || x.dim(2) != config_.image_size || x.dim(3) != 1) {
    throw std::invalid_argument("feature extractor expects [N, " + std::to_string(config_.image_size) + ", " +
                                std::to_string(config_.image_size) + ", 1], got " + shape_str(x.shape()));
  }
  ag::Var h = ag::relu(conv1_->forward(x));
  h = ag::relu(conv2_->forward(h));
  h = ag::relu(conv3_->forward(h));
  h = ag::sum_pool2x(h) * 0.25f;
  h = ag::reshape(h, {h.dim(0), h.numel() / h.dim(0)});
  return ag::relu(embed_->forward(h));
}

ag::Var FeatureExtractor::logits(const ag::Var& x) const { return head_->forward(embedding(x)); }

Tensor FeatureExtractor::logits_batched(const Tensor& images) const {
  ag::NoGradGuard ng;
  std::vector<Tensor> parts;
  for (int64_t i = 0; i < images.dim(0); i += kInferenceBatch) {
    parts.push_back(logits(ag::Var(rows_of(images, i, std::min(images.dim(0), i + kInferenceBatch)))).value());
  }
  return parts.empty() ? Tensor({0, kJointLabels}) : concat_rows(parts);
}

FeatureSet FeatureExtractor::embed(const Tensor& images, std::string source) const {
  ag::NoGradGuard ng;
  FeatureSet fs;
  fs.source = std::move(source);
  fs.x.resize(images.dim(0), config_.embed_dim);
  for (int64_t i = 0; i < images.dim(0); i += kInferenceBatch) {
    const int64_t end = std::min(images.dim(0), i + kInferenceBatch);
    const Tensor e = embedding(ag::Var(rows_of(images, i, end))).value();
    for (int64_t r = i; r < end; ++r) {
      for (int64_t c = 0; c < config_.embed_dim; ++c) fs.x(r, c) = e[(r - i) * config_.embed_dim + c];
    }
  }
  return fs;
}

std::vector<int> FeatureExtractor::predict_joint(const Tensor& images) const {
  const Tensor l = logits_batched(images);
  std::vector<int> out;
  for (int64_t i = 0; i < l.dim(0); ++i) {
    const float* row = l.ptr() + i * kJointLabels;
    out.push_back(static_cast<int>(std::max_element(row, row + kJointLabels) - row));
  }
  return out;
}

std::vector<Domain> FeatureExtractor::predict_domain(const Tensor& images) const {
  const Tensor l = logits_batched(images);
  std::vector<Domain> out;
  for (int64_t i = 0; i < l.dim(0); ++i) {
    const float* row = l.ptr() + i * kJointLabels;
    const double mx = *std::max_element(row, row + kJointLabels);
    double mass[kNumDomains] = {0.0, 0.0};
    for (int j = 0; j < kJointLabels; ++j) mass[j / kNumClasses] += std::exp(row[j] - mx);
    out.push_back(mass[1] > mass[0] ? Domain::kPrinted : Domain::kHandwritten);
  }
  return out;
}

ExtractorReport train_feature_extractor(FeatureExtractor& model, const datasets::DomainDataset& hw_train,
                                        const datasets::DomainDataset& mp_train,
                                        const datasets::DomainDataset& hw_heldout,
                                        const datasets::DomainDataset& mp_heldout, uint64_t seed) {
  const ExtractorConfig& cfg = model.config();
  if (hw_train.empty() || mp_train.empty()) throw std::invalid_argument("train_feature_extractor: empty input");
  for (const auto* ds : {&hw_train, &mp_train, &hw_heldout, &mp_heldout}) {
    if (!ds->empty() && ds->resolution != cfg.image_size) {
      throw std::invalid_argument("train_feature_extractor: dataset resolution does not match the extractor");
    }
  }
  RngStream data_rng = RngStream::derive(seed, "extractor/data");
  const std::vector<ag::Var> params = model.parameters();
  nn::Adam::Options opt;
  opt.lr = cfg.learning_rate;
  nn::Adam adam(params, opt);
  const int64_t n_hw = hw_train.size(), n_total = n_hw + mp_train.size();

  ExtractorReport report;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int64_t> hw_idx, mp_idx;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int64_t k = data_rng.uniform_int(0, static_cast<int>(n_total) - 1);
      (k < n_hw ? hw_idx : mp_idx).push_back(k < n_hw ? k : k - n_hw);
    }
    std::vector<Tensor> parts;
    std::vector<int> labels;
    for (const auto& [ds, idx] : {std::pair{&hw_train, &hw_idx}, std::pair{&mp_train, &mp_idx}}) {
      if (idx->empty()) continue;
      const ImageBatch b = ds->batch(*idx);
      parts.push_back(b.pixels);
      for (int c : b.classes) labels.push_back(joint_label(ds->domain, c));
    }
    // Cosine learning-rate decay to zero.
    adam.set_lr(cfg.learning_rate * 0.5 * (1.0 + std::cos(M_PI * step / cfg.steps)));
    const ag::Var loss = ag::softmax_cross_entropy(model.logits(ag::Var(concat_rows(parts))), labels);
    adam.step(ag::grad(loss, params));
    report.losses.push_back(loss.item());
  }
  report.heldout_accuracy = accuracy_on(model, hw_heldout, mp_heldout, false);
  report.heldout_domain_accuracy = accuracy_on(model, hw_heldout, mp_heldout, true);
  model.training = {{"seed", seed},
                    {"heldout_accuracy", report.heldout_accuracy},
                    {"heldout_domain_accuracy", report.heldout_domain_accuracy},
                    {"final_loss", report.losses.back()}};
  return report;
}

void save_extractor(const std::filesystem::path& path, const FeatureExtractor& model) {
  Checkpoint ck;
  ck.kind = kExtractorCheckpointKind;
  ck.meta = {{"architecture", model.config().to_json()}, {"training", model.training}};
  ck.tensors = module_tensors(model);
  save_checkpoint(path, ck);
}

std::unique_ptr<FeatureExtractor> load_extractor(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path, kExtractorCheckpointKind);
  std::unique_ptr<FeatureExtractor> m;
  try {
    RngStream init(0);
    m = std::make_unique<FeatureExtractor>(ExtractorConfig::from_json(ck.meta.at("architecture")), init);
    m->training = ck.meta.value("training", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed extractor checkpoint metadata in " + path.string() + ": " + e.what());
  }
  load_module_tensors(*m, ck.tensors);
  return m;
}

}  // namespace cycledm::evaluation
