#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cycledm/datasets/dataset.hpp"
#include "cycledm/nn.hpp"
#include "json.hpp"

namespace cycledm::evaluation {

// N x d embeddings plus a description of where they came from.
struct FeatureSet {
  Eigen::MatrixXd x;
  std::string source;

  int64_t size() const { return x.rows(); }
  int64_t dim() const { return x.cols(); }
};

struct ExtractorConfig {
  int image_size = 32;
  int channels = 16;
  int embed_dim = 32;
  int steps = 800;
  int batch_size = 32;
  double learning_rate = 2e-3;

  void validate() const;
  nlohmann::json to_json() const;
  static ExtractorConfig from_json(const nlohmann::json& j);
};

inline constexpr int kJointLabels = kNumDomains * kNumClasses;
inline int joint_label(Domain d, int cls) { return static_cast<int>(d) * kNumClasses + cls; }

// Small CNN classifying the joint (domain, class) label. The activations of
// the penultimate layer are the embedding; summing class probabilities per
// domain gives the domain classifier.
class FeatureExtractor : public nn::Module {
 public:
  FeatureExtractor(const ExtractorConfig& config, RngStream& rng);

  ag::Var embedding(const ag::Var& x) const;
  ag::Var logits(const ag::Var& x) const;

  // Batched inference without gradients.
  FeatureSet embed(const Tensor& images, std::string source) const;
  std::vector<int> predict_joint(const Tensor& images) const;
  std::vector<Domain> predict_domain(const Tensor& images) const;

  const ExtractorConfig& config() const { return config_; }
  nlohmann::json training = nlohmann::json::object();

 private:
  Tensor logits_batched(const Tensor& images) const;

  ExtractorConfig config_;
  std::shared_ptr<nn::Conv2d> conv1_, conv2_, conv3_;
  std::shared_ptr<nn::Linear> embed_, head_;
};

struct ExtractorReport {
  std::vector<double> losses;
  double heldout_accuracy = 0.0;  // joint label
  double heldout_domain_accuracy = 0.0;
};

ExtractorReport train_feature_extractor(FeatureExtractor& model, const datasets::DomainDataset& hw_train,
                                        const datasets::DomainDataset& mp_train,
                                        const datasets::DomainDataset& hw_heldout,
                                        const datasets::DomainDataset& mp_heldout, uint64_t seed);

inline constexpr const char* kExtractorCheckpointKind = "feature_extractor";
void save_extractor(const std::filesystem::path& path, const FeatureExtractor& model);
std::unique_ptr<FeatureExtractor> load_extractor(const std::filesystem::path& path);

}  // namespace cycledm::evaluation
