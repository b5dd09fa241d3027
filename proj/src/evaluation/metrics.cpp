#include "cycledm/evaluation/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cycledm::evaluation {
namespace {

void check_features(const FeatureSet& a, const FeatureSet& b, const char* who) {
  if (a.dim() != b.dim()) {
    throw std::invalid_argument(std::string(who) + ": feature dimensions differ (" + std::to_string(a.dim()) + " vs " +
                                std::to_string(b.dim()) + ")");
  }
  if (!a.x.allFinite() || !b.x.allFinite()) throw std::invalid_argument(std::string(who) + ": non-finite features");
}

void moments(const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& sigma) {
  mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
  sigma = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  sigma += kCovarianceRidge * Eigen::MatrixXd::Identity(x.cols(), x.cols());
}

// Symmetric PSD square root through an eigendecomposition.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

// Per-point squared distance to the k-th nearest other point of the same set.
std::vector<double> knn_radii_sq(const Eigen::MatrixXd& x, int k) {
  const int64_t n = x.rows();
  std::vector<double> radii(static_cast<size_t>(n));
  std::vector<double> d(static_cast<size_t>(n - 1));
  for (int64_t i = 0; i < n; ++i) {
    size_t m = 0;
    for (int64_t j = 0; j < n; ++j) {
      if (j != i) d[m++] = (x.row(i) - x.row(j)).squaredNorm();
    }
    std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
    radii[static_cast<size_t>(i)] = d[static_cast<size_t>(k - 1)];
  }
  return radii;
}

double coverage(const Eigen::MatrixXd& manifold, const std::vector<double>& radii_sq, const Eigen::MatrixXd& probes) {
  int64_t covered = 0;
  for (int64_t i = 0; i < probes.rows(); ++i) {
    for (int64_t j = 0; j < manifold.rows(); ++j) {
      if ((probes.row(i) - manifold.row(j)).squaredNorm() <= radii_sq[static_cast<size_t>(j)]) {
        ++covered;
        break;
      }
    }
  }
  return static_cast<double>(covered) / static_cast<double>(probes.rows());
}

}  // namespace

double compute_fid(const FeatureSet& real, const FeatureSet& gen, std::vector<std::string>* warnings) {
  check_features(real, gen, "compute_fid");
  if (real.size() < 2 || gen.size() < 2) throw std::invalid_argument("compute_fid: need at least 2 samples per set");
  if (warnings && (real.size() <= real.dim() || gen.size() <= gen.dim())) {
    warnings->push_back("FID with N <= d (" + std::to_string(std::min(real.size(), gen.size())) + " <= " +
                        std::to_string(real.dim()) + "); covariance is rank-deficient");
  }
  Eigen::VectorXd mu_r, mu_g;
  Eigen::MatrixXd s_r, s_g;
  moments(real.x, mu_r, s_r);
  moments(gen.x, mu_g, s_g);
  const Eigen::MatrixXd root_r = sqrt_psd(s_r);
  const Eigen::MatrixXd inner = root_r * s_g * root_r;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  double trace_sqrt = 0.0;
  for (int64_t i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()(i);
    if (ev < -1e-6) throw std::runtime_error("compute_fid: covariance product has eigenvalue " + std::to_string(ev));
    trace_sqrt += std::sqrt(std::max(ev, 0.0));
  }
  const double fid = (mu_r - mu_g).squaredNorm() + s_r.trace() + s_g.trace() - 2.0 * trace_sqrt;
  if (!std::isfinite(fid)) throw std::runtime_error("compute_fid: non-finite result");
  return std::max(fid, 0.0);
}

PrecisionRecall knn_precision_recall(const FeatureSet& real, const FeatureSet& gen, int k) {
  check_features(real, gen, "knn_precision_recall");
  if (k < 1 || k >= std::min(real.size(), gen.size())) {
    throw std::invalid_argument("knn_precision_recall: need 1 <= k < min(N_real, N_gen)");
  }
  const std::vector<double> r_real = knn_radii_sq(real.x, k);
  const std::vector<double> r_gen = knn_radii_sq(gen.x, k);
  PrecisionRecall pr;
  pr.precision = coverage(real.x, r_real, gen.x);
  pr.recall = coverage(gen.x, r_gen, real.x);
  pr.degenerate = std::all_of(r_real.begin(), r_real.end(), [](double r) { return r == 0.0; }) ||
                  std::all_of(r_gen.begin(), r_gen.end(), [](double r) { return r == 0.0; });
  return pr;
}

std::vector<int> nn_classify(const ImageBatch& queries, const datasets::DomainDataset& reference) {
  queries.validate(/*require_unit_range=*/false);
  if (reference.empty()) throw std::invalid_argument("nn_classify: empty reference set");
  if (queries.height() != reference.resolution || queries.width() != reference.resolution) {
    throw std::invalid_argument("nn_classify: query resolution " + std::to_string(queries.height()) +
                                " does not match reference resolution " + std::to_string(reference.resolution));
  }
  const int64_t per = queries.height() * queries.width();
  std::vector<float> ref(static_cast<size_t>(reference.size() * per));
  for (int64_t r = 0; r < reference.size(); ++r) {
    const auto& px = reference.items[static_cast<size_t>(r)].pixels;
    for (int64_t j = 0; j < per; ++j) ref[static_cast<size_t>(r * per + j)] = datasets::normalize_pixel(px[static_cast<size_t>(j)]);
  }
  std::vector<int> out;
  for (int64_t q = 0; q < queries.size(); ++q) {
    const float* qp = queries.pixels.ptr() + q * per;
    double best = INFINITY;
    int64_t best_idx = 0;
    for (int64_t r = 0; r < reference.size(); ++r) {
      const float* rp = ref.data() + r * per;
      double d = 0.0;
      for (int64_t j = 0; j < per; ++j) d += std::abs(static_cast<double>(qp[j]) - rp[j]);
      if (d < best) {
        best = d;
        best_idx = r;
      }
    }
    out.push_back(reference.items[static_cast<size_t>(best_idx)].label);
  }
  return out;
}

double nn_classify_accuracy(const ImageBatch& queries, const datasets::DomainDataset& reference) {
  if (queries.size() == 0) throw std::invalid_argument("nn_classify_accuracy: no queries");
  const std::vector<int> pred = nn_classify(queries, reference);
  int64_t correct = 0;
  for (size_t i = 0; i < pred.size(); ++i) correct += pred[i] == queries.classes[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

OcrGain ocr_gain_experiment(const datasets::DomainDataset& hw_test, const datasets::DomainDataset& hw_train,
                            const datasets::DomainDataset& mp_train, const BatchConverter& converter) {
  const ImageBatch queries = hw_test.all();
  OcrGain g;
  g.baseline_accuracy = nn_classify_accuracy(queries, hw_train);
  g.converted_accuracy = nn_classify_accuracy(converter(queries), mp_train);
  return g;
}

double mean_pixel_l1(const ImageBatch& a, const ImageBatch& b) {
  check_same_shape(a.pixels, b.pixels, "mean_pixel_l1");
  if (a.pixels.numel() == 0) throw std::invalid_argument("mean_pixel_l1: empty batch");
  double acc = 0.0;
  for (int64_t i = 0; i < a.pixels.numel(); ++i) acc += std::abs(static_cast<double>(a.pixels[i]) - b.pixels[i]);
  return acc / static_cast<double>(a.pixels.numel());
}

}  // namespace cycledm::evaluation
