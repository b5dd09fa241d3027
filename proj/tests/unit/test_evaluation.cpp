#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cycledm/datasets/image_io.hpp"
#include "cycledm/datasets/synthetic.hpp"
#include "cycledm/evaluation/metrics.hpp"
#include "cycledm/evaluation/report.hpp"
#include "doctest.h"
#include "temp_dir.hpp"

using namespace cycledm;
using namespace cycledm::evaluation;

namespace {

FeatureSet features(std::vector<std::vector<double>> rows) {
  FeatureSet f;
  f.x.resize(static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows[0].size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t j = 0; j < rows[i].size(); ++j) f.x(i, j) = rows[i][j];
  }
  return f;
}

FeatureSet gaussian(int n, int d, double shift, double scale, uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  FeatureSet f;
  f.x.resize(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) f.x(i, j) = shift + scale * nd(gen) + (j > 0 ? 0.3 * f.x(i, j - 1) : 0.0);
  }
  return f;
}

// Independent FID: plain-loop moments and a Denman-Beavers square root of the
// (non-symmetric) covariance product.
double fid_oracle(const FeatureSet& a, const FeatureSet& b) {
  const int64_t d = a.dim();
  auto stats = [d](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& s) {
    mu = Eigen::VectorXd::Zero(d);
    for (int64_t i = 0; i < x.rows(); ++i) mu += x.row(i).transpose();
    mu /= static_cast<double>(x.rows());
    s = Eigen::MatrixXd::Zero(d, d);
    for (int64_t i = 0; i < x.rows(); ++i) {
      for (int64_t p = 0; p < d; ++p) {
        for (int64_t q = 0; q < d; ++q) s(p, q) += (x(i, p) - mu(p)) * (x(i, q) - mu(q));
      }
    }
    s /= static_cast<double>(x.rows() - 1);
    s += 1e-6 * Eigen::MatrixXd::Identity(d, d);
  };
  Eigen::VectorXd ma, mb;
  Eigen::MatrixXd sa, sb;
  stats(a.x, ma, sa);
  stats(b.x, mb, sb);
  Eigen::MatrixXd y = sa * sb, z = Eigen::MatrixXd::Identity(d, d);
  for (int it = 0; it < 100; ++it) {
    const Eigen::MatrixXd yn = 0.5 * (y + z.inverse());
    const Eigen::MatrixXd zn = 0.5 * (z + y.inverse());
    y = yn;
    z = zn;
  }
  return (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * y.trace();
}

// Brute-force k-NN precision: fraction of probes within the k-th neighbour
// ball (Euclidean, self excluded, fully sorted) of some manifold point.
double coverage_oracle(const Eigen::MatrixXd& manifold, const Eigen::MatrixXd& probes, int k) {
  std::vector<double> radius(manifold.rows());
  for (int64_t i = 0; i < manifold.rows(); ++i) {
    std::vector<double> d;
    for (int64_t j = 0; j < manifold.rows(); ++j) {
      if (i != j) d.push_back((manifold.row(i) - manifold.row(j)).norm());
    }
    std::sort(d.begin(), d.end());
    radius[i] = d[k - 1];
  }
  int covered = 0;
  for (int64_t p = 0; p < probes.rows(); ++p) {
    bool in = false;
    for (int64_t i = 0; i < manifold.rows() && !in; ++i) in = (probes.row(p) - manifold.row(i)).norm() <= radius[i];
    covered += in;
  }
  return static_cast<double>(covered) / static_cast<double>(probes.rows());
}

datasets::DomainDataset random_dataset(Domain d, int n, int res, uint64_t seed) {
  std::mt19937_64 gen(seed);
  datasets::DomainDataset ds;
  ds.domain = d;
  ds.resolution = res;
  for (int i = 0; i < n; ++i) {
    datasets::GlyphItem it;
    it.label = static_cast<int>(gen() % 26);
    it.name = "r" + std::to_string(i);
    for (int p = 0; p < res * res; ++p) it.pixels.push_back(static_cast<uint8_t>(gen() % 256));
    ds.items.push_back(std::move(it));
  }
  return ds;
}

ReportInputs full_inputs() {
  ReportInputs in;
  in.direction = Direction::kHwToMp;
  in.method = "cycledm";
  in.t_star = 50;
  in.accuracy = 0.75;
  in.precision = 0.5;
  in.recall = 0.25;
  in.fid = 12.5;
  in.n_generated = 100;
  in.n_reference = 120;
  in.seeds = {0, 1, 2};
  return in;
}

}  // namespace

TEST_CASE("FID of a set with itself is zero") {
  const FeatureSet a = gaussian(200, 4, 0.0, 1.0, 1);
  CHECK(std::abs(compute_fid(a, a)) < 1e-9);
}

TEST_CASE("FID of unit-variance 1-D sets one apart is one") {
  // Both sets have sample variance exactly 1 and means 0 and 1.
  const FeatureSet a = features({{-1}, {0}, {1}});
  const FeatureSet b = features({{0}, {1}, {2}});
  CHECK(compute_fid(a, b) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("FID matches a Denman-Beavers oracle and is symmetric") {
  const FeatureSet a = gaussian(60, 3, 0.0, 1.0, 7);
  const FeatureSet b = gaussian(80, 3, 0.4, 1.7, 8);
  const double expect = fid_oracle(a, b);
  CHECK(compute_fid(a, b) == doctest::Approx(expect).epsilon(1e-6));
  CHECK(std::abs(compute_fid(a, b) - compute_fid(b, a)) < 1e-9);
}

TEST_CASE("FID warns when N <= d and rejects mismatched dimensions") {
  std::vector<std::string> warnings;
  compute_fid(gaussian(4, 5, 0, 1, 1), gaussian(4, 5, 0, 1, 2), &warnings);
  CHECK(warnings.size() == 1);
  CHECK_THROWS_AS(compute_fid(gaussian(10, 2, 0, 1, 1), gaussian(10, 3, 0, 1, 1)), std::invalid_argument);
  CHECK_THROWS_AS(compute_fid(gaussian(1, 2, 0, 1, 1), gaussian(10, 2, 0, 1, 1)), std::invalid_argument);
}

TEST_CASE("k-NN precision/recall: identical sets and separated clusters") {
  const FeatureSet a = gaussian(30, 2, 0.0, 1.0, 3);
  const PrecisionRecall same = knn_precision_recall(a, a, 3);
  CHECK(same.precision == 1.0);
  CHECK(same.recall == 1.0);
  CHECK_FALSE(same.degenerate);
  const PrecisionRecall far = knn_precision_recall(a, gaussian(30, 2, 100.0, 1.0, 4), 3);
  CHECK(far.precision == 0.0);
  CHECK(far.recall == 0.0);
}

TEST_CASE("k-NN precision/recall matches brute force and is order invariant") {
  const FeatureSet real = gaussian(20, 2, 0.0, 1.0, 11);
  const FeatureSet gen = gaussian(20, 2, 0.8, 1.3, 12);
  for (int k : {1, 3, 5}) {
    const PrecisionRecall pr = knn_precision_recall(real, gen, k);
    CHECK(pr.precision == doctest::Approx(coverage_oracle(real.x, gen.x, k)));
    CHECK(pr.recall == doctest::Approx(coverage_oracle(gen.x, real.x, k)));
  }
  FeatureSet shuffled = gen;
  std::vector<int> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937(5));
  for (int i = 0; i < 20; ++i) shuffled.x.row(i) = gen.x.row(perm[i]);
  const PrecisionRecall a = knn_precision_recall(real, gen, 3), b = knn_precision_recall(real, shuffled, 3);
  CHECK(a.precision == b.precision);
  CHECK(a.recall == b.recall);
  CHECK_THROWS_AS(knn_precision_recall(real, gen, 20), std::invalid_argument);
}

TEST_CASE("k-NN flags sets with all-zero radii as degenerate") {
  const FeatureSet pts = features({{1, 1}, {1, 1}, {1, 1}, {1, 1}});
  CHECK(knn_precision_recall(pts, gaussian(4, 2, 0, 1, 1), 2).degenerate);
}

TEST_CASE("nearest-neighbour classifier") {
  const datasets::DomainDataset ref = random_dataset(Domain::kPrinted, 30, 6, 21);
  SUBCASE("self classification is perfect") { CHECK(nn_classify_accuracy(ref.all(), ref) == 1.0); }
  SUBCASE("single-class reference predicts that class") {
    datasets::DomainDataset one = ref;
    for (auto& it : one.items) it.label = 4;
    for (int p : nn_classify(random_dataset(Domain::kHandwritten, 10, 6, 22).all(), one)) CHECK(p == 4);
  }
  SUBCASE("matches brute force L1") {
    const ImageBatch q = random_dataset(Domain::kHandwritten, 10, 6, 23).all();
    const std::vector<int> pred = nn_classify(q, ref);
    for (int64_t i = 0; i < q.size(); ++i) {
      double best = 1e300;
      int label = -1;
      for (const auto& it : ref.items) {
        double d = 0;
        for (int p = 0; p < 36; ++p) d += std::abs(q.pixels[i * 36 + p] - datasets::normalize_pixel(it.pixels[p]));
        if (d < best) {
          best = d;
          label = it.label;
        }
      }
      CHECK(pred[i] == label);
    }
  }
  SUBCASE("ties go to the lowest reference index") {
    datasets::DomainDataset tie = ref;
    tie.items[1].pixels = tie.items[0].pixels;
    tie.items[0].label = 3;
    tie.items[1].label = 9;
    ImageBatch q = tie.batch(std::vector<int64_t>{1});
    CHECK(nn_classify(q, tie)[0] == 3);
  }
  SUBCASE("resolution mismatch is rejected") {
    CHECK_THROWS_AS(nn_classify(random_dataset(Domain::kHandwritten, 2, 5, 1).all(), ref), std::invalid_argument);
  }
}

TEST_CASE("OCR experiment with an identity converter onto identical references") {
  datasets::DomainDataset hw_train = random_dataset(Domain::kHandwritten, 40, 6, 31);
  datasets::DomainDataset mp_train = hw_train;
  mp_train.domain = Domain::kPrinted;
  const datasets::DomainDataset hw_test = random_dataset(Domain::kHandwritten, 15, 6, 32);
  const OcrGain g = ocr_gain_experiment(hw_test, hw_train, mp_train, [](const ImageBatch& b) {
    ImageBatch out = b;
    out.domain = Domain::kPrinted;
    return out;
  });
  CHECK(g.baseline_accuracy == g.converted_accuracy);
}

TEST_CASE("mean pixel L1") {
  ImageBatch a{Tensor({1, 2, 2, 1}, 0.5f), Domain::kHandwritten, {0}};
  ImageBatch b{Tensor({1, 2, 2, 1}, -0.25f), Domain::kHandwritten, {0}};
  CHECK(mean_pixel_l1(a, b) == doctest::Approx(0.75));
  ImageBatch c{Tensor({1, 2, 3, 1}, 0.0f), Domain::kHandwritten, {0}};
  CHECK_THROWS(mean_pixel_l1(a, c));
}

TEST_CASE("feature extractor: shapes, replay, accuracy and checkpoint") {
  datasets::SyntheticGlyphSpec spec;
  spec.resolution = 16;
  spec.per_class = 16;
  spec.seed = 5;
  const auto [hw, mp] = datasets::generate_synthetic(spec);
  const auto [hw_tr, hw_te] = datasets::split_dataset(hw, 0.75, 1);
  const auto [mp_tr, mp_te] = datasets::split_dataset(mp, 0.75, 1);

  ExtractorConfig cfg;
  cfg.image_size = 16;
  cfg.steps = 600;
  RngStream init_a = RngStream::derive(9, "extractor/init");
  FeatureExtractor a(cfg, init_a);
  const FeatureSet before = a.embed(hw_te.all().pixels, "hw");
  CHECK(before.size() == hw_te.size());
  CHECK(before.dim() == cfg.embed_dim);

  const ExtractorReport rep = train_feature_extractor(a, hw_tr, mp_tr, hw_te, mp_te, 9);
  MESSAGE("extractor held-out joint accuracy " << rep.heldout_accuracy << ", domain accuracy "
                                               << rep.heldout_domain_accuracy);
  CHECK(rep.heldout_accuracy >= 0.9);
  CHECK(rep.heldout_domain_accuracy >= 0.95);

  ExtractorConfig short_cfg = cfg;
  short_cfg.steps = 5;
  RngStream i1 = RngStream::derive(9, "extractor/init"), i2 = RngStream::derive(9, "extractor/init");
  FeatureExtractor r1(short_cfg, i1), r2(short_cfg, i2);
  train_feature_extractor(r1, hw_tr, mp_tr, hw_te, mp_te, 3);
  train_feature_extractor(r2, hw_tr, mp_tr, hw_te, mp_te, 3);
  CHECK(r1.embed(mp_te.all().pixels, "").x == r2.embed(mp_te.all().pixels, "").x);

  testing::TempDir dir;
  save_extractor(dir.path() / "fx.ckpt", a);
  const auto loaded = load_extractor(dir.path() / "fx.ckpt");
  CHECK(loaded->embed(hw_te.all().pixels, "").x == a.embed(hw_te.all().pixels, "").x);
  CHECK(loaded->training.at("heldout_accuracy").get<double>() == rep.heldout_accuracy);

  CHECK_THROWS_AS(a.embed(Tensor({1, 8, 8, 1}), ""), std::invalid_argument);
}

TEST_CASE("report requires every field") {
  CHECK_NOTHROW(build_report(full_inputs()));
  auto missing = [](auto clear, const char* field) {
    ReportInputs in = full_inputs();
    clear(in);
    try {
      build_report(in);
      FAIL("expected an error for " << field);
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find(field) != std::string::npos);
    }
  };
  missing([](ReportInputs& in) { in.direction.reset(); }, "direction");
  missing([](ReportInputs& in) { in.method.reset(); }, "method");
  missing([](ReportInputs& in) { in.t_star.reset(); }, "t_star");
  missing([](ReportInputs& in) { in.accuracy.reset(); }, "accuracy");
  missing([](ReportInputs& in) { in.precision.reset(); }, "precision");
  missing([](ReportInputs& in) { in.recall.reset(); }, "recall");
  missing([](ReportInputs& in) { in.fid.reset(); }, "fid");
  missing([](ReportInputs& in) { in.n_generated.reset(); }, "n_generated");
  missing([](ReportInputs& in) { in.n_reference.reset(); }, "n_reference");
  ReportInputs bad = full_inputs();
  bad.recall = 1.5;
  CHECK_THROWS_AS(build_report(bad), std::invalid_argument);
}

TEST_CASE("report JSON round trip and table layout") {
  const EvalReport r = build_report(full_inputs());
  CHECK(EvalReport::from_json(nlohmann::json::parse(r.to_json().dump())) == r);
  const std::vector<EvalReport> rs{r};
  const std::string table = render_table(rs);
  const std::string header = table.substr(0, table.find('\n'));
  const size_t acc = header.find("Accuracy"), prec = header.find("Precision"), rec = header.find("Recall"),
               fid = header.find("FID");
  CHECK(acc < prec);
  CHECK(prec < rec);
  CHECK(rec < fid);
  CHECK(fid != std::string::npos);
  CHECK(table.find("0.750") != std::string::npos);
  CHECK(table.find("12.50") != std::string::npos);

  testing::TempDir dir;
  write_reports(dir.path() / "r.json", dir.path() / "r.txt", rs);
  CHECK(read_reports(dir.path() / "r.json") == rs);
}

TEST_CASE("comparison grid tiles rows and columns") {
  testing::TempDir dir;
  ImageBatch a{Tensor({3, 4, 4, 1}, 1.0f), Domain::kHandwritten, {0, 1, 2}};
  ImageBatch b{Tensor({2, 4, 4, 1}, -1.0f), Domain::kPrinted, {0, 1}};
  const std::vector<ImageBatch> rows{a, b};
  write_comparison_grid(dir.path() / "g.png", rows, 8);
  const datasets::GrayImage img = datasets::read_png_gray8(dir.path() / "g.png");
  CHECK(img.width == 3 * 5 - 1);
  CHECK(img.height == 2 * 5 - 1);
  CHECK(img.pixels[0] == 255);
  CHECK(img.pixels[5 * img.width] == 0);
  CHECK(img.pixels[4] == 128);
  ImageBatch c{Tensor({1, 5, 5, 1}, 0.0f), Domain::kPrinted, {0}};
  const std::vector<ImageBatch> mixed{a, c};
  CHECK_THROWS_AS(write_comparison_grid(dir.path() / "x.png", mixed, 8), std::invalid_argument);
}
