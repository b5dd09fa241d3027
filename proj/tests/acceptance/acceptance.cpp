// End-to-end acceptance run on the synthetic desk benchmark. Prints one
// PASS/FAIL line per criterion and writes the same summary, with the measured
// values, to <work>/acceptance_report.txt.
#include <malloc.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "cycledm/checkpoint.hpp"
#include "cycledm/conversion/losses.hpp"
#include "cycledm/conversion/pipeline.hpp"
#include "cycledm/datasets/image_io.hpp"
#include "cycledm/diffusion/process.hpp"
#include "cycledm/diffusion/training.hpp"
#include "cycledm/evaluation/features.hpp"
#include "cycledm/evaluation/metrics.hpp"
#include "cycledm/evaluation/report.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cycledm;

namespace {

constexpr int kSeeds[] = {0, 1, 2};
constexpr int kTStars[] = {40, 50, 60};  // low, mid, high
constexpr int kBenchmarkTStar = 50;
constexpr int kQueriesPerClass = 4;
constexpr double kBenchmarkBudgetSeconds = 30 * 60;
constexpr double kOracleBudgetSeconds = 120;

double now() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

class Report {
 public:
  explicit Report(fs::path path) : path_(std::move(path)) {}
  void note(const std::string& line) {
    std::cout << "  " << line << std::endl;
    lines_.push_back("  " + line);
  }
  void verdict(int criterion, bool pass, const std::string& what) {
    const std::string line =
        std::string(pass ? "PASS" : "FAIL") + " criterion " + std::to_string(criterion) + ": " + what;
    std::cout << line << std::endl;
    lines_.push_back(line);
    all_pass_ = all_pass_ && pass;
    std::ofstream os(path_, std::ios::trunc);
    for (const auto& l : lines_) os << l << '\n';
  }
  bool all_pass() const { return all_pass_; }

 private:
  fs::path path_;
  std::vector<std::string> lines_;
  bool all_pass_ = true;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

void cli_or_throw(std::vector<std::string> args) {
  args.insert(args.begin(), "cycledm");
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  if (code != 0) throw std::runtime_error("cycledm " + args[1] + " failed (" + std::to_string(code) + "): " + err.str());
}

// Column `name` of a tab-separated loss log.
std::vector<double> read_column(const fs::path& tsv, const std::string& name) {
  std::ifstream is(tsv);
  std::string line;
  std::getline(is, line);
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string h;
    while (std::getline(hs, h, '\t')) header.push_back(h);
  }
  const auto col = std::find(header.begin(), header.end(), name) - header.begin();
  if (col == static_cast<long>(header.size())) throw std::runtime_error("no column " + name + " in " + tsv.string());
  std::vector<double> values;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string cell;
    for (long i = 0; i <= col; ++i) std::getline(ls, cell, '\t');
    values.push_back(std::stod(cell));
  }
  return values;
}

double smoothed_drop(const std::vector<double>& v) {
  const auto sm = diffusion::smooth_endpoints(v, std::max<size_t>(1, v.size() / 20));
  return 1.0 - sm.final / sm.initial;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  return nlohmann::json::parse(is);
}

ImageBatch stratified_queries(const datasets::DomainDataset& ds, int per_class) {
  std::map<int, int> taken;
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < ds.size(); ++i) {
    if (taken[ds.items[static_cast<size_t>(i)].label]++ < per_class) idx.push_back(i);
  }
  return ds.batch(idx);
}

// Criterion 1: the math-oracle suite is the unit test binary.
void criterion_oracles(Report& rep, const std::string& unit_binary) {
  const double t0 = now();
  const std::string cmd = unit_binary + " --no-intro=true --minimal=true > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  const double elapsed = now() - t0;
  const bool ok = status != -1 && WIFEXITED(status) && WEXITSTATUS(status) == 0;
  rep.note("unit/oracle suite exit status " + std::to_string(WEXITSTATUS(status)) + ", " + fmt("%.1f s", elapsed));
  rep.verdict(1, ok && elapsed < kOracleBudgetSeconds, "math-oracle suite passes in under 2 minutes");
}

// Criterion 2: the zero and identity cases, checked exactly.
void criterion_trivial(Report& rep, const diffusion::DdpmModel& ddpm, const datasets::DomainDataset& hw_test,
                       const datasets::DomainDataset& mp_test) {
  std::vector<std::string> failed;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  const ImageBatch x = stratified_queries(hw_test, 1);

  // Loss zero cases: identity maps have zero cycle and identity loss.
  const auto& id = conversion::identity_converter();
  const conversion::NoisyBatches nb{ag::Var(x.pixels), x.classes, ag::Var(x.pixels), x.classes};
  check(conversion::cycle_loss(id, id, nb).value().item() == 0.0f, "cycle loss of identity maps");
  check(conversion::identity_loss(id, id, nb).value().item() == 0.0f, "identity loss of identity maps");

  // FID and precision/recall of a set against itself.
  RngStream init = RngStream::derive(0, "acceptance/extractor");
  evaluation::ExtractorConfig ec;
  ec.image_size = static_cast<int>(x.height());
  const evaluation::FeatureExtractor fx(ec, init);
  const auto f = fx.embed(mp_test.all().pixels, "mp_test");
  check(std::abs(evaluation::compute_fid(f, f)) < 1e-6, "FID(X, X) ~ 0");
  const auto pr = evaluation::knn_precision_recall(f, f, 3);
  check(pr.precision == 1.0 && pr.recall == 1.0, "precision = recall = 1 on identical sets");

  // SDEdit from t = 0 returns its input.
  RngStream r0 = RngStream::derive(0, "acceptance/sdedit0");
  const ImageBatch same = conversion::sdedit_convert(x, Direction::kHwToMp, 0, ddpm, r0);
  check(same.pixels.vec() == x.pixels.vec(), "sdedit t_start = 0 identity");

  // Conversion training never touches the DDPM.
  const std::string before = ddpm.fingerprint();
  conversion::ConversionHyperparams hp;
  hp.steps = 2;
  hp.batch_size = 4;
  auto pair = conversion::make_pair(10, conversion::ConverterConfig{}, hp, 0);
  conversion::train_conversion(pair, ddpm, hw_test, mp_test, 0);
  check(ddpm.fingerprint() == before, "frozen DDPM fingerprint");

  for (const auto& f_name : failed) rep.note("failed: " + f_name);
  rep.verdict(2, failed.empty(), "zero/identity cases hold exactly");
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  if (argc < 3) {
    std::cerr << "usage: cycledm_acceptance <unit-test-binary> <work-dir>\n";
    return 2;
  }
  const std::string unit_binary = argv[1];
  const fs::path work = fs::absolute(argv[2]);
  fs::remove_all(work);
  fs::create_directories(work);
  Report rep(work / "acceptance_report.txt");

  try {
    criterion_oracles(rep, unit_binary);

    // ---- Criterion 3: the desk benchmark through the command line. ----
    const std::string seed0 = "0";
    const double t_bench = now();
    cli_or_throw({"synth-data", "--seed", seed0, "--out", (work / "data").string()});
    const double t_ddpm = now();
    cli_or_throw({"train-ddpm", "--seed", seed0, "--out", (work / "ddpm").string()});
    const double ddpm_seconds = now() - t_ddpm;
    const fs::path ddpm_ckpt = work / "ddpm" / "ddpm.ckpt";
    auto conv_dir = [&](int seed, int t) { return work / ("conv_s" + std::to_string(seed) + "_t" + std::to_string(t)); };
    cli_or_throw({"train-converter", "--seed", seed0, "--ddpm", ddpm_ckpt.string(), "--t-star",
                  std::to_string(kBenchmarkTStar), "--out", conv_dir(0, kBenchmarkTStar).string()});
    const fs::path bench_pair = conv_dir(0, kBenchmarkTStar) / "pair.ckpt";
    cli_or_throw({"convert", "--seed", seed0, "--ddpm", ddpm_ckpt.string(), "--pair", bench_pair.string(), "--input",
                  (work / "data" / "hw_test").string(), "--direction", "hw2mp", "--out",
                  (work / "converted").string()});
    cli_or_throw({"evaluate", "--seed", seed0, "--generated", (work / "converted" / "images").string(), "--out",
                  (work / "eval_converted").string()});
    const fs::path extractor = work / "eval_converted" / "extractor.ckpt";
    cli_or_throw({"evaluate", "--seed", seed0, "--generated", (work / "data" / "hw_test").string(), "--domain", "MP",
                  "--direction", "hw2mp", "--method", "source", "--extractor", extractor.string(), "--no-train",
                  "--out", (work / "eval_source").string()});
    const double bench_seconds = now() - t_bench;

    const double ddpm_drop = smoothed_drop(read_column(work / "ddpm" / "loss.tsv", "loss"));
    const auto cyc = read_column(conv_dir(0, kBenchmarkTStar) / "loss.tsv", "cycle");
    const auto idl = read_column(conv_dir(0, kBenchmarkTStar) / "loss.tsv", "identity");
    std::vector<double> cyc_id(cyc.size());
    for (size_t i = 0; i < cyc.size(); ++i) cyc_id[i] = cyc[i] + idl[i];
    const double conv_drop = smoothed_drop(cyc_id);
    const double domain_rate = read_json(work / "eval_converted" / "manifest.json")["info"]["domain_classifier_rate"];
    const auto conv_report = evaluation::read_reports(work / "eval_converted" / "report.json").at(0);
    const auto src_report = evaluation::read_reports(work / "eval_source" / "report.json").at(0);
    rep.note("benchmark wall time " + fmt("%.0f s", bench_seconds) + " (DDPM training " + fmt("%.0f s", ddpm_seconds) +
             ")");
    rep.note("(a) DDPM smoothed loss drop " + fmt("%.1f%%", 100 * ddpm_drop));
    rep.note("(b) cycle+identity smoothed loss drop " + fmt("%.1f%%", 100 * conv_drop));
    rep.note("(c) converted images classified as MP " + fmt("%.1f%%", 100 * domain_rate));
    rep.note("(d) FID(converted, MP test) " + fmt("%.3f", conv_report.fid) + " vs FID(HW test, MP test) " +
             fmt("%.3f", src_report.fid));
    rep.note("converted HW->MP table:\n" + evaluation::render_table(std::vector{conv_report, src_report}));
    const bool c3 = ddpm_drop >= 0.5 && conv_drop >= 0.3 && domain_rate >= 0.8 && conv_report.fid < src_report.fid &&
                    bench_seconds <= kBenchmarkBudgetSeconds;
    rep.verdict(3, c3, "desk benchmark (a)-(d) within 30 minutes");

    // ---- Criterion 2 uses the trained benchmark model. ----
    const diffusion::DdpmModel ddpm = diffusion::load_ddpm(ddpm_ckpt);
    datasets::LoadOptions lo;
    lo.resolution = ddpm.network->config().image_size;
    const auto hw_test = datasets::load_image_directory(work / "data" / "hw_test", Domain::kHandwritten, lo);
    const auto mp_test = datasets::load_image_directory(work / "data" / "mp_test", Domain::kPrinted, lo);
    criterion_trivial(rep, ddpm, hw_test, mp_test);

    // ---- Criteria 4 and 5: three seeds, three t_star values. ----
    const ImageBatch queries = stratified_queries(hw_test, kQueriesPerClass);
    std::map<std::pair<int, int>, double> acc_cyc, acc_sde, l1_cyc;
    bool identity_exact = true;
    for (int seed : kSeeds) {
      for (int t : kTStars) {
        if (!(seed == 0 && t == kBenchmarkTStar)) {
          cli_or_throw({"train-converter", "--seed", std::to_string(seed), "--ddpm", ddpm_ckpt.string(), "--t-star",
                        std::to_string(t), "--out", conv_dir(seed, t).string()});
        }
        const auto pair = conversion::load_pair(conv_dir(seed, t) / "pair.ckpt", &ddpm);
        const std::string stream = "acceptance/convert/" + std::to_string(t);
        RngStream r_cyc = RngStream::derive(static_cast<uint64_t>(seed), stream);
        RngStream r_sde = RngStream::derive(static_cast<uint64_t>(seed), stream);
        const ImageBatch c = conversion::convert(queries, Direction::kHwToMp, pair, t, ddpm, r_cyc);
        const ImageBatch s = conversion::sdedit_convert(queries, Direction::kHwToMp, t, ddpm, r_sde);
        acc_cyc[{seed, t}] = evaluation::nn_classify_accuracy(c, mp_test);
        acc_sde[{seed, t}] = evaluation::nn_classify_accuracy(s, mp_test);
        l1_cyc[{seed, t}] = evaluation::mean_pixel_l1(c, queries);
        rep.note("seed " + std::to_string(seed) + " t*=" + std::to_string(t) + ": accuracy CycleDM " +
                 fmt("%.3f", acc_cyc[{seed, t}]) + " SDEdit " + fmt("%.3f", acc_sde[{seed, t}]) +
                 ", source-output L1 " + fmt("%.4f", l1_cyc[{seed, t}]));
        if (t == kBenchmarkTStar) {
          RngStream r_a = RngStream::derive(static_cast<uint64_t>(seed), "acceptance/identity");
          RngStream r_b = RngStream::derive(static_cast<uint64_t>(seed), "acceptance/identity");
          const ImageBatch via_identity = conversion::convert_with(conversion::identity_converter(), t, queries,
                                                                   Direction::kHwToMp, ddpm, r_a);
          const ImageBatch via_sdedit = conversion::sdedit_convert(queries, Direction::kHwToMp, t, ddpm, r_b);
          identity_exact = identity_exact && via_identity.pixels.vec() == via_sdedit.pixels.vec();
        }
      }
    }
    bool c4 = identity_exact;
    for (int t : kTStars) {
      int wins = 0;
      for (int seed : kSeeds) wins += acc_cyc[{seed, t}] >= acc_sde[{seed, t}];
      rep.note("t*=" + std::to_string(t) + ": CycleDM >= SDEdit in " + std::to_string(wins) + "/3 seeds");
      c4 = c4 && wins >= 2;
    }
    rep.note(std::string("identity converter reproduces SDEdit bit-exactly: ") + (identity_exact ? "yes" : "no"));
    rep.verdict(4, c4, "CycleDM accuracy >= SDEdit at every t* (seed majority) and identity reduction exact");

    int monotone_seeds = 0;
    for (int seed : kSeeds) {
      const bool mono = l1_cyc[{seed, kTStars[0]}] <= l1_cyc[{seed, kTStars[1]}] &&
                        l1_cyc[{seed, kTStars[1]}] <= l1_cyc[{seed, kTStars[2]}];
      monotone_seeds += mono;
      rep.note("seed " + std::to_string(seed) + " L1 over t* 40/50/60: " + fmt("%.4f", l1_cyc[{seed, 40}]) + " " +
               fmt("%.4f", l1_cyc[{seed, 50}]) + " " + fmt("%.4f", l1_cyc[{seed, 60}]) +
               (mono ? " (non-decreasing)" : " (not monotone)"));
    }
    rep.verdict(5, monotone_seeds >= 2, "source-output L1 non-decreasing in t* for >= 2 of 3 seeds");

    // ---- Criterion 6: replay recorded runs into fresh directories. ----
    cli_or_throw({"train-ddpm", "--seed", seed0, "--set", "ddpm.steps=100", "--out", (work / "ddpm_short").string()});
    std::vector<std::string> differing;
    const std::vector<std::string> replayed = {"data", "ddpm_short", "conv_s0_t50", "converted", "eval_converted"};
    for (const auto& run : replayed) {
      std::ostringstream log;
      const auto diffs = cli::replay(work / run / "manifest.json", work / (run + "_replay"), log);
      rep.note("replay " + run + ": " + (diffs.empty() ? "identical" : std::to_string(diffs.size()) + " differ"));
      for (const auto& d : diffs) differing.push_back(run + "/" + d);
    }
    rep.verdict(6, differing.empty(), "replayed runs are byte-identical");
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance run aborted: " << e.what() << std::endl;
    return 1;
  }
  return rep.all_pass() ? 0 : 1;
}
