#include "commands.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "cycledm/checkpoint.hpp"
#include "cycledm/conversion/pipeline.hpp"
#include "cycledm/datasets/image_io.hpp"
#include "cycledm/datasets/synthetic.hpp"
#include "cycledm/evaluation/metrics.hpp"
#include "cycledm/evaluation/report.hpp"

#ifndef CYCLEDM_VERSION
#define CYCLEDM_VERSION "unknown"
#endif

namespace cycledm::cli {
namespace fs = std::filesystem;
namespace {

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kSidecarName = "glyphs.json";
constexpr int64_t kConvertChunk = 64;

// Exclusive ownership of an output directory for the lifetime of a run.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw std::runtime_error("output directory " + dir.string() + " is locked by another run (remove " +
                               path_.string() + " if that run is gone)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd, pid.data(), pid.size()) < 0) {
      ::close(fd);
      throw std::runtime_error("cannot write " + path_.string());
    }
    ::close(fd);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

// SHA-256 of a file, or of the sorted (relative path, file hash) list of a
// directory tree.
std::string content_digest(const fs::path& p) {
  if (fs::is_regular_file(p)) return sha256_file(p);
  if (!fs::is_directory(p)) throw ValidationError({"input not found: " + p.string()});
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& e : fs::recursive_directory_iterator(p)) {
    if (e.is_regular_file()) entries.emplace_back(fs::relative(e.path(), p).generic_string(), sha256_file(e.path()));
  }
  std::sort(entries.begin(), entries.end());
  std::string text;
  for (const auto& [rel, h] : entries) text += rel + "\t" + h + "\n";
  return sha256_hex({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

class Manifest {
 public:
  Manifest(std::string subcommand, const RunConfig& cfg, const Args& args) {
    j_["tool"] = "cycledm";
    j_["version"] = CYCLEDM_VERSION;
    j_["subcommand"] = std::move(subcommand);
    j_["seed"] = cfg.seed();
    j_["config"] = cfg.to_json();
    j_["config_hash"] = cfg.hash();
    j_["args"] = args;
    j_["streams"] = nlohmann::json::array();
    j_["inputs"] = nlohmann::json::object();
    j_["outputs"] = nlohmann::json::object();
  }

  void stream(const std::string& name) { j_["streams"].push_back(name); }
  void input(const std::string& name, const fs::path& path) {
    j_["inputs"][name] = {{"path", fs::absolute(path).string()}, {"sha256", content_digest(path)}};
  }
  void info(const std::string& key, nlohmann::json value) { j_["info"][key] = std::move(value); }

  // Records every file under `out` except the manifest and the lock.
  void write(const fs::path& out) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(out)) {
      const std::string name = e.path().filename().string();
      if (e.is_regular_file() && name != kManifestName && name != ".lock") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) j_["outputs"][fs::relative(f, out).generic_string()] = sha256_file(f);
    std::ofstream os(out / kManifestName, std::ios::trunc);
    os << j_.dump(2) << '\n';
    if (!os) throw std::runtime_error("cannot write manifest in " + out.string());
  }

 private:
  nlohmann::json j_;
};

struct Data {
  datasets::DomainDataset hw, mp, hw_train, hw_test, mp_train, mp_test;

  const datasets::DomainDataset& split(Domain d, datasets::Split s) const {
    const bool hw_side = d == Domain::kHandwritten;
    switch (s) {
      case datasets::Split::kTrain: return hw_side ? hw_train : mp_train;
      case datasets::Split::kTest: return hw_side ? hw_test : mp_test;
      default: return hw_side ? hw : mp;
    }
  }
};

void report_warnings(const datasets::LoadReport& rep, const std::string& what) {
  for (const auto& w : rep.warnings) std::cerr << "warning (" << what << "): " << w << "\n";
}

Data load_data(const RunConfig& cfg, Manifest& m) {
  Data d;
  const std::string& source = cfg.get_string("data.source");
  datasets::LoadOptions opts;
  opts.resolution = static_cast<int>(cfg.get_int("data.resolution"));
  opts.invert = cfg.get_bool("data.invert");
  try {
    if (source == "synthetic") {
      std::tie(d.hw, d.mp) = datasets::generate_synthetic(cfg.synthetic());
      m.info("synthetic_spec", cfg.synthetic().to_json());
    } else {
      datasets::LoadReport rep;
      if (source == "images") {
        m.input("data.hw_dir", cfg.get_string("data.hw_dir"));
        d.hw = datasets::load_image_directory(cfg.get_string("data.hw_dir"), Domain::kHandwritten, opts, &rep);
        report_warnings(rep, "data.hw_dir");
      } else {
        m.input("data.emnist_images", cfg.get_string("data.emnist_images"));
        m.input("data.emnist_labels", cfg.get_string("data.emnist_labels"));
        datasets::EmnistOptions eo;
        eo.resolution = opts.resolution;
        d.hw = datasets::load_emnist_letters(cfg.get_string("data.emnist_images"), cfg.get_string("data.emnist_labels"),
                                             eo);
      }
      datasets::LoadReport rep_mp;
      m.input("data.mp_dir", cfg.get_string("data.mp_dir"));
      d.mp = datasets::load_image_directory(cfg.get_string("data.mp_dir"), Domain::kPrinted, opts, &rep_mp);
      report_warnings(rep_mp, "data.mp_dir");
    }
  } catch (const std::invalid_argument& e) {
    throw ValidationError({std::string("data: ") + e.what()});
  }
  const double frac = cfg.get_double("data.train_fraction");
  const uint64_t split_seed = static_cast<uint64_t>(cfg.get_int("data.seed"));
  std::tie(d.hw_train, d.hw_test) = datasets::split_dataset(d.hw, frac, split_seed);
  std::tie(d.mp_train, d.mp_test) = datasets::split_dataset(d.mp, frac, split_seed);
  return d;
}

void write_data_manifest(const Data& d, const fs::path& out) {
  const datasets::DomainDataset* parts[] = {&d.hw_train, &d.hw_test, &d.mp_train, &d.mp_test};
  datasets::write_manifest(out / "data_manifest.tsv", parts);
}

void write_sidecar(const fs::path& dir, const nlohmann::json& j) {
  std::ofstream os(dir / kSidecarName, std::ios::trunc);
  os << j.dump(2) << '\n';
}

nlohmann::json read_sidecar(const fs::path& dir) {
  std::ifstream is(dir / kSidecarName);
  if (!is) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError({"malformed " + (dir / kSidecarName).string() + ": " + e.what()});
  }
}

std::string arg_string(const Args& args, const char* key) {
  return args.contains(key) && args[key].is_string() ? args[key].get<std::string>() : std::string();
}

fs::path required_path(const Args& args, const char* key, const char* flag) {
  const std::string v = arg_string(args, key);
  if (v.empty()) throw ValidationError({std::string(flag) + " is required"});
  if (!fs::exists(v)) throw ValidationError({std::string(flag) + ": " + v + " does not exist"});
  return v;
}

Direction direction_arg(const std::string& s) {
  std::string v = s;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "hw2mp" || v == "hw->mp") return Direction::kHwToMp;
  if (v == "mp2hw" || v == "mp->hw") return Direction::kMpToHw;
  throw ValidationError({"--direction must be hw2mp or mp2hw (got '" + s + "')"});
}

std::string domain_dir_name(Domain d) { return d == Domain::kHandwritten ? "hw" : "mp"; }

void write_loss_log(const fs::path& path, const std::vector<std::string>& header,
                    const std::vector<std::vector<double>>& rows) {
  std::ofstream os(path, std::ios::trunc);
  os << "step";
  for (const auto& h : header) os << '\t' << h;
  os << '\n';
  char buf[32];
  for (size_t i = 0; i < rows.size(); ++i) {
    os << i;
    for (double v : rows[i]) {
      std::snprintf(buf, sizeof(buf), "%.9g", v);
      os << '\t' << buf;
    }
    os << '\n';
  }
}

diffusion::DdpmModel load_ddpm_checked(const fs::path& path, const RunConfig& cfg) {
  diffusion::DdpmModel ddpm;
  try {
    ddpm = diffusion::load_ddpm(path);
  } catch (const CheckpointError& e) {
    throw ValidationError({std::string("--ddpm: ") + e.what()});
  }
  std::vector<std::string> p;
  const auto want = cfg.schedule();
  if (ddpm.schedule.steps() != want.steps()) p.push_back("schedule.T: config differs from the DDPM checkpoint");
  if (ddpm.schedule.beta_first() != want.beta_first()) {
    p.push_back("schedule.beta_1: config differs from the DDPM checkpoint");
  }
  if (ddpm.schedule.beta_last() != want.beta_last()) {
    p.push_back("schedule.beta_T: config differs from the DDPM checkpoint");
  }
  if (ddpm.network->config().image_size != cfg.get_int("data.resolution")) {
    p.push_back("data.resolution: config differs from the DDPM checkpoint");
  }
  if (!p.empty()) throw ValidationError(p);
  return ddpm;
}

// ---------------------------------------------------------------------------

void cmd_synth_data(const RunConfig& cfg, const Args&, Manifest& m, const fs::path& out) {
  const Data d = load_data(cfg, m);
  for (const auto* ds : {&d.hw, &d.mp, &d.hw_test, &d.mp_test}) {
    std::string name = domain_dir_name(ds->domain);
    if (ds->split == datasets::Split::kTest) name += "_test";
    datasets::write_image_directory(*ds, out / name);
    write_sidecar(out / name, {{"domain", std::string(domain_name(ds->domain))},
                               {"split", std::string(datasets::split_name(ds->split))}});
  }
  write_data_manifest(d, out);
  std::cerr << "wrote " << d.hw.size() << " HW and " << d.mp.size() << " MP glyphs to " << out.string() << "\n";
}

void cmd_train_ddpm(const RunConfig& cfg, const Args&, Manifest& m, const fs::path& out) {
  const Data d = load_data(cfg, m);
  write_data_manifest(d, out);
  auto model = diffusion::make_ddpm(cfg.unet(), cfg.get_bool("ddpm.per_domain"), cfg.schedule(), cfg.seed());
  for (const char* s : {"ddpm/init", "ddpm/data", "ddpm/null", "ddpm/noise"}) m.stream(s);
  const datasets::DomainDataset* train[] = {&d.hw_train, &d.mp_train};
  const auto hp = cfg.ddpm();
  const auto losses = diffusion::train_ddpm(model, train, hp, cfg.seed(), [&](int step, double loss) {
    if ((step + 1) % 100 == 0 || step + 1 == hp.steps) {
      std::cerr << "ddpm step " << step + 1 << "/" << hp.steps << " loss " << loss << "\n";
    }
  });
  std::vector<std::vector<double>> rows;
  for (double l : losses) rows.push_back({l});
  write_loss_log(out / "loss.tsv", {"loss"}, rows);
  diffusion::save_ddpm(out / "ddpm.ckpt", model);
  const auto sm = diffusion::smooth_endpoints(losses, std::max<size_t>(1, losses.size() / 20));
  m.info("loss_initial_smoothed", sm.initial);
  m.info("loss_final_smoothed", sm.final);
  m.info("fingerprint", model.fingerprint());
}

void cmd_train_converter(const RunConfig& cfg, const Args& args, Manifest& m, const fs::path& out) {
  const fs::path ddpm_path = required_path(args, "ddpm", "--ddpm");
  const auto ddpm = load_ddpm_checked(ddpm_path, cfg);
  m.input("ddpm", ddpm_path);
  const int t_star = static_cast<int>(cfg.get_int("conversion.t_star"));
  const Data d = load_data(cfg, m);
  write_data_manifest(d, out);
  auto pair = conversion::make_pair(t_star, cfg.converter(), cfg.conversion(), cfg.seed());
  for (const char* s : {"conversion/init/F", "conversion/init/G", "conversion/init/D", "conversion/init/D_prime",
                        "conversion/data", "conversion/noise", "conversion/gp"}) m.stream(s);
  const int steps = cfg.conversion().steps;
  const auto parts =
      conversion::train_conversion(pair, ddpm, d.hw_train, d.mp_train, cfg.seed(), [&](int step, const auto& p) {
        if ((step + 1) % 100 == 0 || step + 1 == steps) {
          std::cerr << "conversion step " << step + 1 << "/" << steps << " cycle " << p.cycle << " identity "
                    << p.identity << " G " << p.generator_total << " D " << p.discriminator_total << "\n";
        }
      });
  std::vector<std::vector<double>> rows;
  for (const auto& p : parts) {
    rows.push_back({p.adv_f, p.adv_g, p.cycle, p.identity, p.disc_d, p.disc_d_prime, p.gp_d, p.gp_d_prime,
                    p.generator_total, p.discriminator_total});
  }
  write_loss_log(out / "loss.tsv",
                 {"adv_f", "adv_g", "cycle", "identity", "disc_d", "disc_d_prime", "gp_d", "gp_d_prime",
                  "generator_total", "discriminator_total"},
                 rows);
  conversion::save_pair(out / "pair.ckpt", pair);
  m.info("ddpm_checkpoint_sha256", sha256_file(ddpm_path));
  m.info("pair_checkpoint_sha256", sha256_file(out / "pair.ckpt"));
}

void cmd_convert(const RunConfig& cfg, const Args& args, Manifest& m, const fs::path& out) {
  const fs::path ddpm_path = required_path(args, "ddpm", "--ddpm");
  const fs::path input = required_path(args, "input", "--input");
  const Direction dir = direction_arg(arg_string(args, "direction"));
  const std::string method = cfg.get_string("convert.method");
  const auto ddpm = load_ddpm_checked(ddpm_path, cfg);
  m.input("ddpm", ddpm_path);
  m.input("input", input);

  const nlohmann::json side = read_sidecar(input);
  if (side.contains("domain") && parse_domain(side["domain"].get<std::string>()) != source_domain(dir)) {
    throw ValidationError({"--direction " + std::string(direction_name(dir)) + " expects " +
                           std::string(domain_name(source_domain(dir))) + " input but " + input.string() +
                           " holds " + side["domain"].get<std::string>() + " glyphs"});
  }
  datasets::LoadOptions opts;
  opts.resolution = static_cast<int>(cfg.get_int("data.resolution"));
  opts.require_all_classes = false;
  datasets::DomainDataset src;
  try {
    datasets::LoadReport rep;
    src = datasets::load_image_directory(input, source_domain(dir), opts, &rep);
    report_warnings(rep, "--input");
  } catch (const std::invalid_argument& e) {
    throw ValidationError({std::string("--input: ") + e.what()});
  }
  if (src.empty()) throw ValidationError({"--input: no images in " + input.string()});

  std::optional<conversion::ConversionPair> pair;
  int t_star = static_cast<int>(cfg.get_int("conversion.t_star"));
  if (method == "cycledm") {
    const fs::path pair_path = required_path(args, "pair", "--pair");
    try {
      pair = conversion::load_pair(pair_path, &ddpm);
    } catch (const CheckpointError& e) {
      throw ValidationError({std::string("--pair: ") + e.what()});
    }
    m.input("pair", pair_path);
    if (args.contains("t_star") && args["t_star"].get<int>() != pair->t_star) {
      throw ValidationError({"--t-star " + std::to_string(args["t_star"].get<int>()) +
                             " differs from the pair's t_star " + std::to_string(pair->t_star)});
    }
    t_star = pair->t_star;
  } else if (args.contains("t_star")) {
    t_star = args["t_star"].get<int>();
  }
  if (t_star < 0 || t_star > ddpm.schedule.steps()) {
    throw ValidationError({"t_star " + std::to_string(t_star) + " outside [0, " +
                           std::to_string(ddpm.schedule.steps()) + "]"});
  }

  m.stream("convert/noise");
  RngStream rng = RngStream::derive(cfg.seed(), "convert/noise");
  std::vector<Tensor> chunks;
  std::vector<int> classes;
  for (int64_t b = 0; b < src.size(); b += kConvertChunk) {
    std::vector<int64_t> idx;
    for (int64_t i = b; i < std::min(src.size(), b + kConvertChunk); ++i) idx.push_back(i);
    const ImageBatch x0 = src.batch(idx);
    const ImageBatch y = method == "cycledm" ? conversion::convert(x0, dir, *pair, t_star, ddpm, rng)
                                             : conversion::sdedit_convert(x0, dir, t_star, ddpm, rng);
    chunks.push_back(y.pixels);
    classes.insert(classes.end(), y.classes.begin(), y.classes.end());
    std::cerr << "converted " << b + static_cast<int64_t>(idx.size()) << "/" << src.size() << "\n";
  }
  ImageBatch result{concat_rows(chunks), target_domain(dir), classes};
  std::vector<std::string> names;
  for (const auto& it : src.items) names.push_back(it.name);
  const auto converted = datasets::from_batch(result, names, method + ":" + std::string(direction_name(dir)));
  datasets::write_image_directory(converted, out / "images");
  write_sidecar(out / "images", {{"domain", std::string(domain_name(target_domain(dir)))},
                                 {"direction", std::string(direction_name(dir))},
                                 {"method", method},
                                 {"t_star", t_star}});
  const int cols = static_cast<int>(cfg.get_int("eval.grid_columns"));
  const std::vector<ImageBatch> rows{src.all(), converted.all()};
  evaluation::write_comparison_grid(out / "grid.png", rows, cols);
  m.info("t_star", t_star);
  m.info("method", method);
  m.info("count", src.size());
}

void cmd_evaluate(const RunConfig& cfg, const Args& args, Manifest& m, const fs::path& out) {
  const fs::path gen_dir = required_path(args, "generated", "--generated");
  m.input("generated", gen_dir);
  const nlohmann::json side = read_sidecar(gen_dir);
  std::string domain_s = arg_string(args, "domain");
  if (domain_s.empty() && side.contains("domain")) domain_s = side["domain"].get<std::string>();
  if (domain_s.empty()) throw ValidationError({"--domain is required when " + gen_dir.string() + " has no " + kSidecarName});
  Domain domain;
  try {
    domain = parse_domain(domain_s);
  } catch (const std::invalid_argument& e) {
    throw ValidationError({std::string("--domain: ") + e.what()});
  }
  const std::string split_s = args.value("reference_split", std::string("test"));
  datasets::Split split;
  if (split_s == "test") split = datasets::Split::kTest;
  else if (split_s == "train") split = datasets::Split::kTrain;
  else if (split_s == "all") split = datasets::Split::kAll;
  else throw ValidationError({"--reference-split must be train, test or all"});

  datasets::LoadOptions opts;
  opts.resolution = static_cast<int>(cfg.get_int("data.resolution"));
  opts.require_all_classes = false;
  datasets::DomainDataset gen;
  try {
    gen = datasets::load_image_directory(gen_dir, domain, opts);
  } catch (const std::invalid_argument& e) {
    throw ValidationError({std::string("--generated: ") + e.what()});
  }
  if (gen.empty()) throw ValidationError({"--generated: empty generated set in " + gen_dir.string()});

  const Data d = load_data(cfg, m);
  const datasets::DomainDataset& reference = d.split(domain, split);
  const int k = static_cast<int>(cfg.get_int("eval.k"));
  if (k >= std::min(gen.size(), reference.size())) {
    throw ValidationError({"eval.k: must be below both set sizes (" + std::to_string(gen.size()) + ", " +
                           std::to_string(reference.size()) + ")"});
  }

  std::unique_ptr<evaluation::FeatureExtractor> fx;
  const std::string fx_arg = arg_string(args, "extractor");
  if (!fx_arg.empty()) {
    if (!fs::exists(fx_arg)) throw ValidationError({"--extractor: " + fx_arg + " does not exist"});
    try {
      fx = evaluation::load_extractor(fx_arg);
    } catch (const CheckpointError& e) {
      throw ValidationError({std::string("--extractor: ") + e.what()});
    }
    m.input("extractor", fx_arg);
  } else if (args.value("no_train", false)) {
    throw ValidationError({"no --extractor checkpoint given and --no-train forbids training one"});
  } else {
    m.stream("extractor/init");
    m.stream("extractor/data");
    RngStream init = RngStream::derive(cfg.seed(), "extractor/init");
    fx = std::make_unique<evaluation::FeatureExtractor>(cfg.extractor(), init);
    const auto rep = evaluation::train_feature_extractor(*fx, d.hw_train, d.mp_train, d.hw_test, d.mp_test, cfg.seed());
    std::cerr << "extractor held-out accuracy " << rep.heldout_accuracy << " (domain "
              << rep.heldout_domain_accuracy << ")\n";
    evaluation::save_extractor(out / "extractor.ckpt", *fx);
  }
  if (fx->config().image_size != opts.resolution) {
    throw ValidationError({"--extractor: image size differs from data.resolution"});
  }

  const ImageBatch gen_batch = gen.all();
  const auto f_gen = fx->embed(gen_batch.pixels, "generated");
  const auto f_ref = fx->embed(reference.all().pixels, "reference");
  std::vector<std::string> warnings;
  evaluation::ReportInputs in;
  const std::string dir_s = arg_string(args, "direction");
  in.direction = !dir_s.empty()              ? direction_arg(dir_s)
                 : side.contains("direction") ? parse_direction(side["direction"].get<std::string>())
                 : (domain == Domain::kPrinted ? Direction::kHwToMp : Direction::kMpToHw);
  if (target_domain(*in.direction) != domain) throw ValidationError({"direction does not end in the generated domain"});
  const std::string method_s = arg_string(args, "method");
  in.method = !method_s.empty() ? method_s : side.value("method", std::string("reference"));
  in.t_star = args.contains("t_star") ? args["t_star"].get<int>() : side.value("t_star", 0);
  in.accuracy = evaluation::nn_classify_accuracy(gen_batch, reference);
  const auto pr = evaluation::knn_precision_recall(f_ref, f_gen, k);
  in.precision = pr.precision;
  in.recall = pr.recall;
  in.fid = evaluation::compute_fid(f_ref, f_gen, &warnings);
  in.n_generated = gen.size();
  in.n_reference = reference.size();
  in.seeds = {cfg.seed()};
  const auto report = evaluation::build_report(in);

  int64_t in_domain = 0;
  for (Domain p : fx->predict_domain(gen_batch.pixels)) in_domain += p == domain;
  const std::vector<evaluation::EvalReport> reports{report};
  evaluation::write_reports(out / "report.json", out / "report.txt", reports);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  if (pr.degenerate) std::cerr << "warning: a feature set has all-zero k-NN radii\n";
  m.info("domain_classifier_rate", static_cast<double>(in_domain) / static_cast<double>(gen.size()));
  m.info("warnings", warnings);
}

void cmd_grid(const RunConfig& cfg, const Args& args, Manifest& m, const fs::path& out) {
  if (!args.contains("rows") || args["rows"].empty()) throw ValidationError({"--rows needs at least one directory"});
  datasets::LoadOptions opts;
  opts.resolution = static_cast<int>(cfg.get_int("data.resolution"));
  opts.require_all_classes = false;
  std::vector<datasets::DomainDataset> sets;
  for (const auto& r : args["rows"]) {
    const fs::path p = r.get<std::string>();
    if (!fs::is_directory(p)) throw ValidationError({"--rows: " + p.string() + " is not a directory"});
    m.input("rows/" + std::to_string(sets.size()), p);
    try {
      sets.push_back(datasets::load_image_directory(p, Domain::kHandwritten, opts));
    } catch (const std::invalid_argument& e) {
      throw ValidationError({std::string("--rows: ") + e.what()});
    }
  }
  // Columns follow the first row; later rows contribute the same names.
  const size_t cols = std::min<size_t>(sets[0].items.size(), static_cast<size_t>(cfg.get_int("eval.grid_columns")));
  std::vector<ImageBatch> rows;
  for (const auto& s : sets) {
    std::map<std::pair<int, std::string>, int64_t> index;
    for (size_t i = 0; i < s.items.size(); ++i) index[{s.items[i].label, s.items[i].name}] = static_cast<int64_t>(i);
    std::vector<int64_t> pick;
    for (size_t c = 0; c < cols; ++c) {
      const auto it = index.find({sets[0].items[c].label, sets[0].items[c].name});
      if (it == index.end()) {
        throw ValidationError({"--rows: " + sets[0].items[c].name + " missing from a later row"});
      }
      pick.push_back(it->second);
    }
    rows.push_back(s.batch(pick));
  }
  evaluation::write_comparison_grid(out / "grid.png", rows, static_cast<int>(cols));
}

using Command = void (*)(const RunConfig&, const Args&, Manifest&, const fs::path&);

const std::map<std::string, Command>& commands() {
  static const std::map<std::string, Command> table = {
      {"synth-data", cmd_synth_data}, {"train-ddpm", cmd_train_ddpm}, {"train-converter", cmd_train_converter},
      {"convert", cmd_convert},       {"evaluate", cmd_evaluate},     {"grid", cmd_grid},
  };
  return table;
}

}  // namespace

void run_subcommand(const std::string& name, const RunConfig& cfg, const Args& args) {
  const auto it = commands().find(name);
  if (it == commands().end()) throw ValidationError({"unknown subcommand '" + name + "'"});
  cfg.validate();
  const fs::path out = cfg.get_string("out_dir");
  DirectoryLock lock(out);
  Manifest m(name, cfg, args);
  it->second(cfg, args, m, out);
  m.write(out);
}

std::vector<std::string> replay(const fs::path& manifest_path, const fs::path& out_dir, std::ostream& log) {
  std::ifstream is(manifest_path);
  if (!is) throw ValidationError({"cannot read manifest " + manifest_path.string()});
  nlohmann::json mj;
  try {
    mj = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError({"malformed manifest " + manifest_path.string() + ": " + e.what()});
  }
  if (mj.value("tool", "") != "cycledm" || !mj.contains("subcommand") || !mj.contains("config")) {
    throw ValidationError({manifest_path.string() + " is not a cycledm run manifest"});
  }
  std::vector<std::string> problems;
  const nlohmann::json inputs = mj.value("inputs", nlohmann::json::object());
  for (const auto& [name, in] : inputs.items()) {
    const fs::path p = in.at("path").get<std::string>();
    if (!fs::exists(p)) {
      problems.push_back("input " + name + " missing: " + p.string());
    } else if (content_digest(p) != in.at("sha256").get<std::string>()) {
      problems.push_back("input " + name + " changed since the recorded run: " + p.string());
    }
  }
  if (!problems.empty()) throw ValidationError(problems);

  RunConfig cfg = RunConfig::from_json(mj["config"]);
  if (cfg.hash() != mj.value("config_hash", "")) throw ValidationError({"manifest config does not match its hash"});
  if (fs::exists(out_dir) && fs::weakly_canonical(out_dir) == fs::weakly_canonical(manifest_path.parent_path())) {
    throw ValidationError({"replay output directory must differ from the recorded run"});
  }
  cfg.set("out_dir", out_dir.string());
  run_subcommand(mj["subcommand"].get<std::string>(), cfg, mj.value("args", nlohmann::json::object()));

  std::ifstream again(out_dir / kManifestName);
  const nlohmann::json fresh = nlohmann::json::parse(again);
  std::vector<std::string> differing;
  const auto& want = mj["outputs"];
  const auto& got = fresh["outputs"];
  for (const auto& [name, h] : want.items()) {
    const bool same = got.contains(name) && got[name] == h;
    log << (same ? "identical " : "DIFFERS   ") << name << "\n";
    if (!same) differing.push_back(name);
  }
  for (const auto& [name, h] : got.items()) {
    if (!want.contains(name)) {
      log << "EXTRA     " << name << "\n";
      differing.push_back(name);
    }
  }
  return differing;
}

int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"CycleDM: unpaired glyph style conversion between handwritten and printed letters"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(CYCLEDM_VERSION));

  struct Common {
    std::string config;
    std::optional<uint64_t> seed;
    std::vector<std::string> sets;
    std::string out;
  };
  std::map<std::string, Common> common;
  Args args = nlohmann::json::object();
  std::string s_ddpm, s_pair, s_input, s_direction, s_method, s_generated, s_split = "test", s_extractor, s_domain;
  std::string s_manifest, s_replay_out;
  std::optional<int> t_star;
  std::vector<std::string> rows;
  bool no_train = false;

  auto add_common = [&](CLI::App* sub) {
    Common& c = common[sub->get_name()];
    sub->add_option("--config", c.config, "configuration file (key = value lines)");
    sub->add_option("--seed", c.seed, "root seed (overrides the config key 'seed')");
    sub->add_option("--set", c.sets, "override one key, as key=value; repeatable")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
        ->expected(1);
    sub->add_option("--out", c.out, "output directory (overrides out_dir)");
    return sub;
  };

  add_common(app.add_subcommand("synth-data", "render the synthetic glyph benchmark to image directories"));
  add_common(app.add_subcommand("train-ddpm", "train the class- and domain-conditional DDPM"));
  auto* tc = add_common(app.add_subcommand("train-converter", "train F, G and their discriminators at t_star"));
  tc->add_option("--ddpm", s_ddpm, "DDPM checkpoint")->required();
  tc->add_option("--t-star", t_star, "conversion timestep (overrides conversion.t_star)");
  auto* cv = add_common(app.add_subcommand("convert", "convert a glyph directory into the other domain"));
  cv->add_option("--ddpm", s_ddpm, "DDPM checkpoint")->required();
  cv->add_option("--pair", s_pair, "conversion pair checkpoint (method cycledm)");
  cv->add_option("--input", s_input, "glyph directory (<letter>/<name>.png)")->required();
  cv->add_option("--direction", s_direction, "hw2mp or mp2hw")->required();
  cv->add_option("--method", s_method, "cycledm or sdedit (overrides convert.method)");
  cv->add_option("--t-star", t_star, "SDEdit start timestep; must match the pair for cycledm");
  auto* ev = add_common(app.add_subcommand("evaluate", "accuracy, precision, recall and FID of a glyph directory"));
  ev->add_option("--generated", s_generated, "glyph directory to evaluate")->required();
  ev->add_option("--reference-split", s_split, "train, test or all");
  ev->add_option("--extractor", s_extractor, "feature extractor checkpoint");
  ev->add_flag("--no-train", no_train, "fail instead of training a feature extractor");
  ev->add_option("--domain", s_domain, "domain of the generated glyphs when the directory does not say");
  ev->add_option("--direction", s_direction, "direction label of the report");
  ev->add_option("--method", s_method, "method label of the report");
  ev->add_option("--t-star", t_star, "timestep label of the report");
  auto* gr = add_common(app.add_subcommand("grid", "tile glyph directories into one comparison image"));
  gr->add_option("--rows", rows, "glyph directories, one grid row each")->required();
  auto* sc = add_common(app.add_subcommand("config", "print the effective configuration"));
  sc->add_flag("--schema", no_train, "print the key schema instead");
  auto* rp = app.add_subcommand("replay", "re-run a recorded subcommand and compare its outputs");
  rp->add_option("--manifest", s_manifest, "manifest.json of the recorded run")->required();
  rp->add_option("--out", s_replay_out, "fresh output directory")->required();

  std::vector<std::string> reversed(argv.rbegin(), argv.rend() - 1);
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    if (name == "replay") {
      const auto diffs = replay(s_manifest, s_replay_out, out);
      if (!diffs.empty()) {
        err << "replay: " << diffs.size() << " output(s) differ from the recorded run\n";
        return kExitRuntime;
      }
      out << "replay: all outputs identical\n";
      return kExitOk;
    }
    const Common& c = common[name];
    RunConfig cfg = c.config.empty() ? RunConfig() : RunConfig::load(c.config);
    std::vector<std::string> assignments = c.sets;
    if (c.seed) assignments.push_back("seed=" + std::to_string(*c.seed));
    if (!c.out.empty()) assignments.push_back("out_dir=" + c.out);
    if (!s_method.empty() && name == "convert") assignments.push_back("convert.method=" + s_method);
    if (t_star && name == "train-converter") assignments.push_back("conversion.t_star=" + std::to_string(*t_star));
    // Report bad overrides together with the range problems of the rest.
    std::vector<std::string> problems;
    try {
      cfg.apply_overrides(assignments);
    } catch (const ValidationError& e) {
      problems = e.problems();
    }
    try {
      cfg.validate();
    } catch (const ValidationError& e) {
      problems.insert(problems.end(), e.problems().begin(), e.problems().end());
    }
    if (!problems.empty()) throw ValidationError(problems);
    if (name == "config") {
      if (no_train) {
        out << describe_schema();
      } else {
        out << cfg.serialize();
      }
      return kExitOk;
    }
    auto abs = [](const std::string& p) { return p.empty() ? p : fs::absolute(p).string(); };
    if (name == "train-converter") {
      args["ddpm"] = abs(s_ddpm);
    } else if (name == "convert") {
      args["ddpm"] = abs(s_ddpm);
      if (!s_pair.empty()) args["pair"] = abs(s_pair);
      args["input"] = abs(s_input);
      args["direction"] = s_direction;
      if (t_star) args["t_star"] = *t_star;
    } else if (name == "evaluate") {
      args["generated"] = abs(s_generated);
      args["reference_split"] = s_split;
      if (!s_extractor.empty()) args["extractor"] = abs(s_extractor);
      args["no_train"] = no_train;
      if (!s_domain.empty()) args["domain"] = s_domain;
      if (!s_direction.empty()) args["direction"] = s_direction;
      if (!s_method.empty()) args["method"] = s_method;
      if (t_star) args["t_star"] = *t_star;
    } else if (name == "grid") {
      args["rows"] = nlohmann::json::array();
      for (const auto& r : rows) args["rows"].push_back(abs(r));
    }
    run_subcommand(name, cfg, args);
    if (name == "evaluate") out << std::ifstream(fs::path(cfg.get_string("out_dir")) / "report.txt").rdbuf();
    out << name << ": wrote " << cfg.get_string("out_dir") << "\n";
    return kExitOk;
  } catch (const ValidationError& e) {
    err << "error: invalid input\n";
    for (const auto& p : e.problems()) err << "  " << p << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace cycledm::cli
