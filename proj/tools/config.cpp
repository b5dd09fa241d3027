#include "config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cycledm/checkpoint.hpp"

namespace cycledm::cli {
namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

const KeySpec* find_spec(const std::string& key) {
  for (const auto& s : config_schema()) {
    if (s.key == key) return &s;
  }
  return nullptr;
}

bool parse_int(const std::string& v, int64_t& out) {
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  return ec == std::errc() && p == end && !v.empty();
}

bool parse_double(const std::string& v, double& out) {
  if (v.empty()) return false;
  try {
    size_t used = 0;
    out = std::stod(v, &used);
    return used == v.size() && std::isfinite(out);
  } catch (const std::exception&) {
    return false;
  }
}

// Canonical text for a value, or an error message.
std::string canonicalize(const KeySpec& spec, const std::string& raw, std::string& error) {
  const std::string v = trim(raw);
  switch (spec.type) {
    case ValueType::kInt: {
      int64_t x = 0;
      if (!parse_int(v, x)) error = "expected an integer";
      return std::to_string(x);
    }
    case ValueType::kDouble: {
      double x;
      if (!parse_double(v, x)) {
        error = "expected a finite number";
        return v;
      }
      char buf[32];
      const auto res = std::to_chars(buf, buf + sizeof(buf), x);  // shortest round-trip form
      return std::string(buf, res.ptr);
    }
    case ValueType::kBool:
      if (v == "true" || v == "1") return "true";
      if (v == "false" || v == "0") return "false";
      error = "expected true or false";
      return v;
    case ValueType::kString:
      return v;
    case ValueType::kIntList: {
      std::vector<std::string> items;
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) {
        int64_t x;
        if (!parse_int(trim(item), x)) {
          error = "expected a comma-separated list of integers";
          return v;
        }
        items.push_back(std::to_string(x));
      }
      if (items.empty()) error = "expected a non-empty list of integers";
      return join(items, ",");
    }
  }
  return v;
}

const char* type_name(ValueType t) {
  switch (t) {
    case ValueType::kInt: return "int";
    case ValueType::kDouble: return "float";
    case ValueType::kBool: return "bool";
    case ValueType::kString: return "string";
    case ValueType::kIntList: return "int list";
  }
  return "?";
}

}  // namespace

ValidationError::ValidationError(std::vector<std::string> problems)
    : std::runtime_error(join(problems, "\n")), problems_(std::move(problems)) {}

const std::vector<KeySpec>& config_schema() {
  using V = ValueType;
  static const std::vector<KeySpec> schema = {
      {"seed", V::kInt, "0", "root seed; every random stream is derived from it"},
      {"out_dir", V::kString, "run", "output directory of a subcommand"},
      {"data.source", V::kString, "synthetic", "synthetic | images | emnist"},
      {"data.seed", V::kInt, "0", "seed of synthetic generation and of the train/test split"},
      {"data.resolution", V::kInt, "32", "square image size in pixels"},
      {"data.train_fraction", V::kDouble, "0.7", "per-class share of items in the training split"},
      {"data.hw_dir", V::kString, "", "handwritten glyph directory (data.source = images)"},
      {"data.mp_dir", V::kString, "", "machine-printed glyph directory (images and emnist sources)"},
      {"data.invert", V::kBool, "false", "invert gray levels of loaded directories (dark-on-light sources)"},
      {"data.emnist_images", V::kString, "", "EMNIST letters IDX image file (data.source = emnist)"},
      {"data.emnist_labels", V::kString, "", "EMNIST letters IDX label file (data.source = emnist)"},
      {"synthetic.per_class", V::kInt, "20", "synthetic glyphs per class and domain"},
      {"synthetic.jitter", V::kDouble, "0.045", "handwritten warp amplitude"},
      {"synthetic.wobble", V::kDouble, "0.05", "handwritten stroke endpoint displacement"},
      {"synthetic.slant", V::kDouble, "0.25", "handwritten maximum shear"},
      {"synthetic.hw_stroke_width", V::kDouble, "1.3", "handwritten stroke width at 32 px"},
      {"synthetic.mp_stroke_width", V::kDouble, "2.6", "printed stroke width at 32 px"},
      {"synthetic.mp_width_variation", V::kDouble, "0.5", "printed stroke width spread between fonts"},
      {"synthetic.mp_aspect_variation", V::kDouble, "0.12", "printed aspect ratio spread between fonts"},
      {"synthetic.serifs", V::kBool, "true", "printed glyphs may carry serifs"},
      {"schedule.T", V::kInt, "100", "number of diffusion steps"},
      {"schedule.beta_1", V::kDouble, "0.001", "first noise variance"},
      {"schedule.beta_T", V::kDouble, "0.2", "last noise variance"},
      {"unet.base_channels", V::kInt, "16", "U-Net channels at full resolution"},
      {"unet.channel_mult", V::kIntList, "1,2,2", "channel multiplier per resolution level"},
      {"unet.groups", V::kInt, "8", "group-norm groups"},
      {"unet.embed_dim", V::kInt, "64", "time/class/domain embedding width"},
      {"ddpm.per_domain", V::kBool, "false", "one class embedding table per domain"},
      {"ddpm.steps", V::kInt, "3000", "DDPM optimizer steps"},
      {"ddpm.batch_size", V::kInt, "16", "DDPM batch size"},
      {"ddpm.learning_rate", V::kDouble, "0.001", "DDPM Adam learning rate"},
      {"ddpm.warmup_steps", V::kInt, "100", "linear learning-rate warmup"},
      {"ddpm.null_rate", V::kDouble, "0.1", "probability of training with the null class token"},
      {"ddpm.ema_decay", V::kDouble, "0.995", "EMA decay of the saved weights"},
      {"ddpm.grad_clip", V::kDouble, "1", "global gradient-norm clip (0 disables)"},
      {"conversion.t_star", V::kInt, "50", "timestep at which F and G convert"},
      {"conversion.steps", V::kInt, "600", "conversion training steps"},
      {"conversion.batch_size", V::kInt, "16", "conversion batch size per domain"},
      {"conversion.learning_rate", V::kDouble, "0.0002", "F and G Adam learning rate"},
      {"conversion.disc_learning_rate", V::kDouble, "0.0002", "D and D' Adam learning rate"},
      {"conversion.beta1", V::kDouble, "0.5", "Adam beta1 of the conversion optimizers"},
      {"conversion.lambda_cycle", V::kDouble, "2", "cycle-consistency weight"},
      {"conversion.lambda_identity", V::kDouble, "1", "identity weight"},
      {"conversion.gp_weight", V::kDouble, "10", "gradient-penalty weight"},
      {"converter.channels", V::kInt, "8", "F and G channels at full resolution"},
      {"converter.res_blocks", V::kInt, "2", "F and G residual blocks"},
      {"converter.groups", V::kInt, "4", "F and G group-norm groups"},
      {"converter.disc_channels", V::kInt, "16", "discriminator channels of the first layer"},
      {"converter.disc_layers", V::kInt, "3", "discriminator strided layers"},
      {"convert.method", V::kString, "cycledm", "cycledm | sdedit"},
      {"eval.k", V::kInt, "3", "neighbour index of the precision/recall radii"},
      {"eval.extractor_channels", V::kInt, "16", "feature extractor channels"},
      {"eval.extractor_embed_dim", V::kInt, "32", "feature dimension"},
      {"eval.extractor_steps", V::kInt, "800", "feature extractor training steps"},
      {"eval.extractor_batch_size", V::kInt, "32", "feature extractor batch size"},
      {"eval.extractor_learning_rate", V::kDouble, "0.002", "feature extractor peak learning rate"},
      {"eval.grid_columns", V::kInt, "16", "samples per row of comparison grids"},
  };
  return schema;
}

RunConfig::RunConfig() {
  for (const auto& s : config_schema()) {
    std::string error;
    values_[s.key] = canonicalize(s, s.default_value, error);
  }
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::vector<std::string> problems;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      problems.push_back(where + ": expected 'key = value'");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const KeySpec* spec = find_spec(key);
    if (!spec) {
      problems.push_back(where + ": unknown key '" + key + "'");
      continue;
    }
    if (!seen.insert(key).second) {
      problems.push_back(where + ": key '" + key + "' set twice");
      continue;
    }
    std::string error;
    const std::string value = canonicalize(*spec, line.substr(eq + 1), error);
    if (!error.empty()) {
      problems.push_back(where + ": " + key + ": " + error);
      continue;
    }
    cfg.values_[key] = value;
  }
  if (!problems.empty()) throw ValidationError(problems);
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError({"cannot read config file " + path.string()});
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  std::string text;
  for (const auto& [k, v] : j.items()) text += k + " = " + v.get<std::string>() + "\n";
  return parse(text, "manifest");
}

void RunConfig::apply_overrides(const std::vector<std::string>& assignments) {
  std::vector<std::string> problems;
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) {
      problems.push_back("--set " + a + ": expected key=value");
      continue;
    }
    const std::string key = trim(a.substr(0, eq));
    const KeySpec* spec = find_spec(key);
    if (!spec) {
      problems.push_back("--set: unknown key '" + key + "'");
      continue;
    }
    std::string error;
    const std::string value = canonicalize(*spec, a.substr(eq + 1), error);
    if (!error.empty()) {
      problems.push_back("--set " + key + ": " + error);
      continue;
    }
    values_[key] = value;
  }
  if (!problems.empty()) throw ValidationError(problems);
}

void RunConfig::validate() const {
  std::vector<std::string> p;
  auto positive = [&](const char* key) {
    if (get_int(key) < 1) p.push_back(std::string(key) + ": must be >= 1");
  };
  auto non_negative = [&](const char* key) {
    if (get_double(key) < 0.0) p.push_back(std::string(key) + ": must be >= 0");
  };
  auto strictly_positive = [&](const char* key) {
    if (!(get_double(key) > 0.0)) p.push_back(std::string(key) + ": must be > 0");
  };

  if (get_int("seed") < 0) p.push_back("seed: must be >= 0");
  if (get_int("data.seed") < 0) p.push_back("data.seed: must be >= 0");
  if (get_string("out_dir").empty()) p.push_back("out_dir: must not be empty");
  const std::string& source = get_string("data.source");
  if (source != "synthetic" && source != "images" && source != "emnist") {
    p.push_back("data.source: must be synthetic, images or emnist (got '" + source + "')");
  }
  if (source == "images" && get_string("data.hw_dir").empty()) p.push_back("data.hw_dir: required by data.source = images");
  if ((source == "images" || source == "emnist") && get_string("data.mp_dir").empty()) {
    p.push_back("data.mp_dir: required by data.source = " + source);
  }
  if (source == "emnist" && (get_string("data.emnist_images").empty() || get_string("data.emnist_labels").empty())) {
    p.push_back("data.emnist_images/data.emnist_labels: required by data.source = emnist");
  }
  if (get_int("data.resolution") < 8 || get_int("data.resolution") % 8) {
    p.push_back("data.resolution: must be a positive multiple of 8");
  }
  const double frac = get_double("data.train_fraction");
  if (!(frac > 0.0 && frac < 1.0)) p.push_back("data.train_fraction: must lie in (0, 1)");
  if (get_int("synthetic.per_class") < 2) p.push_back("synthetic.per_class: must be >= 2 so that both splits are non-empty");
  for (const char* k : {"synthetic.jitter", "synthetic.wobble", "synthetic.slant", "synthetic.mp_width_variation",
                        "synthetic.mp_aspect_variation"}) {
    non_negative(k);
  }
  strictly_positive("synthetic.hw_stroke_width");
  strictly_positive("synthetic.mp_stroke_width");

  const int64_t T = get_int("schedule.T");
  if (T < 1) p.push_back("schedule.T: must be >= 1");
  const double b1 = get_double("schedule.beta_1"), bT = get_double("schedule.beta_T");
  if (!(b1 > 0.0 && b1 < 1.0)) p.push_back("schedule.beta_1: must lie in (0, 1)");
  if (!(bT > 0.0 && bT < 1.0)) p.push_back("schedule.beta_T: must lie in (0, 1)");
  if (b1 > bT) p.push_back("schedule.beta_T: must be >= schedule.beta_1");

  positive("unet.base_channels");
  positive("unet.groups");
  positive("unet.embed_dim");
  for (int m : get_int_list("unet.channel_mult")) {
    if (m < 1) p.push_back("unet.channel_mult: entries must be >= 1");
  }
  for (const char* k : {"ddpm.steps", "ddpm.batch_size"}) positive(k);
  if (get_int("ddpm.warmup_steps") < 0) p.push_back("ddpm.warmup_steps: must be >= 0");
  strictly_positive("ddpm.learning_rate");
  const double nr = get_double("ddpm.null_rate");
  if (!(nr >= 0.0 && nr <= 1.0)) p.push_back("ddpm.null_rate: must lie in [0, 1]");
  const double ema = get_double("ddpm.ema_decay");
  if (!(ema >= 0.0 && ema < 1.0)) p.push_back("ddpm.ema_decay: must lie in [0, 1)");
  non_negative("ddpm.grad_clip");

  const int64_t t_star = get_int("conversion.t_star");
  if (t_star < 1 || t_star > T) p.push_back("conversion.t_star: must lie in [1, schedule.T]");
  for (const char* k : {"conversion.steps", "conversion.batch_size"}) positive(k);
  strictly_positive("conversion.learning_rate");
  strictly_positive("conversion.disc_learning_rate");
  const double beta1 = get_double("conversion.beta1");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) p.push_back("conversion.beta1: must lie in [0, 1)");
  for (const char* k : {"conversion.lambda_cycle", "conversion.lambda_identity", "conversion.gp_weight"}) {
    non_negative(k);
  }
  for (const char* k : {"converter.channels", "converter.res_blocks", "converter.groups", "converter.disc_channels",
                        "converter.disc_layers"}) {
    if (get_int(k) < (std::string(k) == "converter.res_blocks" ? 0 : 1)) p.push_back(std::string(k) + ": out of range");
  }
  if (get_int("converter.channels") % std::max<int64_t>(1, get_int("converter.groups"))) {
    p.push_back("converter.channels: must be a multiple of converter.groups");
  }
  const std::string& method = get_string("convert.method");
  if (method != "cycledm" && method != "sdedit") p.push_back("convert.method: must be cycledm or sdedit");
  positive("eval.k");
  for (const char* k : {"eval.extractor_channels", "eval.extractor_embed_dim", "eval.extractor_steps",
                        "eval.extractor_batch_size", "eval.grid_columns"}) {
    positive(k);
  }
  strictly_positive("eval.extractor_learning_rate");

  // Structural constraints owned by the model code.
  if (p.empty()) {
    try {
      unet().validate();
    } catch (const std::invalid_argument& e) {
      p.push_back(std::string("unet.*: ") + e.what());
    }
  }
  if (!p.empty()) throw ValidationError(p);
}

int64_t RunConfig::get_int(const std::string& key) const {
  int64_t v = 0;
  parse_int(values_.at(key), v);
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  double v = 0.0;
  parse_double(values_.at(key), v);
  return v;
}

bool RunConfig::get_bool(const std::string& key) const { return values_.at(key) == "true"; }

const std::string& RunConfig::get_string(const std::string& key) const { return values_.at(key); }

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(values_.at(key));
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) { apply_overrides({key + "=" + value}); }

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& s : config_schema()) out += s.key + " = " + values_.at(s.key) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  const std::string text = serialize();
  return sha256_hex({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& s : config_schema()) j[s.key] = values_.at(s.key);
  return j;
}

diffusion::NoiseSchedule RunConfig::schedule() const {
  return diffusion::make_schedule(static_cast<int>(get_int("schedule.T")), get_double("schedule.beta_1"),
                                  get_double("schedule.beta_T"));
}

diffusion::UNetConfig RunConfig::unet() const {
  diffusion::UNetConfig c;
  c.image_size = static_cast<int>(get_int("data.resolution"));
  c.base_channels = static_cast<int>(get_int("unet.base_channels"));
  c.channel_mult = get_int_list("unet.channel_mult");
  c.groups = static_cast<int>(get_int("unet.groups"));
  c.embed_dim = static_cast<int>(get_int("unet.embed_dim"));
  return c;
}

diffusion::DdpmHyperparams RunConfig::ddpm() const {
  diffusion::DdpmHyperparams h;
  h.steps = static_cast<int>(get_int("ddpm.steps"));
  h.batch_size = static_cast<int>(get_int("ddpm.batch_size"));
  h.learning_rate = get_double("ddpm.learning_rate");
  h.warmup_steps = static_cast<int>(get_int("ddpm.warmup_steps"));
  h.null_rate = get_double("ddpm.null_rate");
  h.ema_decay = get_double("ddpm.ema_decay");
  h.grad_clip = get_double("ddpm.grad_clip");
  return h;
}

conversion::ConverterConfig RunConfig::converter() const {
  conversion::ConverterConfig c;
  c.channels = static_cast<int>(get_int("converter.channels"));
  c.res_blocks = static_cast<int>(get_int("converter.res_blocks"));
  c.groups = static_cast<int>(get_int("converter.groups"));
  c.disc_channels = static_cast<int>(get_int("converter.disc_channels"));
  c.disc_layers = static_cast<int>(get_int("converter.disc_layers"));
  return c;
}

conversion::ConversionHyperparams RunConfig::conversion() const {
  conversion::ConversionHyperparams h;
  h.lambda_cycle = get_double("conversion.lambda_cycle");
  h.lambda_identity = get_double("conversion.lambda_identity");
  h.gp_weight = get_double("conversion.gp_weight");
  h.batch_size = static_cast<int>(get_int("conversion.batch_size"));
  h.steps = static_cast<int>(get_int("conversion.steps"));
  h.learning_rate = get_double("conversion.learning_rate");
  h.disc_learning_rate = get_double("conversion.disc_learning_rate");
  h.beta1 = get_double("conversion.beta1");
  return h;
}

datasets::SyntheticGlyphSpec RunConfig::synthetic() const {
  datasets::SyntheticGlyphSpec s;
  s.resolution = static_cast<int>(get_int("data.resolution"));
  s.per_class = static_cast<int>(get_int("synthetic.per_class"));
  s.seed = static_cast<uint64_t>(get_int("data.seed"));
  s.jitter = get_double("synthetic.jitter");
  s.wobble = get_double("synthetic.wobble");
  s.slant = get_double("synthetic.slant");
  s.hw_stroke_width = get_double("synthetic.hw_stroke_width");
  s.mp_stroke_width = get_double("synthetic.mp_stroke_width");
  s.mp_width_variation = get_double("synthetic.mp_width_variation");
  s.mp_aspect_variation = get_double("synthetic.mp_aspect_variation");
  s.serifs = get_bool("synthetic.serifs");
  return s;
}

evaluation::ExtractorConfig RunConfig::extractor() const {
  evaluation::ExtractorConfig c;
  c.image_size = static_cast<int>(get_int("data.resolution"));
  c.channels = static_cast<int>(get_int("eval.extractor_channels"));
  c.embed_dim = static_cast<int>(get_int("eval.extractor_embed_dim"));
  c.steps = static_cast<int>(get_int("eval.extractor_steps"));
  c.batch_size = static_cast<int>(get_int("eval.extractor_batch_size"));
  c.learning_rate = get_double("eval.extractor_learning_rate");
  return c;
}

std::string describe_schema() {
  std::ostringstream os;
  for (const auto& s : config_schema()) {
    os << s.key << " (" << type_name(s.type) << ", default "
       << (s.default_value.empty() ? "\"\"" : s.default_value) << "): " << s.doc << "\n";
  }
  return os.str();
}

}  // namespace cycledm::cli
