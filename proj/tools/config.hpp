#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cycledm/conversion/losses.hpp"
#include "cycledm/conversion/networks.hpp"
#include "cycledm/datasets/synthetic.hpp"
#include "cycledm/diffusion/schedule.hpp"
#include "cycledm/diffusion/training.hpp"
#include "cycledm/diffusion/unet.hpp"
#include "cycledm/evaluation/features.hpp"
#include "json.hpp"

namespace cycledm::cli {

// Bad user input: unknown keys, malformed values, inconsistent arguments.
// Maps to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

enum class ValueType { kInt, kDouble, kBool, kString, kIntList };

struct KeySpec {
  std::string key;
  ValueType type;
  std::string default_value;
  std::string doc;
};

// The complete key schema, in serialization order.
const std::vector<KeySpec>& config_schema();

// Flat typed key = value configuration. Values are stored in canonical text
// form; every key of the schema is always present.
class RunConfig {
 public:
  RunConfig();  // all defaults

  // "key = value" lines; '#' starts a comment. Collects every problem before
  // throwing a single ValidationError.
  static RunConfig parse(const std::string& text, const std::string& origin);
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig from_json(const nlohmann::json& j);

  // Applies "key=value" overrides; all problems are reported together.
  void apply_overrides(const std::vector<std::string>& assignments);
  // Range and consistency checks naming every offending key.
  void validate() const;

  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  const std::string& get_string(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;
  void set(const std::string& key, const std::string& value);

  std::string serialize() const;  // canonical text, schema order
  std::string hash() const;       // SHA-256 of serialize()
  nlohmann::json to_json() const;

  uint64_t seed() const { return static_cast<uint64_t>(get_int("seed")); }

  diffusion::NoiseSchedule schedule() const;
  diffusion::UNetConfig unet() const;
  diffusion::DdpmHyperparams ddpm() const;
  conversion::ConverterConfig converter() const;
  conversion::ConversionHyperparams conversion() const;
  datasets::SyntheticGlyphSpec synthetic() const;
  evaluation::ExtractorConfig extractor() const;

 private:
  std::map<std::string, std::string> values_;
};

// Schema reference as text: key, type, default and description.
std::string describe_schema();

}  // namespace cycledm::cli
