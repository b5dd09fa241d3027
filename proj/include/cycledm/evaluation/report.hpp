#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cycledm/types.hpp"
#include "json.hpp"

namespace cycledm::evaluation {

struct EvalReport {
  std::string direction;  // "HW->MP" / "MP->HW"
  std::string method;
  int t_star = 0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double fid = 0.0;
  int64_t n_generated = 0;
  int64_t n_reference = 0;
  std::vector<uint64_t> seeds;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

// Metric inputs as they are gathered; build_report insists on every field.
struct ReportInputs {
  std::optional<Direction> direction;
  std::optional<std::string> method;
  std::optional<int> t_star;
  std::optional<double> accuracy, precision, recall, fid;
  std::optional<int64_t> n_generated, n_reference;
  std::vector<uint64_t> seeds;
};

// Throws std::invalid_argument naming the first missing field, or a value
// outside its range.
EvalReport build_report(const ReportInputs& in);

// Aligned text table with columns Direction, Method, t, Accuracy, Precision,
// Recall, FID.
std::string render_table(std::span<const EvalReport> reports);

void write_reports(const std::filesystem::path& json_path, const std::filesystem::path& table_path,
                   std::span<const EvalReport> reports);
std::vector<EvalReport> read_reports(const std::filesystem::path& json_path);

// Rows of equally sized image batches tiled into one PNG (row = method,
// column = sample) separated by a one-pixel gap.
void write_comparison_grid(const std::filesystem::path& path, std::span<const ImageBatch> rows, int max_columns);

}  // namespace cycledm::evaluation
