#include "cycledm/evaluation/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cycledm/datasets/dataset.hpp"
#include "cycledm/datasets/image_io.hpp"

namespace cycledm::evaluation {
namespace {

template <class T>
const T& require(const std::optional<T>& v, const char* name) {
  if (!v) throw std::invalid_argument(std::string("report is missing field '") + name + "'");
  return *v;
}

double unit_interval(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string("report field '") + name + "' outside [0, 1]");
  return v;
}

std::string fmt(double v, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  return {{"direction", direction}, {"method", method},     {"t_star", t_star},
          {"accuracy", accuracy},   {"precision", precision}, {"recall", recall},
          {"fid", fid},             {"n_generated", n_generated}, {"n_reference", n_reference},
          {"seeds", seeds}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.direction = j.at("direction").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.t_star = j.at("t_star").get<int>();
  r.accuracy = j.at("accuracy").get<double>();
  r.precision = j.at("precision").get<double>();
  r.recall = j.at("recall").get<double>();
  r.fid = j.at("fid").get<double>();
  r.n_generated = j.at("n_generated").get<int64_t>();
  r.n_reference = j.at("n_reference").get<int64_t>();
  r.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  return r;
}

EvalReport build_report(const ReportInputs& in) {
  EvalReport r;
  r.direction = std::string(direction_name(require(in.direction, "direction")));
  r.method = require(in.method, "method");
  r.t_star = require(in.t_star, "t_star");
  r.accuracy = unit_interval(require(in.accuracy, "accuracy"), "accuracy");
  r.precision = unit_interval(require(in.precision, "precision"), "precision");
  r.recall = unit_interval(require(in.recall, "recall"), "recall");
  r.fid = require(in.fid, "fid");
  if (!(r.fid >= 0.0) || !std::isfinite(r.fid)) throw std::invalid_argument("report field 'fid' must be finite and >= 0");
  r.n_generated = require(in.n_generated, "n_generated");
  r.n_reference = require(in.n_reference, "n_reference");
  r.seeds = in.seeds;
  return r;
}

std::string render_table(std::span<const EvalReport> reports) {
  const std::vector<std::string> header{"Direction", "Method", "t", "Accuracy", "Precision", "Recall", "FID"};
  std::vector<std::vector<std::string>> rows{header};
  for (const auto& r : reports) {
    rows.push_back({r.direction, r.method, std::to_string(r.t_star), fmt(r.accuracy, 3), fmt(r.precision, 3),
                    fmt(r.recall, 3), fmt(r.fid, 2)});
  }
  std::vector<size_t> width(header.size(), 0);
  for (const auto& row : rows) {
    for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t c = 0; c < rows[i].size(); ++c) {
      const std::string& cell = rows[i][c];
      const size_t pad = width[c] - cell.size();
      // Text columns left-aligned, numbers right-aligned.
      if (c < 2) {
        os << cell << std::string(pad, ' ');
      } else {
        os << std::string(pad, ' ') << cell;
      }
      os << (c + 1 < rows[i].size() ? "  " : "\n");
    }
    if (i == 0) {
      size_t total = 0;
      for (size_t w : width) total += w + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  return os.str();
}

void write_reports(const std::filesystem::path& json_path, const std::filesystem::path& table_path,
                   std::span<const EvalReport> reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  for (const auto& p : {json_path, table_path}) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  }
  std::ofstream js(json_path, std::ios::trunc);
  js << arr.dump(2) << '\n';
  std::ofstream tb(table_path, std::ios::trunc);
  tb << render_table(reports);
  if (!js || !tb) throw std::runtime_error("failed writing report files");
}

std::vector<EvalReport> read_reports(const std::filesystem::path& json_path) {
  std::ifstream is(json_path);
  if (!is) throw std::runtime_error("cannot read " + json_path.string());
  std::vector<EvalReport> out;
  for (const auto& j : nlohmann::json::parse(is)) out.push_back(EvalReport::from_json(j));
  return out;
}

void write_comparison_grid(const std::filesystem::path& path, std::span<const ImageBatch> rows, int max_columns) {
  if (rows.empty()) throw std::invalid_argument("write_comparison_grid: no rows");
  const int64_t h = rows[0].height(), w = rows[0].width();
  int64_t cols = 0;
  for (const auto& r : rows) {
    if (r.height() != h || r.width() != w) throw std::invalid_argument("write_comparison_grid: image sizes differ");
    cols = std::max(cols, std::min<int64_t>(r.size(), max_columns));
  }
  if (cols == 0) throw std::invalid_argument("write_comparison_grid: empty rows");
  datasets::GrayImage img;
  img.width = static_cast<int>(cols * (w + 1) - 1);
  img.height = static_cast<int>(static_cast<int64_t>(rows.size()) * (h + 1) - 1);
  img.pixels.assign(static_cast<size_t>(img.width) * img.height, 128);
  for (size_t r = 0; r < rows.size(); ++r) {
    for (int64_t c = 0; c < std::min<int64_t>(rows[r].size(), cols); ++c) {
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          const int64_t gy = static_cast<int64_t>(r) * (h + 1) + y, gx = c * (w + 1) + x;
          img.pixels[static_cast<size_t>(gy * img.width + gx)] =
              datasets::quantize_pixel(rows[r].pixels[(c * h + y) * w + x]);
        }
      }
    }
  }
  datasets::write_png_gray8(path, img);
}

}  // namespace cycledm::evaluation
