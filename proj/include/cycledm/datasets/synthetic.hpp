#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cycledm/datasets/dataset.hpp"
#include "json.hpp"

namespace cycledm::datasets {

// Both domains are drawn from the same 26 stroke skeletons. The handwriting
// style perturbs each item with a smooth random warp, endpoint wobble and a
// slant; the print style uses thicker strokes with serifs and a per-item
// width and aspect variation. With every perturbation set to zero and equal
// widths the two styles render identical images.
struct SyntheticGlyphSpec {
  int resolution = 32;
  int per_class = 20;
  uint64_t seed = 0;

  double jitter = 0.045;        // warp amplitude, glyph-box units
  double wobble = 0.05;         // independent endpoint displacement
  double slant = 0.25;          // maximum horizontal shear
  double hw_stroke_width = 1.3; // pixels at resolution 32

  double mp_stroke_width = 2.6;
  double mp_width_variation = 0.5;  // +- pixels at resolution 32
  double mp_aspect_variation = 0.12;
  bool serifs = true;

  void validate() const;
  nlohmann::json to_json() const;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};
using Polyline = std::vector<Point>;

// Strokes of a letter in a unit box, y pointing down.
const std::vector<Polyline>& letter_skeleton(int label);

// Renders anti-aliased strokes of the given pixel width into a square image.
std::vector<uint8_t> render_strokes(const std::vector<Polyline>& strokes, double width_px, int resolution);

// Returns {HW, MP}, per_class items of every letter each.
std::pair<DomainDataset, DomainDataset> generate_synthetic(const SyntheticGlyphSpec& spec);

}  // namespace cycledm::datasets
