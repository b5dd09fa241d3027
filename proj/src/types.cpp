#include "cycledm/types.hpp"

#include <cmath>

namespace cycledm {

std::string_view domain_name(Domain d) { return d == Domain::kHandwritten ? "HW" : "MP"; }

Domain parse_domain(std::string_view s) {
  if (s == "HW" || s == "hw") return Domain::kHandwritten;
  if (s == "MP" || s == "mp") return Domain::kPrinted;
  throw std::invalid_argument("unknown domain '" + std::string(s) + "' (expected HW or MP)");
}

int token_index(const ClassToken& c) {
  if (!c) return kNullTokenIndex;
  if (*c < 0 || *c >= kNumClasses) throw std::out_of_range("class index " + std::to_string(*c) + " out of range");
  return *c;
}

std::vector<ClassToken> to_tokens(std::span<const int> classes) {
  return std::vector<ClassToken>(classes.begin(), classes.end());
}

std::string_view direction_name(Direction d) { return d == Direction::kHwToMp ? "HW->MP" : "MP->HW"; }

Direction parse_direction(std::string_view s) {
  if (s == "HW->MP" || s == "hw2mp" || s == "HW2MP") return Direction::kHwToMp;
  if (s == "MP->HW" || s == "mp2hw" || s == "MP2HW") return Direction::kMpToHw;
  throw std::invalid_argument("unknown direction '" + std::string(s) + "' (expected hw2mp or mp2hw)");
}

void ImageBatch::validate(bool require_unit_range) const {
  if (pixels.rank() != 4 || pixels.dim(3) != 1) {
    throw std::invalid_argument("ImageBatch: expected [N,H,W,1] pixels, got " + shape_str(pixels.shape()));
  }
  if (static_cast<int64_t>(classes.size()) != size()) {
    throw std::invalid_argument("ImageBatch: " + std::to_string(classes.size()) + " labels for " +
                                std::to_string(size()) + " images");
  }
  for (int c : classes) {
    if (c < 0 || c >= kNumClasses) throw std::out_of_range("ImageBatch: class " + std::to_string(c));
  }
  for (float v : pixels.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("ImageBatch: non-finite pixel");
    if (require_unit_range && (v < -1.0f || v > 1.0f)) {
      throw std::invalid_argument("ImageBatch: pixel outside [-1, 1]");
    }
  }
}

}  // namespace cycledm
