#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cycledm/tensor.hpp"

namespace cycledm {

// HW: handwritten glyphs. MP: machine-printed glyphs.
enum class Domain : uint8_t { kHandwritten = 0, kPrinted = 1 };

inline constexpr int kNumClasses = 26;
inline constexpr int kNumDomains = 2;

std::string_view domain_name(Domain d);  // "HW" / "MP"
Domain parse_domain(std::string_view s);
inline Domain other_domain(Domain d) { return d == Domain::kHandwritten ? Domain::kPrinted : Domain::kHandwritten; }
inline char class_letter(int c) { return static_cast<char>('A' + c); }

// A class condition: a letter index in [0, 26) or the null token, which
// selects the unconditional pathway. The null token has its own embedding
// slot and is never confused with class 0.
using ClassToken = std::optional<int>;
inline constexpr std::nullopt_t kNullToken = std::nullopt;
inline constexpr int kNullTokenIndex = kNumClasses;
int token_index(const ClassToken& c);
std::vector<ClassToken> to_tokens(std::span<const int> classes);

enum class Direction { kHwToMp, kMpToHw };
std::string_view direction_name(Direction d);  // "HW->MP" / "MP->HW"
Direction parse_direction(std::string_view s);
inline Domain source_domain(Direction d) { return d == Direction::kHwToMp ? Domain::kHandwritten : Domain::kPrinted; }
inline Domain target_domain(Direction d) { return other_domain(source_domain(d)); }

// Grayscale glyphs of one domain, NHWC with a single channel.
struct ImageBatch {
  Tensor pixels;  // [N, H, W, 1]
  Domain domain = Domain::kHandwritten;
  std::vector<int> classes;

  int64_t size() const { return pixels.rank() == 0 ? 0 : pixels.dim(0); }
  int64_t height() const { return pixels.dim(1); }
  int64_t width() const { return pixels.dim(2); }
  // Throws when the shape, labels or (optionally) the [-1, 1] range are off.
  void validate(bool require_unit_range) const;
};

}  // namespace cycledm
