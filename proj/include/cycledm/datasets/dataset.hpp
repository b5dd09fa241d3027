#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cycledm/types.hpp"

namespace cycledm::datasets {

enum class Split { kAll, kTrain, kTest };
std::string_view split_name(Split s);

// 8-bit gray level <-> [-1, 1]. The mapping is a bijection on the 256 levels.
inline float normalize_pixel(uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }
uint8_t quantize_pixel(float v);

struct GlyphItem {
  int label = 0;                 // 0..25
  std::string name;              // stable identifier, used for file names
  std::vector<uint8_t> pixels;   // resolution x resolution, row-major
};

struct DomainDataset {
  Domain domain = Domain::kHandwritten;
  Split split = Split::kAll;
  int resolution = 32;
  std::string provenance;
  std::vector<GlyphItem> items;

  int64_t size() const { return static_cast<int64_t>(items.size()); }
  bool empty() const { return items.empty(); }
  ImageBatch batch(std::span<const int64_t> indices) const;
  ImageBatch all() const;
  std::vector<int64_t> class_counts() const;
  // Throws unless every item has a valid label and resolution^2 pixels.
  void validate() const;
};

// Builds a dataset from normalized images, quantizing back to 8 bits.
DomainDataset from_batch(const ImageBatch& batch, std::span<const std::string> names, std::string provenance);

// Stratified per-class shuffle split. Each class contributes
// round(train_fraction * n) items (at least 1, at most n - 1) to train.
std::pair<DomainDataset, DomainDataset> split_dataset(const DomainDataset& ds, double train_fraction, uint64_t seed);

// Manifest line per item: domain, split, class letter, name, SHA-256 of the
// pixel bytes and provenance, tab separated.
void write_manifest(const std::filesystem::path& path, std::span<const DomainDataset* const> datasets);
std::string content_hash(const GlyphItem& item);

}  // namespace cycledm::datasets
