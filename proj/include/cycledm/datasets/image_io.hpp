#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cycledm/datasets/dataset.hpp"

namespace cycledm::datasets {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;  // row-major
};

class ImageFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reads an 8-bit grayscale PNG. Other bit depths or colour types raise
// ImageFormatError.
GrayImage read_png_gray8(const std::filesystem::path& path);
void write_png_gray8(const std::filesystem::path& path, const GrayImage& image);

// Fits an image into a square of side `resolution`: larger images are
// area-downscaled (aspect preserved), then everything is centred on a
// background of 0.
std::vector<uint8_t> fit_to_square(const GrayImage& image, int resolution);

struct LoadOptions {
  int resolution = 32;
  bool invert = false;              // for dark-on-light sources
  bool require_all_classes = true;  // every letter must have an image
};

struct LoadReport {
  int64_t loaded = 0;
  std::vector<std::string> warnings;  // one per skipped file
};

// Loads <root>/<letter>/<name>.png. Unknown class directories and empty
// classes are errors; unreadable images are skipped with a warning.
DomainDataset load_image_directory(const std::filesystem::path& root, Domain domain, const LoadOptions& options,
                                   LoadReport* report = nullptr);
// Writes the inverse layout of load_image_directory.
void write_image_directory(const DomainDataset& ds, const std::filesystem::path& root);

struct IdxArray {
  std::vector<int64_t> dims;
  std::vector<uint8_t> data;
};

// Unsigned-byte IDX files (type code 0x08).
IdxArray read_idx(const std::filesystem::path& path);

struct EmnistOptions {
  int resolution = 32;
  bool transpose = true;  // EMNIST stores images column-major
  int label_offset = 1;   // letters split labels A..Z as 1..26
};

DomainDataset load_emnist_letters(const std::filesystem::path& images, const std::filesystem::path& labels,
                                  const EmnistOptions& options);

}  // namespace cycledm::datasets
