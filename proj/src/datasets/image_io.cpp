#include "cycledm/datasets/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>

namespace cycledm::datasets {
namespace fs = std::filesystem;
namespace {

struct FileCloser {
  void operator()(FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw ImageFormatError("cannot open " + path.string());
  return f;
}

void png_error_handler(png_structp png, png_const_charp msg) {
  auto* message = static_cast<std::string*>(png_get_error_ptr(png));
  if (message) *message = msg;
  png_longjmp(png, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

// Area-weighted resample of a w x h image to dw x dh.
std::vector<double> resample_area(const GrayImage& img, int dw, int dh) {
  std::vector<double> out(static_cast<size_t>(dw) * dh, 0.0);
  const double sx = static_cast<double>(img.width) / dw;
  const double sy = static_cast<double>(img.height) / dh;
  for (int oy = 0; oy < dh; ++oy) {
    const double y0 = oy * sy, y1 = (oy + 1) * sy;
    for (int ox = 0; ox < dw; ++ox) {
      const double x0 = ox * sx, x1 = (ox + 1) * sx;
      double acc = 0.0, area = 0.0;
      for (int iy = static_cast<int>(std::floor(y0)); iy < std::min(img.height, static_cast<int>(std::ceil(y1))); ++iy) {
        const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
        if (wy <= 0) continue;
        for (int ix = static_cast<int>(std::floor(x0)); ix < std::min(img.width, static_cast<int>(std::ceil(x1))); ++ix) {
          const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
          if (wx <= 0) continue;
          acc += wx * wy * img.pixels[static_cast<size_t>(iy) * img.width + ix];
          area += wx * wy;
        }
      }
      out[static_cast<size_t>(oy) * dw + ox] = area > 0 ? acc / area : 0.0;
    }
  }
  return out;
}

int class_from_dirname(const std::string& name) {
  if (name.size() == 1) {
    const char c = name[0];
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a';
  }
  return -1;
}

uint32_t read_be32(std::istream& is, const fs::path& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw ImageFormatError("truncated IDX file " + path.string());
  return (uint32_t{b[0]} << 24) | (uint32_t{b[1]} << 16) | (uint32_t{b[2]} << 8) | uint32_t{b[3]};
}

}  // namespace

GrayImage read_png_gray8(const fs::path& path) {
  FilePtr f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ImageFormatError(path.string() + " is not a PNG file");
  }
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_handler, png_warning_handler);
  if (!png) throw ImageFormatError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  GrayImage img;
  std::vector<png_bytep> rows;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    throw ImageFormatError("cannot decode " + path.string() + (message.empty() ? "" : ": " + message));
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  if (color_type != PNG_COLOR_TYPE_GRAY || bit_depth != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageFormatError(path.string() + " is not an 8-bit grayscale PNG (colour type " +
                           std::to_string(color_type) + ", depth " + std::to_string(bit_depth) + ")");
  }
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.pixels.resize(static_cast<size_t>(img.width) * img.height);
  rows.resize(static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<size_t>(y)] = img.pixels.data() + static_cast<size_t>(y) * img.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png_gray8(const fs::path& path, const GrayImage& image) {
  if (image.width <= 0 || image.height <= 0 ||
      image.pixels.size() != static_cast<size_t>(image.width) * image.height) {
    throw std::invalid_argument("write_png_gray8: inconsistent image size");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  FilePtr f = open_file(path, "wb");
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_handler, png_warning_handler);
  if (!png) throw ImageFormatError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(static_cast<size_t>(image.height));
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw ImageFormatError("cannot write " + path.string() + (message.empty() ? "" : ": " + message));
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(image.pixels.data() + static_cast<size_t>(y) * image.width);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<uint8_t> fit_to_square(const GrayImage& image, int resolution) {
  if (resolution <= 0) throw std::invalid_argument("fit_to_square: resolution must be positive");
  if (image.width <= 0 || image.height <= 0) throw std::invalid_argument("fit_to_square: empty image");
  int w = image.width, h = image.height;
  std::vector<double> src(image.pixels.begin(), image.pixels.end());
  if (w > resolution || h > resolution) {
    const double scale = static_cast<double>(resolution) / std::max(w, h);
    const int dw = std::max(1, static_cast<int>(std::lround(w * scale)));
    const int dh = std::max(1, static_cast<int>(std::lround(h * scale)));
    src = resample_area(image, std::min(dw, resolution), std::min(dh, resolution));
    w = std::min(dw, resolution);
    h = std::min(dh, resolution);
  }
  std::vector<uint8_t> out(static_cast<size_t>(resolution) * resolution, 0);
  const int ox = (resolution - w) / 2, oy = (resolution - h) / 2;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = std::clamp(std::round(src[static_cast<size_t>(y) * w + x]), 0.0, 255.0);
      out[static_cast<size_t>(y + oy) * resolution + (x + ox)] = static_cast<uint8_t>(v);
    }
  }
  return out;
}

DomainDataset load_image_directory(const fs::path& root, Domain domain, const LoadOptions& options,
                                   LoadReport* report) {
  if (!fs::is_directory(root)) throw std::invalid_argument("image directory not found: " + root.string());
  DomainDataset ds;
  ds.domain = domain;
  ds.resolution = options.resolution;
  ds.provenance = "dir:" + root.string();
  LoadReport local;
  LoadReport& rep = report ? *report : local;

  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  std::set<int> seen;
  for (const auto& dir : class_dirs) {
    const int label = class_from_dirname(dir.filename().string());
    if (label < 0) throw std::invalid_argument("unknown class directory '" + dir.filename().string() + "'");
    if (!seen.insert(label).second) {
      throw std::invalid_argument("class " + std::string(1, class_letter(label)) + " appears twice in " + root.string());
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    int64_t count = 0;
    for (const auto& file : files) {
      GrayImage img;
      try {
        img = read_png_gray8(file);
      } catch (const ImageFormatError& e) {
        rep.warnings.push_back(std::string("skipped: ") + e.what());
        continue;
      }
      GlyphItem item;
      item.label = label;
      item.name = file.stem().string();
      item.pixels = fit_to_square(img, options.resolution);
      if (options.invert) {
        for (auto& p : item.pixels) p = static_cast<uint8_t>(255 - p);
      }
      ds.items.push_back(std::move(item));
      ++count;
    }
    if (count == 0) {
      throw std::invalid_argument("class " + std::string(1, class_letter(label)) + " in " + root.string() +
                                  " has no readable images");
    }
    rep.loaded += count;
  }
  if (options.require_all_classes && static_cast<int>(seen.size()) != kNumClasses) {
    std::string missing;
    for (int c = 0; c < kNumClasses; ++c) {
      if (!seen.count(c)) missing += class_letter(c);
    }
    throw std::invalid_argument("classes without images in " + root.string() + ": " + missing);
  }
  if (ds.items.empty()) throw std::invalid_argument("no images found in " + root.string());
  return ds;
}

void write_image_directory(const DomainDataset& ds, const fs::path& root) {
  ds.validate();
  for (const auto& item : ds.items) {
    GrayImage img{ds.resolution, ds.resolution, item.pixels};
    write_png_gray8(root / std::string(1, class_letter(item.label)) / (item.name + ".png"), img);
  }
}

IdxArray read_idx(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageFormatError("cannot open " + path.string());
  const uint32_t magic = read_be32(is, path);
  if ((magic >> 16) != 0) throw ImageFormatError(path.string() + " is not an IDX file");
  const uint32_t type = (magic >> 8) & 0xff;
  if (type != 0x08) throw ImageFormatError(path.string() + ": only unsigned-byte IDX data is supported");
  const uint32_t ndims = magic & 0xff;
  if (ndims == 0 || ndims > 4) throw ImageFormatError(path.string() + ": unsupported IDX rank");
  IdxArray arr;
  size_t total = 1;
  for (uint32_t i = 0; i < ndims; ++i) {
    arr.dims.push_back(read_be32(is, path));
    total *= static_cast<size_t>(arr.dims.back());
  }
  arr.data.resize(total);
  if (!is.read(reinterpret_cast<char*>(arr.data.data()), static_cast<std::streamsize>(total))) {
    throw ImageFormatError("truncated IDX file " + path.string());
  }
  return arr;
}

DomainDataset load_emnist_letters(const fs::path& images, const fs::path& labels, const EmnistOptions& options) {
  const IdxArray img = read_idx(images);
  const IdxArray lab = read_idx(labels);
  if (img.dims.size() != 3 || lab.dims.size() != 1 || img.dims[0] != lab.dims[0]) {
    throw ImageFormatError("EMNIST images and labels do not match");
  }
  const int h = static_cast<int>(img.dims[1]), w = static_cast<int>(img.dims[2]);
  DomainDataset ds;
  ds.domain = Domain::kHandwritten;
  ds.resolution = options.resolution;
  ds.provenance = "emnist:" + images.filename().string();
  for (int64_t i = 0; i < img.dims[0]; ++i) {
    const int label = static_cast<int>(lab.data[static_cast<size_t>(i)]) - options.label_offset;
    if (label < 0 || label >= kNumClasses) {
      throw ImageFormatError("EMNIST label " + std::to_string(lab.data[static_cast<size_t>(i)]) + " out of range");
    }
    GrayImage g;
    g.width = options.transpose ? h : w;
    g.height = options.transpose ? w : h;
    g.pixels.resize(static_cast<size_t>(h) * w);
    const uint8_t* src = img.data.data() + static_cast<size_t>(i) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const uint8_t v = src[static_cast<size_t>(y) * w + x];
        if (options.transpose) {
          g.pixels[static_cast<size_t>(x) * h + y] = v;
        } else {
          g.pixels[static_cast<size_t>(y) * w + x] = v;
        }
      }
    }
    GlyphItem item;
    item.label = label;
    item.name = "emnist_" + std::to_string(i);
    item.pixels = fit_to_square(g, options.resolution);
    ds.items.push_back(std::move(item));
  }
  return ds;
}

}  // namespace cycledm::datasets
