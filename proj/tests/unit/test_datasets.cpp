#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "cycledm/datasets/dataset.hpp"
#include "cycledm/datasets/image_io.hpp"
#include "cycledm/datasets/synthetic.hpp"
#include "doctest.h"
#include "temp_dir.hpp"

using namespace cycledm;
using namespace cycledm::datasets;
namespace fs = std::filesystem;

namespace {

DomainDataset counted_dataset(const std::vector<int>& per_class) {
  DomainDataset ds;
  ds.resolution = 1;
  for (int c = 0; c < static_cast<int>(per_class.size()); ++c) {
    for (int i = 0; i < per_class[static_cast<size_t>(c)]; ++i) {
      ds.items.push_back({c, std::string(1, class_letter(c)) + std::to_string(i), {static_cast<uint8_t>(i % 256)}});
    }
  }
  return ds;
}

std::set<std::string> keys(const DomainDataset& ds) {
  std::set<std::string> out;
  for (const auto& it : ds.items) out.insert(std::string(1, class_letter(it.label)) + "/" + it.name);
  return out;
}

void write_bytes(const fs::path& p, const std::vector<uint8_t>& bytes) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_be32(std::vector<uint8_t>& v, uint32_t x) {
  for (int s = 24; s >= 0; s -= 8) v.push_back(static_cast<uint8_t>(x >> s));
}

// A valid 2x2 RGB PNG.
const std::vector<uint8_t> kRgbPng = {
    137, 80, 78, 71,  13,  10,  26, 10,  0,   0,   0,  13,  73,  72, 68,  82,  0,  0,  0,  2,  0,  0,   0,  2,
    8,   2,  0,  0,   0,   253, 212, 154, 115, 0,  0,   0,   22,  73, 68,  65,  84, 120, 156, 99, 228, 18, 145, 99,
    96,  96, 96, 98,  96,  96,  96,  96,  96,  0,  0,   2,   230, 0,  64,  92,  165, 32, 91, 0,  0,  0,  0,  73,
    69,  78, 68, 174, 66,  96,  130};

}  // namespace

TEST_CASE("pixel normalization endpoints and bijection") {
  CHECK(normalize_pixel(0) == -1.0f);
  CHECK(normalize_pixel(255) == 1.0f);
  for (int v = 0; v < 256; ++v) CHECK(quantize_pixel(normalize_pixel(static_cast<uint8_t>(v))) == v);
  CHECK(quantize_pixel(3.0f) == 255);
  CHECK(quantize_pixel(-3.0f) == 0);
}

TEST_CASE("synthetic generator counts, replay and foreground band") {
  SyntheticGlyphSpec spec;
  spec.per_class = 20;
  spec.seed = 3;
  const auto [hw, mp] = generate_synthetic(spec);
  CHECK(hw.size() == 520);
  CHECK(mp.size() == 520);
  CHECK(hw.domain == Domain::kHandwritten);
  CHECK(mp.domain == Domain::kPrinted);
  for (int64_t n : hw.class_counts()) CHECK(n == 20);

  const auto [hw2, mp2] = generate_synthetic(spec);
  for (size_t i = 0; i < hw.items.size(); ++i) {
    CHECK(hw.items[i].pixels == hw2.items[i].pixels);
    CHECK(mp.items[i].pixels == mp2.items[i].pixels);
  }
  spec.seed = 4;
  const auto [hw3, mp3] = generate_synthetic(spec);
  CHECK(hw.items[0].pixels != hw3.items[0].pixels);

  for (int res : {8, 16, 32}) {
    spec.resolution = res;
    spec.per_class = 5;
    const auto [h, m] = generate_synthetic(spec);
    for (const auto* ds : {&h, &m}) {
      for (const auto& it : ds->items) {
        int fg = 0;
        for (uint8_t p : it.pixels) fg += p > 127;
        const double frac = static_cast<double>(fg) / static_cast<double>(it.pixels.size());
        CHECK(frac >= 0.01);
        CHECK(frac <= 0.60);
      }
    }
  }
}

TEST_CASE("synthetic styles coincide when every perturbation is off") {
  SyntheticGlyphSpec spec;
  spec.per_class = 2;
  spec.jitter = spec.wobble = spec.slant = 0.0;
  spec.mp_width_variation = spec.mp_aspect_variation = 0.0;
  spec.serifs = false;
  spec.mp_stroke_width = spec.hw_stroke_width = 1.8;
  const auto [hw, mp] = generate_synthetic(spec);
  for (size_t i = 0; i < hw.items.size(); ++i) CHECK(hw.items[i].pixels == mp.items[i].pixels);
}

TEST_CASE("synthetic spec validation") {
  SyntheticGlyphSpec spec;
  spec.resolution = 7;
  CHECK_THROWS(generate_synthetic(spec));
  spec = {};
  spec.per_class = 0;
  CHECK_THROWS(generate_synthetic(spec));
  spec = {};
  spec.jitter = -1;
  CHECK_THROWS(generate_synthetic(spec));
}

TEST_CASE("image directory round trip") {
  testing::TempDir tmp;
  SyntheticGlyphSpec spec;
  spec.per_class = 10;
  const auto [hw, mp] = generate_synthetic(spec);
  write_image_directory(hw, tmp.path() / "hw");

  LoadReport report;
  const DomainDataset loaded = load_image_directory(tmp.path() / "hw", Domain::kHandwritten, {}, &report);
  CHECK(loaded.size() == 260);
  CHECK(report.loaded == 260);
  CHECK(report.warnings.empty());
  for (size_t i = 0; i < hw.items.size(); ++i) {
    CHECK(loaded.items[i].name == hw.items[i].name);
    CHECK(loaded.items[i].label == hw.items[i].label);
    CHECK(loaded.items[i].pixels == hw.items[i].pixels);
  }
  const DomainDataset again = load_image_directory(tmp.path() / "hw", Domain::kHandwritten, {});
  for (size_t i = 0; i < again.items.size(); ++i) CHECK(again.items[i].pixels == loaded.items[i].pixels);

  const ImageBatch b = loaded.all();
  CHECK(b.pixels.shape() == Shape{260, 32, 32, 1});
  for (int64_t j = 0; j < 32 * 32; ++j) CHECK(b.pixels[j] == normalize_pixel(loaded.items[0].pixels[static_cast<size_t>(j)]));
}

TEST_CASE("image directory errors and skipped files") {
  testing::TempDir tmp;
  SyntheticGlyphSpec spec;
  spec.per_class = 2;
  const auto [hw, mp] = generate_synthetic(spec);
  const fs::path root = tmp.path() / "data";
  write_image_directory(hw, root);

  write_bytes(root / "B" / "zz_rgb.png", kRgbPng);
  write_bytes(root / "C" / "zz_garbage.png", {1, 2, 3});
  LoadReport report;
  const DomainDataset ds = load_image_directory(root, Domain::kHandwritten, {}, &report);
  CHECK(ds.size() == 52);
  CHECK(report.warnings.size() == 2);

  fs::create_directories(root / "digits");
  CHECK_THROWS_WITH_AS(load_image_directory(root, Domain::kHandwritten, {}), doctest::Contains("digits"),
                       std::invalid_argument);
  fs::remove_all(root / "digits");

  fs::remove_all(root / "Q");
  CHECK_THROWS(load_image_directory(root, Domain::kHandwritten, {}));
  LoadOptions partial;
  partial.require_all_classes = false;
  CHECK(load_image_directory(root, Domain::kHandwritten, partial).size() == 50);

  fs::create_directories(root / "Q");
  CHECK_THROWS_WITH(load_image_directory(root, Domain::kHandwritten, partial), doctest::Contains("no readable"));
}

TEST_CASE("fit_to_square pads small images and downsamples large ones") {
  GrayImage small{2, 1, {10, 20}};
  const auto padded = fit_to_square(small, 4);
  CHECK(padded == std::vector<uint8_t>{0, 0, 0, 0, 0, 10, 20, 0, 0, 0, 0, 0, 0, 0, 0, 0});

  GrayImage big{64, 64, std::vector<uint8_t>(64 * 64, 200)};
  for (uint8_t v : fit_to_square(big, 32)) CHECK(v == 200);

  GrayImage wide{8, 4, std::vector<uint8_t>(32, 255)};
  const auto w = fit_to_square(wide, 4);
  CHECK(w == std::vector<uint8_t>{0, 0, 0, 0, 255, 255, 255, 255, 255, 255, 255, 255, 0, 0, 0, 0});
}

TEST_CASE("IDX reader and EMNIST orientation") {
  testing::TempDir tmp;
  std::vector<uint8_t> images;
  put_be32(images, 0x00000803);
  put_be32(images, 2);
  put_be32(images, 28);
  put_be32(images, 28);
  std::vector<uint8_t> pix(2 * 28 * 28, 0);
  pix[2 * 28 + 5] = 255;            // item 0: stored row 2, column 5
  pix[28 * 28 + 10 * 28 + 1] = 77;  // item 1: stored row 10, column 1
  images.insert(images.end(), pix.begin(), pix.end());
  std::vector<uint8_t> labels;
  put_be32(labels, 0x00000801);
  put_be32(labels, 2);
  labels.push_back(1);
  labels.push_back(26);
  write_bytes(tmp.path() / "img.idx", images);
  write_bytes(tmp.path() / "lab.idx", labels);

  const IdxArray arr = read_idx(tmp.path() / "img.idx");
  CHECK(arr.dims == std::vector<int64_t>{2, 28, 28});
  CHECK(arr.data == pix);

  const DomainDataset ds = load_emnist_letters(tmp.path() / "img.idx", tmp.path() / "lab.idx", {});
  REQUIRE(ds.size() == 2);
  CHECK(ds.items[0].label == 0);
  CHECK(ds.items[1].label == 25);
  // Transposed, then centred with a 2-pixel border.
  CHECK(ds.items[0].pixels[(5 + 2) * 32 + (2 + 2)] == 255);
  CHECK(ds.items[1].pixels[(1 + 2) * 32 + (10 + 2)] == 77);
  int lit = 0;
  for (uint8_t v : ds.items[0].pixels) lit += v != 0;
  CHECK(lit == 1);

  EmnistOptions raw;
  raw.transpose = false;
  CHECK(load_emnist_letters(tmp.path() / "img.idx", tmp.path() / "lab.idx", raw).items[0].pixels[(2 + 2) * 32 + 7] == 255);

  write_bytes(tmp.path() / "bad.idx", {1, 2, 8, 1, 0, 0, 0, 0});
  CHECK_THROWS_AS(read_idx(tmp.path() / "bad.idx"), ImageFormatError);
  write_bytes(tmp.path() / "short.idx", {0, 0, 8, 1, 0, 0, 0, 9, 1});
  CHECK_THROWS_AS(read_idx(tmp.path() / "short.idx"), ImageFormatError);
}

TEST_CASE("split_dataset stratification") {
  const DomainDataset ds = counted_dataset(std::vector<int>(26, 100));
  const auto [train, test] = split_dataset(ds, 0.7, 42);
  CHECK(train.split == Split::kTrain);
  CHECK(test.split == Split::kTest);
  for (int64_t n : train.class_counts()) CHECK(n == 70);
  for (int64_t n : test.class_counts()) CHECK(n == 30);

  const auto tr = keys(train), te = keys(test);
  CHECK(tr.size() + te.size() == keys(ds).size());
  for (const auto& k : tr) CHECK(te.count(k) == 0);

  const auto [train2, test2] = split_dataset(ds, 0.7, 42);
  CHECK(keys(train2) == tr);
  const auto [train3, test3] = split_dataset(ds, 0.7, 43);
  CHECK(keys(train3) != tr);

  // Odd class sizes stay within one item of the requested fraction.
  const DomainDataset odd = counted_dataset({2, 3, 7, 11, 13, 101});
  const auto [otr, ote] = split_dataset(odd, 0.7, 1);
  const auto counts = odd.class_counts();
  for (size_t c = 0; c < 6; ++c) {
    CHECK(std::abs(static_cast<double>(otr.class_counts()[c]) - 0.7 * static_cast<double>(counts[c])) <= 1.0);
  }

  CHECK_THROWS(split_dataset(counted_dataset({5, 1}), 0.7, 1));
  CHECK_THROWS(split_dataset(ds, 0.0, 1));
  CHECK_THROWS(split_dataset(ds, 1.0, 1));
}

TEST_CASE("split_dataset at EMNIST scale") {
  // 27,600 letters spread as evenly as possible over 26 classes.
  std::vector<int> per_class(26, 27600 / 26);
  for (int c = 0; c < 27600 % 26; ++c) ++per_class[static_cast<size_t>(c)];
  const auto [train, test] = split_dataset(counted_dataset(per_class), 0.7, 0);
  CHECK(train.size() + test.size() == 27600);
  // Published train count, within one item per class of rounding.
  CHECK(std::abs(train.size() - 19308) <= 26);
}

TEST_CASE("manifest lists every item with its hash") {
  testing::TempDir tmp;
  SyntheticGlyphSpec spec;
  spec.per_class = 1;
  const auto [hw, mp] = generate_synthetic(spec);
  const std::vector<const DomainDataset*> sets{&hw, &mp};
  write_manifest(tmp.path() / "manifest.tsv", sets);
  std::ifstream is(tmp.path() / "manifest.tsv");
  std::string line;
  int rows = 0;
  std::getline(is, line);
  CHECK(line[0] == '#');
  while (std::getline(is, line)) {
    ++rows;
    if (rows == 1) {
      CHECK(line.rfind("HW\tall\tA\tA_0000\t" + content_hash(hw.items[0]), 0) == 0);
    }
  }
  CHECK(rows == 52);
}
