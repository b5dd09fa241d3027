#include "cycledm/datasets/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "cycledm/checkpoint.hpp"
#include "cycledm/rng.hpp"

namespace cycledm::datasets {

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kTest: return "test";
    default: return "all";
  }
}

uint8_t quantize_pixel(float v) {
  const float scaled = std::round((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f);
  return static_cast<uint8_t>(std::clamp(scaled, 0.0f, 255.0f));
}

ImageBatch DomainDataset::batch(std::span<const int64_t> indices) const {
  const int64_t r = resolution;
  ImageBatch b;
  b.domain = domain;
  b.pixels = Tensor({static_cast<int64_t>(indices.size()), r, r, 1});
  float* dst = b.pixels.ptr();
  for (size_t i = 0; i < indices.size(); ++i) {
    const auto& item = items.at(static_cast<size_t>(indices[i]));
    for (int64_t j = 0; j < r * r; ++j) dst[static_cast<int64_t>(i) * r * r + j] = normalize_pixel(item.pixels[static_cast<size_t>(j)]);
    b.classes.push_back(item.label);
  }
  return b;
}

ImageBatch DomainDataset::all() const {
  std::vector<int64_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), 0);
  return batch(idx);
}

std::vector<int64_t> DomainDataset::class_counts() const {
  std::vector<int64_t> counts(kNumClasses, 0);
  for (const auto& it : items) ++counts.at(static_cast<size_t>(it.label));
  return counts;
}

void DomainDataset::validate() const {
  for (const auto& it : items) {
    if (it.label < 0 || it.label >= kNumClasses) {
      throw std::invalid_argument("dataset item '" + it.name + "' has class " + std::to_string(it.label));
    }
    if (it.pixels.size() != static_cast<size_t>(resolution * resolution)) {
      throw std::invalid_argument("dataset item '" + it.name + "' has wrong pixel count");
    }
  }
}

DomainDataset from_batch(const ImageBatch& batch, std::span<const std::string> names, std::string provenance) {
  batch.validate(/*require_unit_range=*/false);
  if (batch.height() != batch.width()) throw std::invalid_argument("from_batch: images must be square");
  if (names.size() != static_cast<size_t>(batch.size())) throw std::invalid_argument("from_batch: one name per image");
  DomainDataset ds;
  ds.domain = batch.domain;
  ds.resolution = static_cast<int>(batch.height());
  ds.provenance = std::move(provenance);
  const int64_t per = batch.height() * batch.width();
  for (int64_t i = 0; i < batch.size(); ++i) {
    GlyphItem item;
    item.label = batch.classes[static_cast<size_t>(i)];
    item.name = names[static_cast<size_t>(i)];
    item.pixels.resize(static_cast<size_t>(per));
    for (int64_t j = 0; j < per; ++j) item.pixels[static_cast<size_t>(j)] = quantize_pixel(batch.pixels[i * per + j]);
    ds.items.push_back(std::move(item));
  }
  return ds;
}

std::pair<DomainDataset, DomainDataset> split_dataset(const DomainDataset& ds, double train_fraction, uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split_dataset: train_fraction must lie in (0, 1)");
  }
  std::vector<std::vector<size_t>> by_class(kNumClasses);
  for (size_t i = 0; i < ds.items.size(); ++i) by_class.at(static_cast<size_t>(ds.items[i].label)).push_back(i);

  std::vector<char> in_train(ds.items.size(), 0);
  for (int c = 0; c < kNumClasses; ++c) {
    auto& idx = by_class[static_cast<size_t>(c)];
    if (idx.empty()) continue;
    if (idx.size() < 2) {
      throw std::invalid_argument(std::string("split_dataset: class ") + class_letter(c) + " has fewer than 2 items");
    }
    RngStream rng = RngStream::derive(seed, std::string("split/") + class_letter(c));
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    const auto n = static_cast<int64_t>(idx.size());
    const int64_t n_train = std::clamp<int64_t>(std::llround(train_fraction * static_cast<double>(n)), 1, n - 1);
    for (int64_t k = 0; k < n_train; ++k) in_train[idx[static_cast<size_t>(k)]] = 1;
  }

  DomainDataset train = ds, test = ds;
  train.items.clear();
  test.items.clear();
  train.split = Split::kTrain;
  test.split = Split::kTest;
  for (size_t i = 0; i < ds.items.size(); ++i) (in_train[i] ? train : test).items.push_back(ds.items[i]);
  return {std::move(train), std::move(test)};
}

std::string content_hash(const GlyphItem& item) { return sha256_hex(item.pixels); }

void write_manifest(const std::filesystem::path& path, std::span<const DomainDataset* const> datasets) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  os << "# domain\tsplit\tclass\tname\tsha256\tprovenance\n";
  for (const auto* ds : datasets) {
    for (const auto& item : ds->items) {
      os << domain_name(ds->domain) << '\t' << split_name(ds->split) << '\t' << class_letter(item.label) << '\t'
         << item.name << '\t' << content_hash(item) << '\t' << ds->provenance << '\n';
    }
  }
  if (!os) throw std::runtime_error("failed writing manifest " + path.string());
}

}  // namespace cycledm::datasets
