#pragma once

// Single-file model container:
//   8-byte magic "CYCLEDM\0" | u32 format version | u64 header length |
//   JSON header | float32 tensor payload in header order (little endian).
// The header lists tensor names and shapes plus the SHA-256 of the payload.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cycledm/nn.hpp"
#include "json.hpp"

namespace cycledm {

inline constexpr uint32_t kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Checkpoint {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  NamedTensors tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Refuses other format versions and, when given, other kinds.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view expected_kind = {});

// SHA-256 over names, shapes and values; identifies a parameter set.
std::string tensors_fingerprint(const NamedTensors& tensors);

NamedTensors module_tensors(const nn::Module& m, const std::string& prefix = "");
// Loads tensors named prefix + parameter name; every parameter must be present.
void load_module_tensors(nn::Module& m, const NamedTensors& tensors, const std::string& prefix = "");

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace cycledm
