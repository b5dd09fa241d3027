#include "cycledm/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace cycledm {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

constexpr std::array<char, 8> kMagic{'C', 'Y', 'C', 'L', 'E', 'D', 'M', '\0'};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t n) {
    if (n && EVP_DigestUpdate(ctx_, data, n) != 1) throw std::runtime_error("sha256 update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, md, &len) != 1) throw std::runtime_error("sha256 final failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

std::string payload_hash(const NamedTensors& tensors) {
  Sha256 h;
  for (const auto& [name, t] : tensors) h.update(t.ptr(), static_cast<size_t>(t.numel()) * sizeof(float));
  return h.hex();
}

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("truncated checkpoint " + path.string());
  return v;
}

}  // namespace

std::string sha256_hex(std::span<const unsigned char> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<size_t>(in.gcount()));
  }
  return h.hex();
}

std::string tensors_fingerprint(const NamedTensors& tensors) {
  Sha256 h;
  for (const auto& [name, t] : tensors) {
    h.update(name.data(), name.size() + 1);
    for (auto d : t.shape()) h.update(&d, sizeof(d));
    h.update(t.ptr(), static_cast<size_t>(t.numel()) * sizeof(float));
  }
  return h.hex();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["kind"] = ckpt.kind;
  header["format_version"] = kCheckpointFormatVersion;
  header["meta"] = ckpt.meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  header["payload_sha256"] = payload_hash(ckpt.tensors);
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint " + tmp.string());
    os.write(kMagic.data(), kMagic.size());
    write_pod<uint32_t>(os, kCheckpointFormatVersion);
    write_pod<uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!os.flush()) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view expected_kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw CheckpointError(path.string() + " is not a cycledm checkpoint");
  }
  const auto version = read_pod<uint32_t>(is, path);
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError(path.string() + ": checkpoint format version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointFormatVersion));
  }
  const auto len = read_pod<uint64_t>(is, path);
  if (len > (uint64_t{1} << 32)) throw CheckpointError("implausible header length in " + path.string());
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw CheckpointError("truncated header in " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt header in " + path.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  ckpt.kind = header.at("kind").get<std::string>();
  if (!expected_kind.empty() && ckpt.kind != expected_kind) {
    throw CheckpointError(path.string() + " holds a '" + ckpt.kind + "' checkpoint, expected '" +
                          std::string(expected_kind) + "'");
  }
  ckpt.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    Tensor t(entry.at("shape").get<Shape>());
    if (!is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)))) {
      throw CheckpointError("truncated payload in " + path.string());
    }
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  if (payload_hash(ckpt.tensors) != header.at("payload_sha256").get<std::string>()) {
    throw CheckpointError("payload checksum mismatch in " + path.string());
  }
  return ckpt;
}

NamedTensors module_tensors(const nn::Module& m, const std::string& prefix) {
  NamedTensors out;
  for (const auto& p : m.named_parameters()) out.emplace_back(prefix + p.name, p.var.value());
  return out;
}

void load_module_tensors(nn::Module& m, const NamedTensors& tensors, const std::string& prefix) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  std::vector<Tensor> state;
  for (const auto& p : m.named_parameters()) {
    auto it = by_name.find(prefix + p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint is missing tensor " + prefix + p.name);
    state.push_back(*it->second);
  }
  try {
    m.load_state(state);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(e.what());
  }
}

}  // namespace cycledm
