#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cycledm/datasets/dataset.hpp"
#include "cycledm/diffusion/schedule.hpp"
#include "cycledm/diffusion/unet.hpp"
#include "json.hpp"

namespace cycledm::diffusion {

struct DdpmHyperparams {
  int steps = 2000;
  int batch_size = 16;
  double learning_rate = 1e-3;
  int warmup_steps = 100;
  double null_rate = 0.1;  // probability of replacing a class by the null token
  double ema_decay = 0.995;
  double grad_clip = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
};

// Mean of the first and last `window` entries of a loss trajectory.
struct SmoothedLoss {
  double initial = 0.0;
  double final = 0.0;
};
SmoothedLoss smooth_endpoints(std::span<const double> losses, size_t window);

// A trained (or freshly initialized) noise predictor with its schedule.
struct DdpmModel {
  NoiseSchedule schedule;
  std::shared_ptr<DenoiserNetwork> network;
  nlohmann::json training = nlohmann::json::object();

  // SHA-256 over the parameter tensors.
  std::string fingerprint() const;
};

DdpmModel make_ddpm(const UNetConfig& config, bool per_domain, const NoiseSchedule& schedule, uint64_t seed);

using StepCallback = std::function<void(int step, double loss)>;

// Trains on the union of `data` (both domains, class labels required). The
// returned trajectory holds one loss per step; afterwards the model holds the
// EMA weights.
std::vector<double> train_ddpm(DdpmModel& model, std::span<const datasets::DomainDataset* const> data,
                               const DdpmHyperparams& hp, uint64_t seed, const StepCallback& on_step = {});

inline constexpr const char* kDdpmCheckpointKind = "ddpm";

void save_ddpm(const std::filesystem::path& path, const DdpmModel& model);
DdpmModel load_ddpm(const std::filesystem::path& path);

}  // namespace cycledm::diffusion
