#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cycledm/conversion/losses.hpp"
#include "cycledm/conversion/networks.hpp"
#include "cycledm/datasets/dataset.hpp"
#include "cycledm/diffusion/training.hpp"

namespace cycledm::conversion {

// F_t, G_t and the two discriminators, bound to one timestep and to the
// frozen DDPM they were trained against.
struct ConversionPair {
  int t_star = 0;
  ConverterConfig config;
  ConversionHyperparams hyperparams;
  std::shared_ptr<ConversionNet> F, G;
  std::shared_ptr<Discriminator> D, D_prime;
  std::string ddpm_fingerprint;
  nlohmann::json training = nlohmann::json::object();

  ConversionModels models() const { return {*F, *G, *D, *D_prime}; }
  const Converter& converter(Direction d) const;
};

ConversionPair make_pair(int t_star, const ConverterConfig& config, const ConversionHyperparams& hp, uint64_t seed);

using ConversionStepCallback = std::function<void(int step, const LossParts& parts)>;

// Alternates one discriminator step and one generator step per batch. The
// DDPM is only used to diffuse data; its fingerprint is checked afterwards.
std::vector<LossParts> train_conversion(ConversionPair& pair, const diffusion::DdpmModel& ddpm,
                                        const datasets::DomainDataset& hw, const datasets::DomainDataset& mp,
                                        uint64_t seed, const ConversionStepCallback& on_step = {});

// Diffuses x0 to t_star, applies `net`, then denoises in the target domain
// with the class condition. Output is clamped to [-1, 1]. When `raw_out` is
// given it receives the output before clamping.
ImageBatch convert_with(const Converter& net, int t_star, const ImageBatch& x0, Direction direction,
                        const diffusion::DdpmModel& ddpm, RngStream& rng, Tensor* raw_out = nullptr);

ImageBatch convert(const ImageBatch& x0, Direction direction, const ConversionPair& pair, int t_star,
                   const diffusion::DdpmModel& ddpm, RngStream& rng);

// SDEdit: diffuse to t_start and denoise in the target domain. t_start = 0
// returns the input unchanged (relabelled to the target domain).
ImageBatch sdedit_convert(const ImageBatch& x0, Direction direction, int t_start, const diffusion::DdpmModel& ddpm,
                          RngStream& rng);

inline constexpr const char* kPairCheckpointKind = "conversion_pair";

void save_pair(const std::filesystem::path& path, const ConversionPair& pair);
// Refuses a pair trained against a different DDPM when `ddpm` is given.
ConversionPair load_pair(const std::filesystem::path& path, const diffusion::DdpmModel* ddpm = nullptr);

}  // namespace cycledm::conversion
