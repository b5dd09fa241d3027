#pragma once

#include <span>
#include <vector>

#include "cycledm/autograd.hpp"
#include "cycledm/diffusion/schedule.hpp"
#include "cycledm/rng.hpp"
#include "cycledm/types.hpp"

namespace cycledm::diffusion {

// Per-item conditioning handed to a noise predictor.
struct PredictorInputs {
  std::vector<int> timesteps;
  std::vector<ClassToken> classes;
  std::vector<Domain> domains;

  size_t size() const { return timesteps.size(); }
};

// eps_theta(x_t, c, domain, t). Output has the shape of x_t and depends only
// on the inputs and the parameters.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual ag::Var predict(const ag::Var& x_t, const PredictorInputs& in) const = 0;
};

// Condition shared by every step of one reverse trajectory.
struct Condition {
  std::vector<ClassToken> classes;  // one per image
  Domain domain = Domain::kHandwritten;

  PredictorInputs at(int t) const;
};

// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);
// Per-image timesteps (leading dimension of x0).
Tensor q_sample(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& schedule);

// One reverse step t -> t-1:
//   (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_theta) / sqrt(alpha_t) + sigma_t z.
Tensor p_sample_step(const NoisePredictor& model, const Tensor& x_t, int t, const Condition& cond,
                     const NoiseSchedule& schedule, const Tensor& z);

// Runs the reverse chain from t_start down to 1. z is drawn from `rng` for
// every step except the last, which is noise-free. t_start = 0 returns x_t.
Tensor denoise_from(const NoisePredictor& model, const Tensor& x_t, int t_start, const Condition& cond,
                    const NoiseSchedule& schedule, RngStream& rng);

// Full generation from x_T ~ N(0, I).
Tensor generate(const NoisePredictor& model, const Shape& shape, const Condition& cond,
                const NoiseSchedule& schedule, RngStream& rng);

// Mean over all pixels of (eps - eps_theta(x_t, c, t))^2 with t ~ U{1..T} and
// eps ~ N(0, I) drawn per image from `rng`.
ag::Var ddpm_loss(const NoisePredictor& model, const Tensor& x0, const std::vector<ClassToken>& classes,
                  const std::vector<Domain>& domains, const NoiseSchedule& schedule, RngStream& rng);
ag::Var ddpm_loss(const NoisePredictor& model, const ImageBatch& x0, const NoiseSchedule& schedule, RngStream& rng);

// Clamps every pixel into [-1, 1].
Tensor clamp_unit(Tensor x);

}  // namespace cycledm::diffusion
