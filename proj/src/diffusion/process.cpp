#include "cycledm/diffusion/process.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cycledm::diffusion {
namespace {

int64_t item_count(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("expected an NHWC image tensor, got " + shape_str(x.shape()));
  return x.dim(0);
}

}  // namespace

PredictorInputs Condition::at(int t) const {
  PredictorInputs in;
  in.timesteps.assign(classes.size(), t);
  in.classes = classes;
  in.domains.assign(classes.size(), domain);
  return in;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  std::vector<int> ts(static_cast<size_t>(item_count(x0)), t);
  return q_sample(x0, ts, eps, schedule);
}

Tensor q_sample(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& schedule) {
  check_same_shape(x0, eps, "q_sample");
  const int64_t n = item_count(x0);
  if (static_cast<int64_t>(t.size()) != n) throw std::invalid_argument("q_sample: one timestep per image required");
  const int64_t per = n == 0 ? 0 : x0.numel() / n;
  Tensor out(x0.shape());
  for (int64_t i = 0; i < n; ++i) {
    const int ti = t[static_cast<size_t>(i)];
    schedule.check_timestep(ti);
    const double a = std::sqrt(schedule.alpha_bar(ti));
    const double b = std::sqrt(1.0 - schedule.alpha_bar(ti));
    for (int64_t j = i * per; j < (i + 1) * per; ++j) out[j] = static_cast<float>(a * x0[j] + b * eps[j]);
  }
  return out;
}

Tensor p_sample_step(const NoisePredictor& model, const Tensor& x_t, int t, const Condition& cond,
                     const NoiseSchedule& schedule, const Tensor& z) {
  if (t == 0) throw std::out_of_range("p_sample_step: t = 0 has no reverse step");
  schedule.check_timestep(t);
  check_same_shape(x_t, z, "p_sample_step");
  if (static_cast<int64_t>(cond.classes.size()) != item_count(x_t)) {
    throw std::invalid_argument("p_sample_step: one class token per image required");
  }
  ag::NoGradGuard no_grad;
  const ag::Var eps = model.predict(ag::Var(x_t), cond.at(t));
  check_same_shape(eps.value(), x_t, "p_sample_step: predictor output");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
  const double eps_coef = (1.0 - schedule.alpha(t)) / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double sigma = schedule.sigma(t);
  Tensor out(x_t.shape());
  const Tensor& e = eps.value();
  for (int64_t j = 0; j < x_t.numel(); ++j) {
    out[j] = static_cast<float>(inv_sqrt_alpha * (x_t[j] - eps_coef * e[j]) + sigma * z[j]);
  }
  return out;
}

Tensor denoise_from(const NoisePredictor& model, const Tensor& x_t, int t_start, const Condition& cond,
                    const NoiseSchedule& schedule, RngStream& rng) {
  schedule.check_timestep(t_start, 0);
  Tensor x = x_t;
  for (int t = t_start; t >= 1; --t) {
    const Tensor z = t > 1 ? rng.normal_tensor(x.shape()) : Tensor(x.shape(), 0.0f);
    x = p_sample_step(model, x, t, cond, schedule, z);
  }
  return x;
}

Tensor generate(const NoisePredictor& model, const Shape& shape, const Condition& cond,
                const NoiseSchedule& schedule, RngStream& rng) {
  Tensor x_T = rng.normal_tensor(shape);
  return denoise_from(model, x_T, schedule.steps(), cond, schedule, rng);
}

ag::Var ddpm_loss(const NoisePredictor& model, const Tensor& x0, const std::vector<ClassToken>& classes,
                  const std::vector<Domain>& domains, const NoiseSchedule& schedule, RngStream& rng) {
  const int64_t n = item_count(x0);
  if (n == 0) throw std::invalid_argument("ddpm_loss: empty batch");
  if (static_cast<int64_t>(classes.size()) != n || static_cast<int64_t>(domains.size()) != n) {
    throw std::invalid_argument("ddpm_loss: conditioning size does not match batch");
  }
  PredictorInputs in;
  in.classes = classes;
  in.domains = domains;
  for (int64_t i = 0; i < n; ++i) in.timesteps.push_back(rng.uniform_int(1, schedule.steps()));
  const Tensor eps = rng.normal_tensor(x0.shape());
  const Tensor x_t = q_sample(x0, in.timesteps, eps, schedule);
  const ag::Var pred = model.predict(ag::Var(x_t), in);
  check_same_shape(pred.value(), x0, "ddpm_loss: predictor output");
  return ag::mean(ag::square(ag::Var(eps) - pred));
}

ag::Var ddpm_loss(const NoisePredictor& model, const ImageBatch& x0, const NoiseSchedule& schedule, RngStream& rng) {
  x0.validate(/*require_unit_range=*/false);
  return ddpm_loss(model, x0.pixels, to_tokens(x0.classes),
                   std::vector<Domain>(static_cast<size_t>(x0.size()), x0.domain), schedule, rng);
}

Tensor clamp_unit(Tensor x) {
  for (auto& v : x.data()) v = std::clamp(v, -1.0f, 1.0f);
  return x;
}

}  // namespace cycledm::diffusion
