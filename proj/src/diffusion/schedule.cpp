#include "cycledm/diffusion/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cycledm::diffusion {

NoiseSchedule make_schedule(int T, double beta_1, double beta_T) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1, got " + std::to_string(T));
  if (!std::isfinite(beta_1) || !std::isfinite(beta_T)) throw std::invalid_argument("make_schedule: non-finite beta");
  if (!(beta_1 > 0.0) || !(beta_1 <= beta_T) || !(beta_T < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_1 <= beta_T < 1, got beta_1=" + std::to_string(beta_1) +
                                " beta_T=" + std::to_string(beta_T));
  }
  if (T == 1 && beta_1 != beta_T) throw std::invalid_argument("make_schedule: T = 1 requires beta_1 == beta_T");
  NoiseSchedule s;
  s.T_ = T;
  s.beta_1_ = beta_1;
  s.beta_T_ = beta_T;
  const auto n = static_cast<size_t>(T) + 1;
  s.betas_.assign(n, 0.0);
  s.alphas_.assign(n, 1.0);
  s.alpha_bars_.assign(n, 1.0);
  s.sigmas_.assign(n, 0.0);
  for (int t = 1; t <= T; ++t) {
    const auto i = static_cast<size_t>(t);
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.betas_[i] = t == T ? beta_T : beta_1 + (beta_T - beta_1) * frac;
    s.alphas_[i] = 1.0 - s.betas_[i];
    s.alpha_bars_[i] = s.alpha_bars_[i - 1] * s.alphas_[i];
    s.sigmas_[i] = std::sqrt(s.betas_[i]);
  }
  return s;
}

void NoiseSchedule::check_timestep(int t, int lo) const {
  if (t < lo || t > T_) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                            std::to_string(T_) + "]");
  }
}

}  // namespace cycledm::diffusion
