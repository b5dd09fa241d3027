#pragma once

#include <vector>

namespace cycledm::diffusion {

// Linear variance schedule and its derived tables. All tables are indexed by
// timestep t = 0..T; index 0 holds the conventions beta_0 = 0, alpha_bar_0 = 1.
class NoiseSchedule {
 public:
  int steps() const { return T_; }
  double beta_first() const { return beta_1_; }
  double beta_last() const { return beta_T_; }

  double beta(int t) const { return betas_.at(static_cast<size_t>(t)); }
  double alpha(int t) const { return alphas_.at(static_cast<size_t>(t)); }
  double alpha_bar(int t) const { return alpha_bars_.at(static_cast<size_t>(t)); }
  double sigma(int t) const { return sigmas_.at(static_cast<size_t>(t)); }

  // Throws std::out_of_range unless lo <= t <= T.
  void check_timestep(int t, int lo = 1) const;

  friend NoiseSchedule make_schedule(int T, double beta_1, double beta_T);

 private:
  int T_ = 0;
  double beta_1_ = 0.0, beta_T_ = 0.0;
  std::vector<double> betas_, alphas_, alpha_bars_, sigmas_;
};

// betas interpolate linearly from beta_1 (t = 1) to beta_T (t = T).
NoiseSchedule make_schedule(int T, double beta_1, double beta_T);

}  // namespace cycledm::diffusion
