#pragma once

#include <vector>

#include "cycledm/conversion/networks.hpp"
#include "cycledm/rng.hpp"
#include "json.hpp"

namespace cycledm::conversion {

// Noisy batches of both domains at the pair's timestep.
struct NoisyBatches {
  ag::Var x_t;              // HW
  std::vector<int> c;
  ag::Var x_prime_t;        // MP
  std::vector<int> c_prime;
};

// Mean per-pixel L1 of G(F(x_t, c), c) - x_t plus that of F(G(x'_t, c'), c') - x'_t.
ag::Var cycle_loss(const Converter& F, const Converter& G, const NoisyBatches& b);

// Mean per-pixel L1 of F(x'_t, c') - x'_t plus that of G(x_t, c) - x_t.
ag::Var identity_loss(const Converter& F, const Converter& G, const NoisyBatches& b);

struct AdversarialTerms {
  ag::Var gen_term;   // -E[log D(gen(fake_source))], minimized by the generator
  ag::Var disc_term;  // E[log D(real)] + E[log(1 - D(gen(fake_source)))], maximized by D
};

inline constexpr float kLogFloor = 1e-7f;

AdversarialTerms adversarial_loss(const Converter& gen, const Critic& disc, const ag::Var& real,
                                  const std::vector<int>& real_classes, const ag::Var& fake_source,
                                  const std::vector<int>& fake_classes);

// E[(||grad_x disc(x_hat, c)||_2 - 1)^2] over x_hat = u real + (1 - u) fake
// with one u ~ U(0, 1) per image. Differentiable with respect to the critic's
// parameters.
ag::Var gradient_penalty(const Critic& disc, const Tensor& real, const Tensor& fake, const std::vector<int>& classes,
                         RngStream& rng);

struct ConversionHyperparams {
  double lambda_cycle = 2.0;
  double lambda_identity = 1.0;
  double gp_weight = 10.0;
  int batch_size = 16;
  int steps = 600;
  double learning_rate = 2e-4;
  double disc_learning_rate = 2e-4;
  double beta1 = 0.5;

  void validate() const;
  nlohmann::json to_json() const;
  static ConversionHyperparams from_json(const nlohmann::json& j);
};

struct ConversionModels {
  const Converter& F;  // HW -> MP
  const Converter& G;  // MP -> HW
  const Critic& D;     // HW manifold
  const Critic& D_prime;  // MP manifold
};

// Every term of the objective, as differentiable values and as doubles.
struct LossParts {
  double adv_f = 0, adv_g = 0, cycle = 0, identity = 0;
  double disc_d = 0, disc_d_prime = 0, gp_d = 0, gp_d_prime = 0;
  double generator_total = 0;      // adv_f + adv_g + l_cyc cycle + l_id identity
  double discriminator_total = 0;  // -(disc_d + disc_d_prime) + w_gp (gp_d + gp_d_prime)

  nlohmann::json to_json() const;
};

struct GeneratorObjective {
  ag::Var total;
  LossParts parts;  // generator fields only
};
struct DiscriminatorObjective {
  ag::Var total;
  LossParts parts;  // discriminator fields only
};

GeneratorObjective generator_objective(const ConversionModels& m, const NoisyBatches& b,
                                       const ConversionHyperparams& hp);
DiscriminatorObjective discriminator_objective(const ConversionModels& m, const NoisyBatches& b,
                                               const ConversionHyperparams& hp, RngStream& gp_rng);

// Both sides on the same batches; fields of the two objectives merged.
LossParts total_loss(const ConversionModels& m, const NoisyBatches& b, const ConversionHyperparams& hp,
                     RngStream& gp_rng);

}  // namespace cycledm::conversion
