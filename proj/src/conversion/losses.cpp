#include "cycledm/conversion/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace cycledm::conversion {
namespace {

ag::Var l1(const ag::Var& a, const ag::Var& b) {
  check_same_shape(a.value(), b.value(), "L1 loss");
  return ag::mean(ag::abs(a - b));
}

ag::Var log_sigmoid_floor(const ag::Var& s) { return ag::log(ag::clamp_min(ag::sigmoid(s), kLogFloor)); }

void check_finite(const ag::Var& v, const char* what) {
  for (float x : v.value().data()) {
    if (!std::isfinite(x)) throw std::runtime_error(std::string("non-finite ") + what);
  }
}

ag::Var cycle_from(const Converter& F, const Converter& G, const NoisyBatches& b, const ag::Var& fake_mp,
                   const ag::Var& fake_hw) {
  return l1(G.convert(fake_mp, b.c), b.x_t) + l1(F.convert(fake_hw, b.c_prime), b.x_prime_t);
}

ag::Var gen_term_from(const Critic& disc, const ag::Var& fake, const std::vector<int>& classes) {
  const ag::Var s_fake = disc.score(fake, classes);
  check_finite(s_fake, "discriminator score");
  return -ag::mean(log_sigmoid_floor(s_fake));
}

}  // namespace

ag::Var cycle_loss(const Converter& F, const Converter& G, const NoisyBatches& b) {
  return cycle_from(F, G, b, F.convert(b.x_t, b.c), G.convert(b.x_prime_t, b.c_prime));
}

ag::Var identity_loss(const Converter& F, const Converter& G, const NoisyBatches& b) {
  return l1(F.convert(b.x_prime_t, b.c_prime), b.x_prime_t) + l1(G.convert(b.x_t, b.c), b.x_t);
}

AdversarialTerms adversarial_loss(const Converter& gen, const Critic& disc, const ag::Var& real,
                                  const std::vector<int>& real_classes, const ag::Var& fake_source,
                                  const std::vector<int>& fake_classes) {
  const ag::Var fake = gen.convert(fake_source, fake_classes);
  check_same_shape(real.value(), fake.value(), "adversarial_loss");
  const ag::Var s_real = disc.score(real, real_classes);
  const ag::Var s_fake = disc.score(fake, fake_classes);
  check_finite(s_real, "discriminator score");
  check_finite(s_fake, "discriminator score");
  AdversarialTerms t;
  t.disc_term = ag::mean(log_sigmoid_floor(s_real)) + ag::mean(log_sigmoid_floor(-s_fake));
  t.gen_term = -ag::mean(log_sigmoid_floor(s_fake));
  return t;
}

ag::Var gradient_penalty(const Critic& disc, const Tensor& real, const Tensor& fake, const std::vector<int>& classes,
                         RngStream& rng) {
  check_same_shape(real, fake, "gradient_penalty");
  if (real.rank() < 1 || real.dim(0) == 0) throw std::invalid_argument("gradient_penalty: empty batch");
  const int64_t n = real.dim(0), per = real.numel() / n;
  Tensor mixed(real.shape());
  for (int64_t i = 0; i < n; ++i) {
    const float u = static_cast<float>(rng.uniform());
    for (int64_t j = i * per; j < (i + 1) * per; ++j) mixed[j] = u * real[j] + (1.0f - u) * fake[j];
  }
  ag::Var x_hat(mixed, /*requires_grad=*/true);
  const ag::Var scores = disc.score(x_hat, classes);
  const ag::Var g = ag::grad(ag::sum(scores), std::vector<ag::Var>{x_hat}, /*create_graph=*/true)[0];
  check_finite(g, "gradient in gradient_penalty");
  const ag::Var sq = ag::reduce_to(ag::reshape(ag::square(g), {n, per}), {n, 1});
  const ag::Var norm = ag::sqrt(sq + 1e-12f);
  return ag::mean(ag::square(norm - 1.0f));
}

void ConversionHyperparams::validate() const {
  if (!(lambda_cycle >= 0.0) || !(lambda_identity >= 0.0) || !(gp_weight >= 0.0)) {
    throw std::invalid_argument("conversion loss weights must be >= 0");
  }
  if (batch_size < 1 || steps < 1) throw std::invalid_argument("conversion batch_size and steps must be >= 1");
  if (!(learning_rate > 0.0) || !(disc_learning_rate > 0.0)) {
    throw std::invalid_argument("conversion learning rates must be > 0");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("conversion beta1 must lie in [0, 1)");
}

nlohmann::json ConversionHyperparams::to_json() const {
  return {{"lambda_cycle", lambda_cycle},   {"lambda_identity", lambda_identity},
          {"gp_weight", gp_weight},         {"batch_size", batch_size},
          {"steps", steps},                 {"learning_rate", learning_rate},
          {"disc_learning_rate", disc_learning_rate}, {"beta1", beta1}};
}

ConversionHyperparams ConversionHyperparams::from_json(const nlohmann::json& j) {
  ConversionHyperparams h;
  h.lambda_cycle = j.at("lambda_cycle").get<double>();
  h.lambda_identity = j.at("lambda_identity").get<double>();
  h.gp_weight = j.at("gp_weight").get<double>();
  h.batch_size = j.at("batch_size").get<int>();
  h.steps = j.at("steps").get<int>();
  h.learning_rate = j.at("learning_rate").get<double>();
  h.disc_learning_rate = j.at("disc_learning_rate").get<double>();
  h.beta1 = j.at("beta1").get<double>();
  h.validate();
  return h;
}

nlohmann::json LossParts::to_json() const {
  return {{"adv_f", adv_f},   {"adv_g", adv_g},   {"cycle", cycle},           {"identity", identity},
          {"disc_d", disc_d}, {"disc_d_prime", disc_d_prime}, {"gp_d", gp_d}, {"gp_d_prime", gp_d_prime},
          {"generator_total", generator_total}, {"discriminator_total", discriminator_total}};
}

GeneratorObjective generator_objective(const ConversionModels& m, const NoisyBatches& b,
                                       const ConversionHyperparams& hp) {
  // F(x) and G(x') feed both the adversarial and the cycle terms.
  const ag::Var fake_mp = m.F.convert(b.x_t, b.c);
  const ag::Var fake_hw = m.G.convert(b.x_prime_t, b.c_prime);
  check_same_shape(b.x_prime_t.value(), fake_mp.value(), "adversarial_loss");
  check_same_shape(b.x_t.value(), fake_hw.value(), "adversarial_loss");
  const ag::Var adv_f = gen_term_from(m.D_prime, fake_mp, b.c);
  const ag::Var adv_g = gen_term_from(m.D, fake_hw, b.c_prime);
  const ag::Var cyc = cycle_from(m.F, m.G, b, fake_mp, fake_hw);
  const ag::Var idt = identity_loss(m.F, m.G, b);
  GeneratorObjective out;
  out.total = adv_f + adv_g + cyc * static_cast<float>(hp.lambda_cycle) +
              idt * static_cast<float>(hp.lambda_identity);
  LossParts& p = out.parts;
  p.adv_f = adv_f.item();
  p.adv_g = adv_g.item();
  p.cycle = cyc.item();
  p.identity = idt.item();
  p.generator_total = p.adv_f + p.adv_g + hp.lambda_cycle * p.cycle + hp.lambda_identity * p.identity;
  return out;
}

DiscriminatorObjective discriminator_objective(const ConversionModels& m, const NoisyBatches& b,
                                               const ConversionHyperparams& hp, RngStream& gp_rng) {
  ag::Var fake_mp, fake_hw;
  {
    ag::NoGradGuard ng;
    fake_mp = ag::Var(m.F.convert(b.x_t, b.c).value());
    fake_hw = ag::Var(m.G.convert(b.x_prime_t, b.c_prime).value());
  }
  const AdversarialTerms dp = adversarial_loss(identity_converter(), m.D_prime, b.x_prime_t, b.c_prime, fake_mp, b.c);
  const AdversarialTerms d = adversarial_loss(identity_converter(), m.D, b.x_t, b.c, fake_hw, b.c_prime);
  // Interpolates take the class of the real batch.
  const ag::Var gp_dp = gradient_penalty(m.D_prime, b.x_prime_t.value(), fake_mp.value(), b.c_prime, gp_rng);
  const ag::Var gp_d = gradient_penalty(m.D, b.x_t.value(), fake_hw.value(), b.c, gp_rng);
  DiscriminatorObjective out;
  out.total = -(d.disc_term + dp.disc_term) + (gp_d + gp_dp) * static_cast<float>(hp.gp_weight);
  LossParts& p = out.parts;
  p.disc_d = d.disc_term.item();
  p.disc_d_prime = dp.disc_term.item();
  p.gp_d = gp_d.item();
  p.gp_d_prime = gp_dp.item();
  p.discriminator_total = -(p.disc_d + p.disc_d_prime) + hp.gp_weight * (p.gp_d + p.gp_d_prime);
  return out;
}

LossParts total_loss(const ConversionModels& m, const NoisyBatches& b, const ConversionHyperparams& hp,
                     RngStream& gp_rng) {
  LossParts p = generator_objective(m, b, hp).parts;
  const LossParts d = discriminator_objective(m, b, hp, gp_rng).parts;
  p.disc_d = d.disc_d;
  p.disc_d_prime = d.disc_d_prime;
  p.gp_d = d.gp_d;
  p.gp_d_prime = d.gp_d_prime;
  p.discriminator_total = d.discriminator_total;
  return p;
}

}  // namespace cycledm::conversion
