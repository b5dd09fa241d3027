#include <cmath>

#include "cycledm/checkpoint.hpp"
#include "cycledm/conversion/losses.hpp"
#include "cycledm/conversion/pipeline.hpp"
#include "cycledm/datasets/synthetic.hpp"
#include "doctest.h"
#include "fd_check.hpp"
#include "temp_dir.hpp"

using namespace cycledm;
using namespace cycledm::conversion;
using ag::Var;

namespace {

FunctionConverter shift(float delta) {
  return FunctionConverter([delta](const Var& x, const std::vector<int>&) { return x + delta; });
}

Tensor constant(const Shape& shape, float v) { return Tensor(shape, v); }

// Values on a 1/64 grid so that +-0.25 shifts are exact in float.
Tensor grid_values(const Shape& shape, int offset) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(((i * 7 + offset) % 97) - 48) / 64.0f;
  return t;
}

NoisyBatches batches(const Tensor& hw, const Tensor& mp) {
  NoisyBatches b;
  b.x_t = Var(hw);
  b.x_prime_t = Var(mp);
  for (int64_t i = 0; i < hw.dim(0); ++i) b.c.push_back(static_cast<int>(i % 26));
  for (int64_t i = 0; i < mp.dim(0); ++i) b.c_prime.push_back(static_cast<int>((i * 5) % 26));
  return b;
}

// Per-image score sum_j (a_j x_j + 0.5 (b_j x_j)^2) with parameters a, b.
class QuadraticCritic : public Critic {
 public:
  QuadraticCritic(Tensor a, Tensor b) : a_(std::move(a), true), b_(std::move(b), true) {}
  Var score(const Var& x, const std::vector<int>&) const override {
    const int64_t n = x.dim(0), per = x.numel() / n;
    const Var flat = ag::reshape(x, {n, per});
    const Var a = ag::expand(ag::reshape(a_, {1, per}), {n, per});
    const Var b = ag::expand(ag::reshape(b_, {1, per}), {n, per});
    const Var terms = a * flat + ag::square(b * flat) * 0.5f;
    return ag::reshape(ag::reduce_to(terms, {n, 1}), {n});
  }
  Var a_, b_;
};

ConverterConfig tiny_converter() {
  ConverterConfig c;
  c.channels = 4;
  c.res_blocks = 1;
  c.groups = 2;
  c.disc_channels = 4;
  c.disc_layers = 2;
  return c;
}

diffusion::DdpmModel tiny_ddpm(uint64_t seed) {
  diffusion::UNetConfig c;
  c.image_size = 8;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.groups = 4;
  c.embed_dim = 16;
  diffusion::DdpmModel m = diffusion::make_ddpm(c, false, diffusion::make_schedule(20, 1e-2, 0.3), seed);
  RngStream r(seed + 100);
  for (auto& p : m.network->parameters()) p.mutable_value() = r.uniform_tensor(p.shape(), -0.05f, 0.05f);
  return m;
}

ImageBatch image_batch(Domain d, int n, uint64_t seed) {
  RngStream r(seed);
  ImageBatch b;
  b.pixels = r.uniform_tensor({n, 8, 8, 1}, -1.0f, 1.0f);
  b.domain = d;
  for (int i = 0; i < n; ++i) b.classes.push_back((i * 3) % 26);
  return b;
}

}  // namespace

TEST_CASE("cycle_loss hand-evaluated cases") {
  const Tensor hw = grid_values({3, 4, 4, 1}, 0), mp = grid_values({2, 4, 4, 1}, 5);
  const NoisyBatches b = batches(hw, mp);
  CHECK(cycle_loss(identity_converter(), identity_converter(), b).item() == 0.0f);
  CHECK(cycle_loss(shift(0.25f), shift(-0.25f), b).item() == 0.0f);

  const NoisyBatches cb = batches(constant({2, 4, 4, 1}, 0.3f), constant({2, 4, 4, 1}, -0.6f));
  CHECK(cycle_loss(identity_converter(), shift(1.0f), cb).item() == doctest::Approx(2.0).epsilon(1e-6));
  CHECK_THROWS(cycle_loss(FunctionConverter([](const Var& x, const std::vector<int>&) { return ag::slice_last(x, 0, 0); }),
                          identity_converter(), b));
}

TEST_CASE("identity_loss hand-evaluated cases") {
  const NoisyBatches b = batches(grid_values({3, 4, 4, 1}, 1), grid_values({3, 4, 4, 1}, 2));
  CHECK(identity_loss(identity_converter(), identity_converter(), b).item() == 0.0f);
  const NoisyBatches cb = batches(constant({2, 4, 4, 1}, 0.1f), constant({2, 4, 4, 1}, 0.7f));
  CHECK(identity_loss(shift(2.0f), identity_converter(), cb).item() == doctest::Approx(2.0).epsilon(1e-6));

  RngStream init(3);
  ConversionNet F(tiny_converter(), init), G(tiny_converter(), init);
  ag::NoGradGuard ng;
  CHECK(identity_loss(F, G, b).item() >= 0.0f);
  CHECK(cycle_loss(F, G, b).item() >= 0.0f);
}

TEST_CASE("adversarial_loss plug-in values") {
  const Var real(grid_values({3, 2, 2, 1}, 0)), fake(grid_values({3, 2, 2, 1}, 9));
  const std::vector<int> cls{0, 1, 2};
  const FunctionCritic half([](const Var& x, const std::vector<int>&) { return Var(Tensor({x.dim(0)}, 0.0f)); });
  const AdversarialTerms t = adversarial_loss(identity_converter(), half, real, cls, fake, cls);
  CHECK(t.disc_term.item() == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-6));
  CHECK(t.gen_term.item() == doctest::Approx(-std::log(0.5)).epsilon(1e-6));

  // Scores far on the right side: D(real) = 1, D(fake) = 0 before clamping.
  const Tensor real_marker = real.value();
  const FunctionCritic perfect([real_marker](const Var& x, const std::vector<int>&) {
    Tensor s({x.dim(0)});
    for (int64_t i = 0; i < x.dim(0); ++i) s[i] = x.value()[i * 4] == real_marker[i * 4] ? 60.0f : -60.0f;
    return Var(s);
  });
  const AdversarialTerms p = adversarial_loss(identity_converter(), perfect, real, cls, fake, cls);
  CHECK(std::abs(p.disc_term.item()) < 1e-6);
  CHECK(p.disc_term.item() <= 0.0f);
  // The floor keeps the generator term finite when D(fake) underflows.
  CHECK(p.gen_term.item() == doctest::Approx(-std::log(1e-7)).epsilon(1e-5));

  const FunctionCritic bad([](const Var& x, const std::vector<int>&) {
    return Var(Tensor({x.dim(0)}, std::numeric_limits<float>::quiet_NaN()));
  });
  CHECK_THROWS(adversarial_loss(identity_converter(), bad, real, cls, fake, cls));
}

TEST_CASE("generator term gradient matches finite differences") {
  const QuadraticCritic critic(Tensor({4}, std::vector<float>{0.7f, -1.1f, 0.4f, 0.9f}),
                               Tensor({4}, std::vector<float>{0.5f, 0.3f, -0.8f, 0.6f}));
  const std::vector<int> cls{3};
  const Var real(Tensor({1, 2, 2, 1}, std::vector<float>{0.2f, -0.4f, 0.9f, 0.1f}));
  const Tensor y0({1, 2, 2, 1}, std::vector<float>{-0.3f, 0.5f, 0.25f, -0.6f});
  auto gen_term = [&](const Var& y) { return adversarial_loss(identity_converter(), critic, real, cls, y, cls).gen_term; };
  Var y(y0, true);
  const Tensor analytic = ag::grad(gen_term(y), std::vector<Var>{y})[0].value();
  const Tensor numeric = testing::numeric_grad(
      [&](const Tensor& t) {
        ag::NoGradGuard ng;
        return static_cast<double>(gen_term(Var(t)).item());
      },
      y0, 1e-2);
  CHECK(testing::relative_error(analytic, numeric) < 1e-3);
}

TEST_CASE("gradient_penalty closed forms") {
  const Tensor real = grid_values({3, 4, 4, 1}, 0), fake = grid_values({3, 4, 4, 1}, 11);
  const std::vector<int> cls{0, 1, 2};
  const FunctionCritic pixel_sum([](const Var& x, const std::vector<int>&) {
    const int64_t n = x.dim(0);
    return ag::reshape(ag::reduce_to(ag::reshape(x, {n, x.numel() / n}), {n, 1}), {n});
  });
  RngStream rng(1);
  CHECK(gradient_penalty(pixel_sum, real, fake, cls, rng).item() == doctest::Approx(9.0).epsilon(1e-5));

  Tensor unit({16}, 0.0f);
  unit[0] = 0.6f;
  unit[5] = 0.8f;
  const QuadraticCritic linear(unit, Tensor({16}, 0.0f));
  CHECK(gradient_penalty(linear, real, fake, cls, rng).item() == doctest::Approx(0.0).epsilon(1e-6));

  RngStream init(4);
  Discriminator disc(tiny_converter(), init);
  for (uint64_t s = 0; s < 4; ++s) {
    RngStream r(s);
    const Var gp = gradient_penalty(disc, real.reshaped({3, 4, 4, 1}), fake, cls, r);
    CHECK(gp.item() >= 0.0f);
    CHECK(std::isfinite(gp.item()));
  }
}

TEST_CASE("gradient_penalty parameter gradients match finite differences") {
  RngStream r(8);
  const Tensor real = r.uniform_tensor({2, 2, 2, 1}, -1.0f, 1.0f), fake = r.uniform_tensor({2, 2, 2, 1}, -1.0f, 1.0f);
  const std::vector<int> cls{4, 9};
  const Tensor a0({4}, std::vector<float>{0.4f, -0.3f, 0.2f, 0.5f});
  const Tensor b0({4}, std::vector<float>{0.9f, 0.6f, -0.7f, 0.3f});
  auto penalty = [&](const Tensor& a, const Tensor& b, Var* pa, Var* pb) {
    QuadraticCritic critic(a, b);
    if (pa) *pa = critic.a_;
    if (pb) *pb = critic.b_;
    RngStream u(77);
    return gradient_penalty(critic, real, fake, cls, u);
  };
  Var pa, pb;
  const Var gp = penalty(a0, b0, &pa, &pb);
  const auto grads = ag::grad(gp, std::vector<Var>{pa, pb});
  const Tensor num_a = testing::numeric_grad([&](const Tensor& a) { return static_cast<double>(penalty(a, b0, nullptr, nullptr).item()); }, a0, 1e-2);
  const Tensor num_b = testing::numeric_grad([&](const Tensor& b) { return static_cast<double>(penalty(a0, b, nullptr, nullptr).item()); }, b0, 1e-2);
  CHECK(testing::relative_error(grads[0].value(), num_a) < 1e-3);
  CHECK(testing::relative_error(grads[1].value(), num_b) < 1e-3);
}

TEST_CASE("total_loss decomposition") {
  RngStream init(5);
  ConversionNet F(tiny_converter(), init), G(tiny_converter(), init);
  Discriminator D(tiny_converter(), init), Dp(tiny_converter(), init);
  RngStream data(6);
  const NoisyBatches b = batches(data.normal_tensor({4, 8, 8, 1}), data.normal_tensor({4, 8, 8, 1}));

  ConversionHyperparams hp;
  RngStream gp(1);
  const LossParts p = total_loss({F, G, D, Dp}, b, hp, gp);
  CHECK(p.generator_total == hp.lambda_cycle * p.cycle + hp.lambda_identity * p.identity + p.adv_f + p.adv_g);
  CHECK(std::abs(p.generator_total - (p.adv_f + p.adv_g + 2.0 * p.cycle + 1.0 * p.identity)) < 1e-9);
  CHECK(std::abs(p.discriminator_total - (-(p.disc_d + p.disc_d_prime) + 10.0 * (p.gp_d + p.gp_d_prime))) < 1e-9);
  for (double v : {p.adv_f, p.adv_g, p.cycle, p.identity, p.gp_d, p.gp_d_prime}) CHECK(v >= 0.0);

  ConversionHyperparams adv_only = hp;
  adv_only.lambda_cycle = adv_only.lambda_identity = 0.0;
  RngStream gp2(1);
  const LossParts q = total_loss({F, G, D, Dp}, b, adv_only, gp2);
  CHECK(q.generator_total == q.adv_f + q.adv_g);

  RngStream gp3(1);
  const LossParts ident = total_loss({identity_converter(), identity_converter(), D, Dp}, b, hp, gp3);
  CHECK(ident.cycle == 0.0);
  CHECK(ident.identity == 0.0);
  CHECK(ident.generator_total == ident.adv_f + ident.adv_g);
}

TEST_CASE("conversion networks shapes and determinism") {
  RngStream a(9), b(9);
  ConversionNet n1(tiny_converter(), a), n2(tiny_converter(), b);
  Discriminator d(tiny_converter(), a);
  RngStream data(1);
  const Var x(data.normal_tensor({3, 8, 8, 1}));
  ag::NoGradGuard ng;
  const Tensor y = n1.convert(x, {0, 12, 25}).value();
  CHECK(y.shape() == x.shape());
  CHECK(y == n2.convert(x, {0, 12, 25}).value());
  CHECK(d.score(x, {0, 12, 25}).shape() == Shape{3});
  CHECK_THROWS(n1.convert(x, {0, 1}));
  CHECK_THROWS(n1.convert(x, {0, 1, 26}));
}

TEST_CASE("convert reduces to SDEdit with an identity network") {
  const diffusion::DdpmModel ddpm = tiny_ddpm(1);
  const ImageBatch hw = image_batch(Domain::kHandwritten, 4, 2);
  for (int t : {1, 7, 20}) {
    RngStream r1(33), r2(33);
    const ImageBatch a = convert_with(identity_converter(), t, hw, Direction::kHwToMp, ddpm, r1);
    const ImageBatch b = sdedit_convert(hw, Direction::kHwToMp, t, ddpm, r2);
    CHECK(a.pixels == b.pixels);
    CHECK(a.domain == Domain::kPrinted);
  }
}

TEST_CASE("sdedit_convert limits and replay") {
  const diffusion::DdpmModel ddpm = tiny_ddpm(2);
  const ImageBatch mp = image_batch(Domain::kPrinted, 3, 4);
  RngStream r0(1);
  const ImageBatch same = sdedit_convert(mp, Direction::kMpToHw, 0, ddpm, r0);
  CHECK(same.pixels == mp.pixels);

  RngStream r1(5), r2(5);
  const ImageBatch a = sdedit_convert(mp, Direction::kMpToHw, 10, ddpm, r1);
  CHECK(a.pixels == sdedit_convert(mp, Direction::kMpToHw, 10, ddpm, r2).pixels);
  for (float v : a.pixels.data()) CHECK(std::abs(v) <= 1.0f);

  // With a schedule that reaches ~pure noise the source no longer matters.
  diffusion::DdpmModel noisy = tiny_ddpm(2);
  noisy.schedule = diffusion::make_schedule(20, 0.5, 0.999);
  ImageBatch other = image_batch(Domain::kPrinted, 3, 99);
  other.classes = mp.classes;
  RngStream r3(6), r4(6);
  const ImageBatch x = sdedit_convert(mp, Direction::kMpToHw, 20, noisy, r3);
  const ImageBatch y = sdedit_convert(other, Direction::kMpToHw, 20, noisy, r4);
  for (int64_t i = 0; i < x.pixels.numel(); ++i) CHECK(std::abs(x.pixels[i] - y.pixels[i]) < 1e-4);

  RngStream r5(1);
  CHECK_THROWS(sdedit_convert(mp, Direction::kHwToMp, 5, ddpm, r5));
  CHECK_THROWS(sdedit_convert(mp, Direction::kMpToHw, 21, ddpm, r5));
}

TEST_CASE("conversion training keeps the DDPM frozen and replays") {
  testing::TempDir tmp;
  const diffusion::DdpmModel ddpm = tiny_ddpm(3);
  datasets::SyntheticGlyphSpec spec;
  spec.resolution = 8;
  spec.per_class = 2;
  const auto [hw, mp] = datasets::generate_synthetic(spec);

  save_ddpm(tmp.path() / "before.ckpt", ddpm);
  ConversionHyperparams hp;
  hp.steps = 3;
  hp.batch_size = 4;
  ConversionPair p1 = make_pair(8, tiny_converter(), hp, 7);
  const auto log = train_conversion(p1, ddpm, hw, mp, 7);
  CHECK(log.size() == 3);
  save_ddpm(tmp.path() / "after.ckpt", ddpm);
  CHECK(sha256_file(tmp.path() / "before.ckpt") == sha256_file(tmp.path() / "after.ckpt"));
  CHECK(p1.ddpm_fingerprint == ddpm.fingerprint());

  ConversionPair p2 = make_pair(8, tiny_converter(), hp, 7);
  train_conversion(p2, ddpm, hw, mp, 7);
  save_pair(tmp.path() / "p1.ckpt", p1);
  save_pair(tmp.path() / "p2.ckpt", p2);
  CHECK(sha256_file(tmp.path() / "p1.ckpt") == sha256_file(tmp.path() / "p2.ckpt"));

  ConversionPair bad_t = make_pair(21, tiny_converter(), hp, 7);
  CHECK_THROWS(train_conversion(bad_t, ddpm, hw, mp, 7));
  ConversionPair p3 = make_pair(8, tiny_converter(), hp, 7);
  datasets::DomainDataset empty_mp;
  empty_mp.domain = Domain::kPrinted;
  CHECK_THROWS(train_conversion(p3, ddpm, hw, empty_mp, 7));
  CHECK_THROWS(train_conversion(p3, ddpm, mp, hw, 7));
}

TEST_CASE("conversion pair checkpoint and compatibility checks") {
  testing::TempDir tmp;
  const diffusion::DdpmModel ddpm = tiny_ddpm(4), other = tiny_ddpm(5);
  ConversionPair pair = make_pair(6, tiny_converter(), ConversionHyperparams{}, 1);
  pair.ddpm_fingerprint = ddpm.fingerprint();
  save_pair(tmp.path() / "pair.ckpt", pair);

  const ConversionPair loaded = load_pair(tmp.path() / "pair.ckpt", &ddpm);
  CHECK(loaded.t_star == 6);
  CHECK(loaded.config == pair.config);
  CHECK(tensors_fingerprint(module_tensors(*loaded.F)) == tensors_fingerprint(module_tensors(*pair.F)));
  CHECK(tensors_fingerprint(module_tensors(*loaded.D_prime)) == tensors_fingerprint(module_tensors(*pair.D_prime)));
  CHECK_THROWS_AS(load_pair(tmp.path() / "pair.ckpt", &other), CheckpointError);
  CHECK_THROWS_AS(diffusion::load_ddpm(tmp.path() / "pair.ckpt"), CheckpointError);

  const ImageBatch hw = image_batch(Domain::kHandwritten, 2, 1);
  RngStream r(1);
  CHECK_THROWS(convert(hw, Direction::kHwToMp, loaded, 7, ddpm, r));
  CHECK_THROWS(convert(hw, Direction::kHwToMp, loaded, 6, other, r));
  CHECK_THROWS(convert(hw, Direction::kMpToHw, loaded, 6, ddpm, r));
  const ImageBatch out = convert(hw, Direction::kHwToMp, loaded, 6, ddpm, r);
  CHECK(out.pixels.shape() == hw.pixels.shape());
  CHECK(out.domain == Domain::kPrinted);
}
