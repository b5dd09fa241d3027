#include "cycledm/conversion/pipeline.hpp"

#include <stdexcept>

#include "cycledm/checkpoint.hpp"
#include "cycledm/diffusion/process.hpp"

namespace cycledm::conversion {
namespace {

Tensor gather_images(const datasets::DomainDataset& ds, RngStream& rng, int batch, std::vector<int>& classes) {
  std::vector<int64_t> idx;
  for (int i = 0; i < batch; ++i) idx.push_back(rng.uniform_int(0, static_cast<int>(ds.size()) - 1));
  ImageBatch b = ds.batch(idx);
  classes = b.classes;
  return b.pixels;
}

std::vector<ag::Var> params_of(std::initializer_list<const nn::Module*> modules) {
  std::vector<ag::Var> out;
  for (const auto* m : modules) {
    for (auto& p : m->parameters()) out.push_back(p);
  }
  return out;
}

void check_source(const ImageBatch& x0, Direction direction) {
  x0.validate(/*require_unit_range=*/false);
  if (x0.domain != source_domain(direction)) {
    throw std::invalid_argument("conversion " + std::string(direction_name(direction)) + " given a " +
                                std::string(domain_name(x0.domain)) + " batch");
  }
}

}  // namespace

const Converter& ConversionPair::converter(Direction d) const {
  return d == Direction::kHwToMp ? static_cast<const Converter&>(*F) : static_cast<const Converter&>(*G);
}

ConversionPair make_pair(int t_star, const ConverterConfig& config, const ConversionHyperparams& hp, uint64_t seed) {
  config.validate();
  hp.validate();
  ConversionPair p;
  p.t_star = t_star;
  p.config = config;
  p.hyperparams = hp;
  RngStream rf = RngStream::derive(seed, "conversion/init/F");
  RngStream rg = RngStream::derive(seed, "conversion/init/G");
  RngStream rd = RngStream::derive(seed, "conversion/init/D");
  RngStream rdp = RngStream::derive(seed, "conversion/init/D_prime");
  p.F = std::make_shared<ConversionNet>(config, rf);
  p.G = std::make_shared<ConversionNet>(config, rg);
  p.D = std::make_shared<Discriminator>(config, rd);
  p.D_prime = std::make_shared<Discriminator>(config, rdp);
  return p;
}

std::vector<LossParts> train_conversion(ConversionPair& pair, const diffusion::DdpmModel& ddpm,
                                        const datasets::DomainDataset& hw, const datasets::DomainDataset& mp,
                                        uint64_t seed, const ConversionStepCallback& on_step) {
  const ConversionHyperparams& hp = pair.hyperparams;
  hp.validate();
  ddpm.schedule.check_timestep(pair.t_star);
  if (hw.empty() || mp.empty()) throw std::invalid_argument("train_conversion: both domains need training data");
  if (hw.domain != Domain::kHandwritten || mp.domain != Domain::kPrinted) {
    throw std::invalid_argument("train_conversion: expected an HW and an MP dataset");
  }
  const std::string fingerprint = ddpm.fingerprint();

  RngStream data_rng = RngStream::derive(seed, "conversion/data");
  RngStream noise_rng = RngStream::derive(seed, "conversion/noise");
  RngStream gp_rng = RngStream::derive(seed, "conversion/gp");

  const std::vector<ag::Var> gen_params = params_of({pair.F.get(), pair.G.get()});
  const std::vector<ag::Var> disc_params = params_of({pair.D.get(), pair.D_prime.get()});
  nn::Adam::Options gopt, dopt;
  gopt.lr = hp.learning_rate;
  gopt.beta1 = hp.beta1;
  dopt.lr = hp.disc_learning_rate;
  dopt.beta1 = hp.beta1;
  nn::Adam gen_adam(gen_params, gopt), disc_adam(disc_params, dopt);

  const ConversionModels models = pair.models();
  std::vector<LossParts> log;
  for (int step = 0; step < hp.steps; ++step) {
    NoisyBatches b;
    const Tensor x0 = gather_images(hw, data_rng, hp.batch_size, b.c);
    const Tensor x0p = gather_images(mp, data_rng, hp.batch_size, b.c_prime);
    b.x_t = ag::Var(diffusion::q_sample(x0, pair.t_star, noise_rng.normal_tensor(x0.shape()), ddpm.schedule));
    b.x_prime_t = ag::Var(diffusion::q_sample(x0p, pair.t_star, noise_rng.normal_tensor(x0p.shape()), ddpm.schedule));

    const DiscriminatorObjective d = discriminator_objective(models, b, hp, gp_rng);
    disc_adam.step(ag::grad(d.total, disc_params));
    const GeneratorObjective g = generator_objective(models, b, hp);
    gen_adam.step(ag::grad(g.total, gen_params));

    LossParts parts = g.parts;
    parts.disc_d = d.parts.disc_d;
    parts.disc_d_prime = d.parts.disc_d_prime;
    parts.gp_d = d.parts.gp_d;
    parts.gp_d_prime = d.parts.gp_d_prime;
    parts.discriminator_total = d.parts.discriminator_total;
    log.push_back(parts);
    if (on_step) on_step(step, parts);
  }
  if (ddpm.fingerprint() != fingerprint) throw std::logic_error("DDPM parameters changed during conversion training");
  pair.ddpm_fingerprint = fingerprint;
  pair.training = {{"seed", seed}, {"steps", hp.steps}, {"final", log.back().to_json()}};
  return log;
}

ImageBatch convert_with(const Converter& net, int t_star, const ImageBatch& x0, Direction direction,
                        const diffusion::DdpmModel& ddpm, RngStream& rng, Tensor* raw_out) {
  check_source(x0, direction);
  ddpm.schedule.check_timestep(t_star);
  const Tensor x_t = diffusion::q_sample(x0.pixels, t_star, rng.normal_tensor(x0.pixels.shape()), ddpm.schedule);
  Tensor converted;
  {
    ag::NoGradGuard ng;
    converted = net.convert(ag::Var(x_t), x0.classes).value();
  }
  check_same_shape(converted, x_t, "converter output");
  const diffusion::Condition cond{to_tokens(x0.classes), target_domain(direction)};
  Tensor out = diffusion::denoise_from(*ddpm.network, converted, t_star, cond, ddpm.schedule, rng);
  if (raw_out) *raw_out = out;
  ImageBatch result;
  result.pixels = diffusion::clamp_unit(std::move(out));
  result.domain = target_domain(direction);
  result.classes = x0.classes;
  return result;
}

ImageBatch convert(const ImageBatch& x0, Direction direction, const ConversionPair& pair, int t_star,
                   const diffusion::DdpmModel& ddpm, RngStream& rng) {
  if (t_star != pair.t_star) {
    throw std::invalid_argument("conversion pair was trained for t_star=" + std::to_string(pair.t_star) +
                                ", called with " + std::to_string(t_star));
  }
  if (!pair.ddpm_fingerprint.empty() && pair.ddpm_fingerprint != ddpm.fingerprint()) {
    throw std::invalid_argument("conversion pair was trained against a different DDPM");
  }
  return convert_with(pair.converter(direction), t_star, x0, direction, ddpm, rng);
}

ImageBatch sdedit_convert(const ImageBatch& x0, Direction direction, int t_start, const diffusion::DdpmModel& ddpm,
                          RngStream& rng) {
  check_source(x0, direction);
  ddpm.schedule.check_timestep(t_start, 0);
  if (t_start == 0) {
    ImageBatch same = x0;
    same.domain = target_domain(direction);
    return same;
  }
  return convert_with(identity_converter(), t_start, x0, direction, ddpm, rng);
}

void save_pair(const std::filesystem::path& path, const ConversionPair& pair) {
  Checkpoint ck;
  ck.kind = kPairCheckpointKind;
  ck.meta = {{"t_star", pair.t_star},
             {"architecture", pair.config.to_json()},
             {"hyperparams", pair.hyperparams.to_json()},
             {"ddpm_fingerprint", pair.ddpm_fingerprint},
             {"training", pair.training}};
  for (const auto& [prefix, m] : std::vector<std::pair<std::string, const nn::Module*>>{
           {"F/", pair.F.get()}, {"G/", pair.G.get()}, {"D/", pair.D.get()}, {"D_prime/", pair.D_prime.get()}}) {
    for (auto& t : module_tensors(*m, prefix)) ck.tensors.push_back(std::move(t));
  }
  save_checkpoint(path, ck);
}

ConversionPair load_pair(const std::filesystem::path& path, const diffusion::DdpmModel* ddpm) {
  const Checkpoint ck = load_checkpoint(path, kPairCheckpointKind);
  ConversionPair p;
  try {
    p = make_pair(ck.meta.at("t_star").get<int>(), ConverterConfig::from_json(ck.meta.at("architecture")),
                  ConversionHyperparams::from_json(ck.meta.at("hyperparams")), 0);
    p.ddpm_fingerprint = ck.meta.at("ddpm_fingerprint").get<std::string>();
    p.training = ck.meta.value("training", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed conversion checkpoint metadata in " + path.string() + ": " + e.what());
  }
  load_module_tensors(*p.F, ck.tensors, "F/");
  load_module_tensors(*p.G, ck.tensors, "G/");
  load_module_tensors(*p.D, ck.tensors, "D/");
  load_module_tensors(*p.D_prime, ck.tensors, "D_prime/");
  if (ddpm) {
    if (p.ddpm_fingerprint != ddpm->fingerprint()) {
      throw CheckpointError("conversion checkpoint " + path.string() + " was trained against DDPM " +
                            p.ddpm_fingerprint.substr(0, 12) + ", loaded DDPM is " + ddpm->fingerprint().substr(0, 12));
    }
    ddpm->schedule.check_timestep(p.t_star);
  }
  return p;
}

}  // namespace cycledm::conversion
