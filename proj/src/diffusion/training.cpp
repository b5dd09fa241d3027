#include "cycledm/diffusion/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "cycledm/checkpoint.hpp"
#include "cycledm/diffusion/process.hpp"

namespace cycledm::diffusion {

void DdpmHyperparams::validate() const {
  if (steps < 1) throw std::invalid_argument("ddpm steps must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("ddpm batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("ddpm learning_rate must be > 0");
  if (warmup_steps < 0) throw std::invalid_argument("ddpm warmup_steps must be >= 0");
  if (!(null_rate >= 0.0 && null_rate <= 1.0)) throw std::invalid_argument("ddpm null_rate must lie in [0, 1]");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("ddpm ema_decay must lie in [0, 1)");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("ddpm grad_clip must be >= 0");
}

nlohmann::json DdpmHyperparams::to_json() const {
  return {{"steps", steps},       {"batch_size", batch_size}, {"learning_rate", learning_rate},
          {"warmup_steps", warmup_steps}, {"null_rate", null_rate}, {"ema_decay", ema_decay},
          {"grad_clip", grad_clip}};
}

SmoothedLoss smooth_endpoints(std::span<const double> losses, size_t window) {
  if (losses.empty()) throw std::invalid_argument("smooth_endpoints: empty trajectory");
  window = std::clamp<size_t>(window, 1, losses.size());
  SmoothedLoss s;
  s.initial = std::accumulate(losses.begin(), losses.begin() + static_cast<std::ptrdiff_t>(window), 0.0) / window;
  s.final = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(window), losses.end(), 0.0) / window;
  return s;
}

std::string DdpmModel::fingerprint() const { return tensors_fingerprint(module_tensors(*network)); }

DdpmModel make_ddpm(const UNetConfig& config, bool per_domain, const NoiseSchedule& schedule, uint64_t seed) {
  config.validate();
  RngStream init = RngStream::derive(seed, "ddpm/init");
  DdpmModel m;
  m.schedule = schedule;
  m.network = std::make_shared<DenoiserNetwork>(config, per_domain, init);
  return m;
}

std::vector<double> train_ddpm(DdpmModel& model, std::span<const datasets::DomainDataset* const> data,
                               const DdpmHyperparams& hp, uint64_t seed, const StepCallback& on_step) {
  hp.validate();
  struct Ref {
    const datasets::DomainDataset* ds;
    int64_t index;
  };
  std::vector<Ref> pool;
  for (const auto* ds : data) {
    if (ds->resolution != model.network->config().image_size) {
      throw std::invalid_argument("train_ddpm: dataset resolution " + std::to_string(ds->resolution) +
                                  " does not match the network");
    }
    for (int64_t i = 0; i < ds->size(); ++i) pool.push_back({ds, i});
  }
  if (pool.empty()) throw std::invalid_argument("train_ddpm: empty dataset");

  RngStream data_rng = RngStream::derive(seed, "ddpm/data");
  RngStream null_rng = RngStream::derive(seed, "ddpm/null");
  RngStream noise_rng = RngStream::derive(seed, "ddpm/noise");

  nn::Module& net = *model.network;
  const std::vector<ag::Var> params = net.parameters();
  nn::Adam::Options opt;
  opt.lr = hp.learning_rate;
  opt.grad_clip = hp.grad_clip;
  nn::Adam adam(params, opt);
  nn::Ema ema(net, hp.ema_decay);

  const int64_t r = model.network->config().image_size;
  std::vector<double> losses;
  losses.reserve(static_cast<size_t>(hp.steps));
  for (int step = 0; step < hp.steps; ++step) {
    Tensor x0({hp.batch_size, r, r, 1});
    std::vector<ClassToken> classes;
    std::vector<Domain> domains;
    for (int b = 0; b < hp.batch_size; ++b) {
      const Ref& ref = pool[static_cast<size_t>(data_rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
      const auto& item = ref.ds->items[static_cast<size_t>(ref.index)];
      for (int64_t j = 0; j < r * r; ++j) x0[b * r * r + j] = datasets::normalize_pixel(item.pixels[static_cast<size_t>(j)]);
      classes.push_back(null_rng.uniform() < hp.null_rate ? kNullToken : ClassToken(item.label));
      domains.push_back(ref.ds->domain);
    }
    if (hp.warmup_steps > 0) adam.set_lr(hp.learning_rate * std::min(1.0, (step + 1.0) / hp.warmup_steps));
    const ag::Var loss = ddpm_loss(*model.network, x0, classes, domains, model.schedule, noise_rng);
    adam.step(ag::grad(loss, params));
    ema.update(net);
    losses.push_back(loss.item());
    if (on_step) on_step(step, losses.back());
  }
  net.load_state(ema.state());

  model.training = {{"hyperparams", hp.to_json()},
                    {"seed", seed},
                    {"items", pool.size()},
                    {"final_loss", losses.back()}};
  return losses;
}

void save_ddpm(const std::filesystem::path& path, const DdpmModel& model) {
  Checkpoint ck;
  ck.kind = kDdpmCheckpointKind;
  ck.meta = {{"schedule",
              {{"T", model.schedule.steps()},
               {"beta_1", model.schedule.beta_first()},
               {"beta_T", model.schedule.beta_last()}}},
             {"architecture", model.network->config().to_json()},
             {"per_domain", model.network->per_domain()},
             {"training", model.training},
             {"fingerprint", model.fingerprint()}};
  ck.tensors = module_tensors(*model.network);
  save_checkpoint(path, ck);
}

DdpmModel load_ddpm(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path, kDdpmCheckpointKind);
  try {
    const auto& s = ck.meta.at("schedule");
    DdpmModel m = make_ddpm(UNetConfig::from_json(ck.meta.at("architecture")), ck.meta.at("per_domain").get<bool>(),
                            make_schedule(s.at("T").get<int>(), s.at("beta_1").get<double>(), s.at("beta_T").get<double>()),
                            0);
    load_module_tensors(*m.network, ck.tensors);
    m.training = ck.meta.value("training", nlohmann::json::object());
    if (m.fingerprint() != ck.meta.at("fingerprint").get<std::string>()) {
      throw CheckpointError("DDPM checkpoint fingerprint does not match its parameters");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed DDPM checkpoint metadata in " + path.string() + ": " + e.what());
  }
}

}  // namespace cycledm::diffusion
