#include "mdpg/diffusion.hpp"

#include <cmath>
#include <iostream>

namespace mdpg {

namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Schedule

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start < beta_end)) {
    throw ConfigError("linear schedule needs 0 < beta_start < beta_end < 1");
  }
  std::vector<double> betas(steps);
  for (int i = 0; i < steps; ++i) {
    betas[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
  }
  return from_betas(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  NoiseSchedule s;
  s.beta_.assign(1, 0.0);
  s.alpha_.assign(1, 1.0);
  s.alpha_bar_.assign(1, 1.0);
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("betas must lie in (0, 1)");
    s.beta_.push_back(b);
    s.alpha_.push_back(1.0 - b);
    s.alpha_bar_.push_back(s.alpha_bar_.back() * (1.0 - b));
  }
  return s;
}

int NoiseSchedule::checked(int t) const {
  if (t < 0 || t > steps()) {
    throw InputError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
  }
  return t;
}

Tensor NoiseSchedule::alpha_bar(const Tensor& t, torch::Dtype dtype) const {
  auto table = torch::tensor(alpha_bar_, torch::kFloat64);
  if (t.lt(0).any().item<bool>() || t.gt(steps()).any().item<bool>()) throw InputError("timestep out of range");
  return table.index_select(0, t.to(torch::kLong)).to(dtype).view({-1, 1, 1, 1});
}

Tensor q_sample(const Tensor& z0, const Tensor& t, const Tensor& eps, const NoiseSchedule& sched) {
  if (z0.sizes() != eps.sizes()) throw ShapeError("q_sample: eps shape must match z0");
  auto ab = sched.alpha_bar(t, z0.scalar_type());
  return ab.sqrt() * z0 + (1 - ab).sqrt() * eps;
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  if (z0.sizes() != eps.sizes()) throw ShapeError("q_sample: eps shape must match z0");
  const double ab = sched.alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

Tensor ldm_objective(const NoisePredictor& predictor, const Tensor& z0, const Tensor& cond, const Tensor& t,
                     const Tensor& eps, const NoiseSchedule& sched) {
  auto zt = q_sample(z0, t, eps, sched);
  auto err = eps - predictor(zt, cond, t);
  return err.pow(2).flatten(1).sum(1);
}

Tensor posterior_mean(const Tensor& zt, const Tensor& eps, int t, const NoiseSchedule& sched, PosteriorForm form) {
  if (t < 1) throw InputError("posterior mean needs t >= 1");
  const double coef = (1.0 - sched.alpha(t)) / std::sqrt(1.0 - sched.alpha_bar(t));
  const double pre = form == PosteriorForm::Standard ? 1.0 / std::sqrt(sched.alpha(t)) : 1.0 / std::sqrt(sched.alpha_bar(t));
  return pre * (zt - coef * eps);
}

Tensor ddpm_ancestral_step(const Tensor& zt, const Tensor& cond, int t, const NoiseSchedule& sched,
                           const NoisePredictor& predictor, torch::Generator& gen, PosteriorForm form) {
  if (t < 1 || t > sched.steps()) throw InputError("ancestral step: t out of range");
  auto tt = torch::full({zt.size(0)}, t, torch::kLong);
  auto mean = posterior_mean(zt, predictor(zt, cond, tt), t, sched, form);
  if (t == 1) return mean;
  return mean + std::sqrt(1.0 - sched.alpha(t)) * torch::randn(zt.sizes(), gen, zt.options());
}

std::vector<int> ddim_timesteps(int total_steps, int num_steps) {
  if (num_steps < 1 || num_steps > total_steps || total_steps % num_steps != 0) {
    throw ConfigError("DDIM step count must divide the schedule length");
  }
  std::vector<int> ts(num_steps);
  const int stride = total_steps / num_steps;
  for (int i = 0; i < num_steps; ++i) ts[i] = (i + 1) * stride;
  return ts;
}

Tensor ddim_sample(const Tensor& z_T, const Tensor& cond, const DdimConfig& cfg, const NoiseSchedule& sched,
                   const NoisePredictor& predictor, torch::Generator* gen) {
  if (cfg.eta < 0.0) throw ConfigError("DDIM eta must be >= 0");
  if (cfg.eta > 0.0 && gen == nullptr) throw ConfigError("stochastic DDIM (eta > 0) needs a generator");
  const auto ts = ddim_timesteps(sched.steps(), cfg.num_steps);
  auto z = z_T;
  for (int i = cfg.num_steps - 1; i >= 0; --i) {
    const int t = ts[i];
    const int t_prev = i > 0 ? ts[i - 1] : 0;
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    auto eps = predictor(z, cond, torch::full({z.size(0)}, t, torch::kLong));
    auto z0 = (z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    const double sigma = cfg.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    z = std::sqrt(ab_prev) * z0 + std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma)) * eps;
    if (sigma > 0.0) z = z + sigma * torch::randn(z.sizes(), *gen, z.options());
  }
  return z;
}

// ---------------------------------------------------------------------------
// Config

CondMode cond_mode_from_string(const std::string& s) {
  if (s == "latent_concat") return CondMode::LatentConcat;
  if (s == "downsampled_image") return CondMode::DownsampledImage;
  throw ConfigError("unknown conditioning mode '" + s + "'");
}

std::string to_string(CondMode m) { return m == CondMode::LatentConcat ? "latent_concat" : "downsampled_image"; }

nlohmann::json to_json(const LdmConfig& c) {
  return {{"latent_channels", c.vae.latent_channels},
          {"vae_width", c.vae.base_width},
          {"kl_weight", c.vae.kl_weight},
          {"denoiser_width", c.denoiser.width},
          {"time_dim", c.denoiser.time_dim},
          {"timesteps", c.timesteps},
          {"beta_start", c.beta_start},
          {"beta_end", c.beta_end},
          {"cond_mode", to_string(c.cond_mode)},
          {"ddim_steps", c.ddim.num_steps},
          {"ddim_eta", c.ddim.eta},
          {"ddim_seed", c.ddim.seed}};
}

LdmConfig ldm_config_from_json(const nlohmann::json& j) {
  LdmConfig c;
  c.vae.latent_channels = j.at("latent_channels");
  c.vae.base_width = j.at("vae_width");
  c.vae.kl_weight = j.at("kl_weight");
  c.denoiser.width = j.at("denoiser_width");
  c.denoiser.time_dim = j.at("time_dim");
  c.timesteps = j.at("timesteps");
  c.beta_start = j.at("beta_start");
  c.beta_end = j.at("beta_end");
  c.cond_mode = cond_mode_from_string(j.at("cond_mode"));
  c.ddim.num_steps = j.at("ddim_steps");
  c.ddim.eta = j.at("ddim_eta");
  c.ddim.seed = j.at("ddim_seed");
  return c;
}

// ---------------------------------------------------------------------------
// LatentDiffusion

namespace {
DenoiserConfig resolved_denoiser(const LdmConfig& cfg) {
  auto d = cfg.denoiser;
  d.latent_channels = cfg.vae.latent_channels;
  d.cond_channels = cfg.cond_mode == CondMode::LatentConcat ? cfg.vae.latent_channels : 2;
  return d;
}
}  // namespace

LatentDiffusion::LatentDiffusion(LdmConfig cfg)
    : cfg_(cfg),
      sched_(NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)),
      vae_(cfg.vae),
      denoiser_(resolved_denoiser(cfg)) {
  cfg_.denoiser = resolved_denoiser(cfg);
  ddim_timesteps(cfg_.timesteps, cfg_.ddim.num_steps);
}

Tensor LatentDiffusion::condition(const Tensor& x_u) {
  torch::NoGradGuard no_grad;
  require_latent_compatible(x_u);
  if (cfg_.cond_mode == CondMode::LatentConcat) return vae_->encode(x_u);
  return F::interpolate(x_u, F::InterpolateFuncOptions()
                                 .size(std::vector<std::int64_t>{x_u.size(2) / 16, x_u.size(3) / 16})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

Tensor LatentDiffusion::predict_noise(const Tensor& zt, const Tensor& cond, const Tensor& t) {
  return denoiser_->forward(zt, cond, t);
}

NoisePredictor LatentDiffusion::predictor() {
  return [this](const Tensor& zt, const Tensor& cond, const Tensor& t) { return predict_noise(zt, cond, t); };
}

Tensor LatentDiffusion::ldm_loss(const Tensor& x, const Tensor& x_u, torch::Generator& gen) {
  if (!vae_->trained()) throw ConfigError("LDM training refused: the VAE has not been trained");
  Tensor z0;
  {
    torch::NoGradGuard no_grad;
    z0 = vae_->encode(x);
  }
  return ldm_loss_latent(z0, condition(x_u), gen);
}

Tensor LatentDiffusion::ldm_loss_latent(const Tensor& z0, const Tensor& cond, torch::Generator& gen) {
  if (!vae_->trained()) throw ConfigError("LDM training refused: the VAE has not been trained");
  auto t = torch::randint(1, sched_.steps() + 1, {z0.size(0)}, gen, torch::kLong);
  auto eps = torch::randn(z0.sizes(), gen, z0.options());
  return ldm_objective(predictor(), z0, cond, t, eps, sched_);
}

Tensor LatentDiffusion::sample_prior_latent(const Tensor& x_u, const std::vector<std::uint64_t>& seeds) {
  if (static_cast<std::int64_t>(seeds.size()) != x_u.size(0)) throw ShapeError("one seed per sample required");
  if (!denoiser_trained_) std::cerr << "warning: sampling from an untrained denoiser\n";
  torch::NoGradGuard no_grad;
  auto cond = condition(x_u);
  std::vector<Tensor> noise;
  for (auto s : seeds) {
    auto gen = make_generator(s);
    noise.push_back(torch::randn({cfg_.vae.latent_channels, cond.size(2), cond.size(3)}, gen,
                                 torch::TensorOptions().dtype(dtype())));
  }
  auto gen = make_generator(seeds.empty() ? 0 : mix_seed(seeds.front(), 1));
  return ddim_sample(torch::stack(noise), cond, cfg_.ddim, sched_, predictor(), &gen);
}

void LatentDiffusion::to(torch::Dtype dtype) {
  vae_->to(dtype);
  denoiser_->to(dtype);
}

torch::Dtype LatentDiffusion::dtype() const { return denoiser_->parameters().front().scalar_type(); }

std::string LatentDiffusion::weights_hash() const {
  std::map<std::string, Tensor> all;
  store_module_state(*vae_, all, "vae.");
  store_module_state(*denoiser_, all, "denoiser.");
  auto h = hash_tensors(all);
  h = fnv1a64(to_json(cfg_).dump(), h);
  h = fnv1a64(std::to_string(vae_->latent_scale()), h);
  return hex64(h);
}

Checkpoint LatentDiffusion::to_checkpoint() const {
  Checkpoint ck;
  store_module_state(*vae_, ck.tensors, "vae.");
  store_module_state(*denoiser_, ck.tensors, "denoiser.");
  ck.tensors["schedule.beta"] = torch::tensor(sched_.betas(), torch::kFloat64);
  const auto cfg = to_json(cfg_);
  ck.meta = {{"kind", "ldm"},
             {"config", cfg},
             {"config_hash", hex64(fnv1a64(cfg.dump()))},
             {"latent_scale", vae_->latent_scale()},
             {"vae_trained", vae_->trained()},
             {"denoiser_trained", denoiser_trained_},
             {"weights_hash", weights_hash()}};
  return ck;
}

LatentDiffusion LatentDiffusion::from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "ldm") throw CheckpointError("not a latent diffusion checkpoint");
  LdmConfig cfg;
  try {
    cfg = ldm_config_from_json(ck.meta.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad LDM config in checkpoint: ") + e.what());
  }
  LatentDiffusion ldm(cfg);
  auto it = ck.tensors.find("vae.decoder_out.weight");
  if (it != ck.tensors.end()) ldm.to(it->second.scalar_type());
  load_module_state(*ldm.vae_, ck.tensors, "vae.");
  load_module_state(*ldm.denoiser_, ck.tensors, "denoiser.");
  auto betas = ck.tensors.at("schedule.beta");
  auto expected = torch::tensor(ldm.sched_.betas(), torch::kFloat64);
  if (!torch::equal(betas, expected)) throw CheckpointError("schedule constants do not match the stored config");
  ldm.vae_->set_latent_scale(ck.meta.at("latent_scale").get<double>());
  ldm.vae_->mark_trained(ck.meta.at("vae_trained").get<bool>());
  ldm.denoiser_trained_ = ck.meta.at("denoiser_trained").get<bool>();
  return ldm;
}

// ---------------------------------------------------------------------------
// Prior cache

PriorGenerator::PriorGenerator(LatentDiffusion& ldm, fs::path cache_dir)
    : ldm_(ldm), cache_dir_(std::move(cache_dir)), hash_(ldm.weights_hash()) {
  fs::create_directories(cache_dir_);
}

fs::path PriorGenerator::cache_path(const std::string& sample_id) const {
  return cache_dir_ / (sample_id + "." + hash_);
}

std::optional<PriorPair> PriorGenerator::load_cached(const std::string& sample_id) const {
  const auto path = cache_path(sample_id);
  if (!fs::exists(path)) return std::nullopt;
  try {
    auto ck = load_checkpoint(path);
    if (ck.meta.value("sample_id", "") != sample_id || ck.meta.value("weights_hash", "") != hash_) {
      return std::nullopt;
    }
    return PriorPair{ck.tensors.at("z0"), ck.tensors.at("xbar")};
  } catch (const std::exception&) {
    return std::nullopt;  // corrupted entry: regenerate
  }
}

std::vector<PriorPair> PriorGenerator::generate(const Tensor& x_u, const std::vector<std::string>& sample_ids) {
  if (static_cast<std::int64_t>(sample_ids.size()) != x_u.size(0)) throw ShapeError("one id per sample required");
  std::vector<PriorPair> out(sample_ids.size());
  std::vector<std::int64_t> missing;
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    if (auto hit = load_cached(sample_ids[i])) {
      out[i] = *hit;
      ++hits_;
    } else {
      missing.push_back(static_cast<std::int64_t>(i));
    }
  }
  if (missing.empty()) return out;
  misses_ += missing.size();

  torch::NoGradGuard no_grad;
  auto idx = torch::tensor(missing, torch::kLong);
  auto xu = x_u.index_select(0, idx).to(ldm_.dtype());
  std::vector<std::uint64_t> seeds;
  for (auto i : missing) seeds.push_back(mix_seed(ldm_.config().ddim.seed, fnv1a64(sample_ids[i])));
  auto z0 = ldm_.sample_prior_latent(xu, seeds);
  auto xbar = ldm_.vae()->decode(z0);
  for (std::size_t k = 0; k < missing.size(); ++k) {
    const auto i = missing[k];
    PriorPair p{z0[k].clone(), xbar[k].clone()};
    Checkpoint ck;
    ck.meta = {{"kind", "prior"}, {"sample_id", sample_ids[i]}, {"weights_hash", hash_}};
    ck.tensors = {{"z0", p.z0}, {"xbar", p.xbar}};
    save_checkpoint(cache_path(sample_ids[i]), ck);
    out[i] = std::move(p);
  }
  return out;
}

PriorPair PriorGenerator::generate(const ComplexImage& x_u, const std::string& sample_id) {
  return generate(x_u.data.unsqueeze(0), {sample_id}).front();
}

}  // namespace mdpg
