#pragma once

// Stage-I latent diffusion: noise schedule, forward noising, the training
// objective, ancestral and DDIM reverse processes, and cached prior generation.

#include "mdpg/denoiser.hpp"
#include "mdpg/tensor_io.hpp"
#include "mdpg/vae.hpp"

#include <atomic>
#include <functional>
#include <optional>
#include <vector>

namespace mdpg {

/// Linear-beta schedule, indexed 0..T. Index 0 is the clean boundary (alpha_bar = 1).
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(beta_.size()) - 1; }
  double beta(int t) const { return beta_.at(checked(t)); }
  double alpha(int t) const { return alpha_.at(checked(t)); }
  double alpha_bar(int t) const { return alpha_bar_.at(checked(t)); }
  const std::vector<double>& betas() const { return beta_; }

  /// Gathers alpha_bar for a (B,) timestep tensor, shaped (B, 1, 1, 1).
  Tensor alpha_bar(const Tensor& t, torch::Dtype dtype) const;

 private:
  int checked(int t) const;
  std::vector<double> beta_, alpha_, alpha_bar_;
};

/// Z_t = sqrt(abar_t) Z_0 + sqrt(1 - abar_t) eps.
Tensor q_sample(const Tensor& z0, const Tensor& t, const Tensor& eps, const NoiseSchedule& sched);
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

/// epsilon-prediction: (Z_t, condition, t) -> noise estimate.
using NoisePredictor = std::function<Tensor(const Tensor& zt, const Tensor& cond, const Tensor& t)>;

/// Per-sample squared error ||eps - eps_theta(Z_t, cond, t)||^2, shape (B,).
Tensor ldm_objective(const NoisePredictor& predictor, const Tensor& z0, const Tensor& cond, const Tensor& t,
                     const Tensor& eps, const NoiseSchedule& sched);

/// Prefactor of the posterior mean. `Standard` uses 1/sqrt(alpha_t); `AlphaBar` uses 1/sqrt(alpha_bar_t).
enum class PosteriorForm { Standard, AlphaBar };

/// (Z_t - (1 - alpha_t)/sqrt(1 - abar_t) eps) scaled by the chosen prefactor.
Tensor posterior_mean(const Tensor& zt, const Tensor& eps, int t, const NoiseSchedule& sched,
                      PosteriorForm form = PosteriorForm::Standard);

/// One stochastic reverse step t -> t-1 with injected noise sqrt(1 - alpha_t) (none at t = 1).
Tensor ddpm_ancestral_step(const Tensor& zt, const Tensor& cond, int t, const NoiseSchedule& sched,
                           const NoisePredictor& predictor, torch::Generator& gen,
                           PosteriorForm form = PosteriorForm::Standard);

struct DdimConfig {
  int num_steps = 20;
  double eta = 0.0;
  std::uint64_t seed = 0;
};

/// Evenly spaced timesteps T/S, 2T/S, ..., T (descending order of use is reversed).
std::vector<int> ddim_timesteps(int total_steps, int num_steps);

/// Runs the DDIM reverse process from z_T; exactly cfg.num_steps predictor calls.
Tensor ddim_sample(const Tensor& z_T, const Tensor& cond, const DdimConfig& cfg, const NoiseSchedule& sched,
                   const NoisePredictor& predictor, torch::Generator* gen = nullptr);

enum class CondMode {
  LatentConcat,      // frozen VAE encoding of x^u
  DownsampledImage,  // bilinear 16x downsampling of x^u (2 channels)
};
CondMode cond_mode_from_string(const std::string& s);
std::string to_string(CondMode m);

struct LdmConfig {
  VaeConfig vae;
  DenoiserConfig denoiser;
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  CondMode cond_mode = CondMode::LatentConcat;
  DdimConfig ddim;
};

nlohmann::json to_json(const LdmConfig& cfg);
LdmConfig ldm_config_from_json(const nlohmann::json& j);

/// The frozen-VAE + conditional-denoiser pair.
class LatentDiffusion {
 public:
  explicit LatentDiffusion(LdmConfig cfg);

  const LdmConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  Vae& vae() { return vae_; }
  Denoiser& denoiser() { return denoiser_; }

  Tensor condition(const Tensor& x_u);
  Tensor predict_noise(const Tensor& zt, const Tensor& cond, const Tensor& t);
  NoisePredictor predictor();

  /// Draws t ~ U{1..T} and eps ~ N(0, I) from `gen`; returns per-sample ||eps - eps_theta||^2 (B,).
  /// The VAE is used under no-grad, so gradients reach only the denoiser.
  Tensor ldm_loss(const Tensor& x, const Tensor& x_u, torch::Generator& gen);
  /// Same objective from precomputed target latents and conditions.
  Tensor ldm_loss_latent(const Tensor& z0, const Tensor& cond, torch::Generator& gen);

  /// Deterministic (eta = 0) DDIM from per-sample seeded z_T.
  Tensor sample_prior_latent(const Tensor& x_u, const std::vector<std::uint64_t>& seeds);

  void to(torch::Dtype dtype);
  torch::Dtype dtype() const;

  /// Hash over all weights, schedule and sampler settings; identifies cached priors.
  std::string weights_hash() const;

  Checkpoint to_checkpoint() const;
  static LatentDiffusion from_checkpoint(const Checkpoint& ckpt);
  bool denoiser_trained() const { return denoiser_trained_; }
  void mark_denoiser_trained(bool v = true) { denoiser_trained_ = v; }

 private:
  LdmConfig cfg_;
  NoiseSchedule sched_;
  Vae vae_;
  Denoiser denoiser_;
  bool denoiser_trained_ = false;
};

struct PriorPair {
  Tensor z0;    // (C, h, w)
  Tensor xbar;  // (2, H, W)
};

/// Generates (Z_0, x̄) per sample and caches them as `<cache_dir>/<sample_id>.<weights_hash>`.
/// Cache files are written via temp-file + rename and are safe under concurrent writers.
class PriorGenerator {
 public:
  PriorGenerator(LatentDiffusion& ldm, fs::path cache_dir);

  /// Batched: x_u (B, 2, H, W). Each sample's initial noise is seeded from its id.
  std::vector<PriorPair> generate(const Tensor& x_u, const std::vector<std::string>& sample_ids);
  PriorPair generate(const ComplexImage& x_u, const std::string& sample_id);

  fs::path cache_path(const std::string& sample_id) const;
  std::size_t cache_hits() const { return hits_; }
  std::size_t cache_misses() const { return misses_; }

 private:
  std::optional<PriorPair> load_cached(const std::string& sample_id) const;

  LatentDiffusion& ldm_;
  fs::path cache_dir_;
  std::string hash_;
  std::atomic<std::size_t> hits_{0}, misses_{0};
};

}  // namespace mdpg
