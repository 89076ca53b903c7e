#pragma once

// Two-stage training: VAE, conditional latent diffusion, then the prior-guided
// backbone. Also the reconstruction loss and the evaluation metrics.

#include "mdpg/backbone.hpp"
#include "mdpg/data_io.hpp"
#include "mdpg/diffusion.hpp"

#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace mdpg {

// ---------------------------------------------------------------------------
// Loss

struct LossConfig {
  double lambda1 = 0.1;
  GammaMode gamma_mode = GammaMode::Complement;
  bool magnitude_image_term = false;  // image term on |x| instead of the complex image

  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

struct LossTerms {
  Tensor total;   // image + lambda1 * kspace, averaged over the batch
  Tensor image;   // ||xhat - x|| / ||x||
  Tensor kspace;  // ||G(F xhat - F x)|| / ||G F x||; an exact zero (not computed) when lambda1 == 0
};

/// Batched loss. xhat, x: (B, 2, H, W); gamma: NACS indicator broadcastable to the k-space grid.
/// Throws DegenerateTargetError when a target (or its NACS k-space, for lambda1 > 0) is zero.
LossTerms combined_loss_terms(const Tensor& xhat, const Tensor& x, const Tensor& gamma, const LossConfig& cfg);
Tensor combined_loss(const Tensor& xhat, const Tensor& x, const Tensor& gamma, const LossConfig& cfg);
double combined_loss(const ComplexImage& xhat, const ComplexImage& x, const CartesianMask& mask,
                     const LossConfig& cfg);

/// Loss settings the trainer actually uses: lambda1 is forced to 0 when the NACS term is ablated.
LossConfig effective_loss_config(const LossConfig& cfg, const AblationConfig& ablation);

// ---------------------------------------------------------------------------
// Metrics (magnitude images)

inline constexpr double kPsnrCap = 100.0;

/// Data range is max(gt). Identical inputs report `cap`.
double psnr(const Tensor& recon, const Tensor& gt, double cap = kPsnrCap);
/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03) over the valid region.
/// Accepts (H, W) or a stack (S, H, W); a stack returns the mean over slices.
double ssim(const Tensor& recon, const Tensor& gt, double data_range);
/// ||recon - gt||^2 / ||gt||^2.
double nmse(const Tensor& recon, const Tensor& gt);

struct VolumeMetrics {
  std::string volume_id;
  std::int64_t slices = 0;
  double psnr = 0, ssim = 0, nmse = 0;
};

struct MetricsReport {
  std::vector<VolumeMetrics> per_volume;
  double psnr = 0, ssim = 0, nmse = 0;  // averages over volumes

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// recon_mag, gt_mag: (N, H, W) magnitudes; slices are grouped into volumes by id (first-seen order).
MetricsReport evaluate_magnitudes(const Tensor& recon_mag, const Tensor& gt_mag,
                                  const std::vector<std::string>& volume_ids);
/// Pairs are matched by position and must carry the same ids.
MetricsReport evaluate(const std::vector<Sample>& recon, const std::vector<Sample>& gt);

// ---------------------------------------------------------------------------
// Configuration

enum class Stage { Vae, Ldm, Backbone };
Stage stage_from_string(const std::string& s);
std::string to_string(Stage s);

enum class LrSchedule { Constant, Cosine };
LrSchedule lr_schedule_from_string(const std::string& s);
std::string to_string(LrSchedule s);

struct TrainConfig {
  Stage stage = Stage::Backbone;
  double learning_rate = 4e-3;
  std::int64_t batch_size = 8;
  std::int64_t epochs = 100;
  std::int64_t steps = 0;  // > 0: fixed optimizer-step budget instead of epochs
  double weight_decay = 1e-4;
  LrSchedule lr_schedule = LrSchedule::Constant;
  std::uint64_t seed = 0;
  std::string device = "cpu";
  std::int64_t image_size = 64;
  std::int64_t log_every = 50;
  std::int64_t warmup_steps = 0;  // linear ramp before the schedule starts
  double grad_clip = 0.0;         // max global gradient norm; 0 disables clipping

  void validate() const;
  std::int64_t total_steps(std::int64_t dataset_size) const;
  double lr_at(std::int64_t step, std::int64_t total) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Undersampling used to derive (y, x^u) from targets. Every sample gets its own fixed mask
/// drawn from `seed` and the sample id.
struct MaskSpec {
  double acceleration = 4.0;
  double center_fraction = 0.08;
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;

  CartesianMask for_sample(const std::string& id, std::int64_t width) const;
  std::string tag() const;  // short identifier used to key cached priors
  nlohmann::json to_json() const;
  static MaskSpec from_json(const nlohmann::json& j);
};

/// Targets with their measurements, stacked.
struct PreparedSet {
  std::vector<std::string> ids;
  std::vector<std::string> volume_ids;
  Tensor x;      // (N, 2, H, W)
  Tensor y;      // (N, 2, H, W)
  Tensor x_u;    // (N, 2, H, W)
  Tensor mask;   // (N, 1, 1, W)
  Tensor gamma;  // (N, 1, 1, W)
  std::string mask_tag;

  std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
};

PreparedSet prepare_set(const std::vector<Sample>& samples, const MaskSpec& spec,
                        GammaMode gamma_mode = GammaMode::Complement);

/// Rows of a training curve, written as CSV.
struct TrainLog {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void write_csv(const fs::path& path) const;
};

/// AdamW moments and step counts, stored alongside model weights for exact resumption.
void store_optimizer_state(torch::optim::AdamW& opt, const std::vector<Tensor>& params,
                           std::map<std::string, Tensor>& out, const std::string& prefix);
void load_optimizer_state(torch::optim::AdamW& opt, const std::vector<Tensor>& params,
                          const std::map<std::string, Tensor>& in, const std::string& prefix);

// ---------------------------------------------------------------------------
// Stage I

struct VaeTrainResult {
  TrainLog curve;
  double val_rel_error = 0;  // mean ||D(E(x)) - x|| / ||x||
  double val_psnr = 0;       // mean magnitude PSNR of reconstructions
};

/// Trains on full-sampled targets (random global phase rotations when `phase_augment`),
/// then fits the latent scale and marks the VAE trained.
VaeTrainResult train_vae(Vae& vae, const Tensor& train_x, const Tensor& val_x, const TrainConfig& cfg,
                         bool phase_augment = true,
                         const std::function<void(const std::string&)>& log = nullptr);

/// Reconstruction quality of a VAE on a set of images.
std::pair<double, double> vae_reconstruction_quality(Vae& vae, const Tensor& x);

/// Sets latent_scale = 1 / std of the posterior means over `x`.
double fit_latent_scale(Vae& vae, const Tensor& x);

/// Denoiser training with a frozen VAE. State (weights, optimizer, step) round-trips
/// through `checkpoint()` / `restore()` so a resumed run continues bit-identically.
class LdmTrainer {
 public:
  LdmTrainer(LatentDiffusion& ldm, const PreparedSet& train, TrainConfig cfg);

  /// One optimizer step; returns the batch loss (mean squared error per latent element).
  double step();
  /// Loss the next step would see, without updating anything.
  double peek_loss();
  std::int64_t steps_done() const { return step_; }
  std::int64_t total_steps() const { return total_; }

  /// Runs until the step budget is spent; NaN losses raise DivergenceError.
  /// `on_checkpoint` fires every `checkpoint_every` steps (0: never).
  TrainLog run(const std::function<void(const std::string&)>& log = nullptr, std::int64_t checkpoint_every = 0,
               const std::function<void()>& on_checkpoint = nullptr);

  Checkpoint checkpoint();
  void restore(const Checkpoint& ckpt);

 private:
  std::vector<std::int64_t> batch_indices(std::int64_t step) const;
  Tensor batch_loss(std::int64_t step);

  LatentDiffusion& ldm_;
  TrainConfig cfg_;
  Tensor z0_, cond_;
  std::vector<Tensor> params_;
  std::unique_ptr<torch::optim::AdamW> opt_;
  std::int64_t step_ = 0;
  std::int64_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Stage II

struct PriorSet {
  Tensor z0;    // (N, C, H/16, W/16), undefined when priors are not used
  Tensor xbar;  // (N, 2, H, W)
};

/// Runs (or loads from `cache_dir`) the frozen LDM for every sample of the set.
PriorSet compute_priors(LatentDiffusion& ldm, const PreparedSet& set, const fs::path& cache_dir,
                        std::int64_t batch_size = 16, std::size_t* cache_hits = nullptr);

struct Stage2Config {
  TrainConfig train;
  BackboneConfig backbone;
  LossConfig loss;
  AblationConfig ablation;

  nlohmann::json to_json() const;
};

class BackboneTrainer {
 public:
  BackboneTrainer(Stage2Config cfg, const PreparedSet& train, PriorSet train_priors);

  /// Loss terms of one batch (no update).
  LossTerms batch_terms(const std::vector<std::int64_t>& idx);
  /// One optimizer step on the batch; projects nu afterwards.
  double step(const std::vector<std::int64_t>& idx);
  /// One pass over the shuffled training set; returns the mean batch loss.
  double train_epoch();
  std::int64_t epoch() const { return epoch_; }

  /// Reconstructions (N, 2, H, W) of a prepared set, batched, no grad.
  Tensor reconstruct(const PreparedSet& set, const PriorSet& priors, std::int64_t batch_size = 16);
  MetricsReport validate(const PreparedSet& set, const PriorSet& priors);

  /// Full schedule with per-epoch validation; the CSV columns are
  /// epoch, train_loss, val_psnr, val_ssim, val_nmse, nu.
  TrainLog run(const PreparedSet& val, const PriorSet& val_priors,
               const std::function<void(const std::string&)>& log = nullptr);

  Backbone& net() { return net_; }
  const Stage2Config& config() const { return cfg_; }
  const LossConfig& loss_config() const { return loss_; }
  std::vector<Tensor> optimizer_parameters() const;

  Checkpoint checkpoint();
  void restore(const Checkpoint& ckpt);
  static Backbone backbone_from_checkpoint(const Checkpoint& ckpt);

 private:
  Stage2Config cfg_;
  LossConfig loss_;
  const PreparedSet& train_;
  PriorSet priors_;
  Backbone net_{nullptr};
  std::unique_ptr<torch::optim::AdamW> opt_;
  std::int64_t epoch_ = 0;
  std::int64_t step_ = 0;
};

/// Batched no-grad reconstruction of a prepared set, (N, 2, H, W).
Tensor reconstruct_set(Backbone& net, const PreparedSet& set, const PriorSet& priors, std::int64_t batch_size = 16);

/// Largest absolute difference between the gradients of the full training loss and of its
/// image term alone, over the optimizer's parameters, on one batch.
double kspace_gradient_contribution(BackboneTrainer& trainer, const std::vector<std::int64_t>& idx);

/// Zero-filled baseline metrics for a prepared set.
MetricsReport zero_fill_metrics(const PreparedSet& set);

// ---------------------------------------------------------------------------
// Provenance

/// Writes `<dir>/manifest.json`: config and its hash, seed, git revision (when available)
/// and content hashes of the given files.
void write_run_manifest(const fs::path& dir, const nlohmann::json& config, std::uint64_t seed,
                        const std::map<std::string, fs::path>& files);
std::string file_hash(const fs::path& path);

}  // namespace mdpg
