#pragma once

#include "mdpg/mri_signal.hpp"

namespace mdpg {

struct VaeConfig {
  std::int64_t latent_channels = 4;
  std::int64_t base_width = 32;
  double kl_weight = 1e-6;
};

/// Convolutional VAE with four stride-2 stages (16x spatial compression).
///
/// Latents exchanged with the rest of the system are the posterior mean multiplied
/// by `latent_scale`, a constant fitted after training so that diffusion sees roughly
/// unit-variance latents. `decode` undoes the scale.
class VaeImpl : public torch::nn::Module {
 public:
  explicit VaeImpl(VaeConfig cfg = {});

  /// Posterior moments (unscaled), each (B, C, H/16, W/16).
  std::pair<Tensor, Tensor> moments(const Tensor& x);
  /// Scaled posterior mean.
  Tensor encode(const Tensor& x);
  Tensor decode(const Tensor& z);

  /// Reconstruction + KL objective for one batch; samples with `gen`.
  struct Loss {
    Tensor total, recon, kl;
  };
  Loss loss(const Tensor& x, torch::Generator& gen);

  const VaeConfig& config() const { return cfg_; }
  bool trained() const { return trained_; }
  void mark_trained(bool v = true) { trained_ = v; }
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s);

  /// Zeroes the last decoder conv (decoded output becomes its bias, i.e. constant).
  void zero_output_layer();

 private:
  VaeConfig cfg_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Sequential decoder_{nullptr};
  torch::nn::Conv2d decoder_out_{nullptr};
  double latent_scale_ = 1.0;
  bool trained_ = false;
};
TORCH_MODULE(Vae);

struct LatentTensor {
  Tensor data;  // (C, H/16, W/16)
  static constexpr std::int64_t downsample_factor = 16;
  std::int64_t channels() const { return data.size(0); }
};

LatentTensor vae_encode(const ComplexImage& x, Vae& vae);
ComplexImage vae_decode(const LatentTensor& z, Vae& vae);

/// Shape check shared by every image-space entry point that feeds the VAE.
void require_latent_compatible(const Tensor& x);

}  // namespace mdpg
