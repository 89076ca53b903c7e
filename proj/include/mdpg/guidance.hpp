#pragma once

// Prior-guidance modules of the stage-II backbone.
//
// Latent guided attention (LGA) modulates an encoder feature map with the latent
// prior and runs multi-head self-attention over the modulated tokens:
//
//   (z1, z2) = Split(SiLU(LN(Z0) W_Z))
//   X'       = LN(X) * z1 + z2
//   out      = X + W_O softmax(Q K^T / sqrt(d_k)) V,   Q, K, V = X' W_{Q,K,V}
//
// The dual-domain fusion branch (DFB) mixes the under-sampled image with the
// synthesized prior image through a gated k-space path and a residual image path:
//
//   a, b   = s_x(F x^u), s_y(F x̄)               (1x1 convs on k-space)
//   t_i    = s_i(GAP(a + b))
//   f      = s_kout(a * act(t_1) + b * act(t_2))
//   g      = ResBlocks(concat(x^u, x̄))
//   fused  = s_iout(F^-1 f + g)

#include "mdpg/mri_signal.hpp"
#include "mdpg/nn_blocks.hpp"

namespace mdpg {

struct LgaConfig {
  std::int64_t channels = 32;
  std::int64_t latent_channels = 4;
  std::int64_t heads = 4;
  double latent_norm_eps = 1e-8;
};

class LgaImpl : public torch::nn::Module {
 public:
  explicit LgaImpl(LgaConfig cfg = {});

  /// Token form: x (B, L, C), z (B, L, Cz) already on x's token grid.
  Tensor forward_tokens(const Tensor& x, const Tensor& z);
  /// Map form: x (B, C, H, W), z0 (B, Cz, h, w), bilinearly resampled to (H, W).
  Tensor forward(const Tensor& x, const Tensor& z0);

  /// Softmax weights (B, heads, L, L) for the same inputs as forward_tokens.
  Tensor attention_weights(const Tensor& x, const Tensor& z);
  /// (z1, z2) for token-form latents.
  std::pair<Tensor, Tensor> modulation(const Tensor& z);

  const LgaConfig& config() const { return cfg_; }

  torch::nn::LayerNorm norm_x{nullptr};
  torch::nn::LayerNorm norm_z{nullptr};
  torch::nn::Linear w_z{nullptr}, w_q{nullptr}, w_k{nullptr}, w_v{nullptr}, w_o{nullptr};

 private:
  Tensor modulated(const Tensor& x, const Tensor& z);
  Tensor split_heads(const Tensor& t) const;
  LgaConfig cfg_;
};
TORCH_MODULE(Lga);

/// Resamples a latent map onto an (H, W) grid and flattens it to (B, H*W, Cz).
Tensor latent_tokens(const Tensor& z0, std::int64_t H, std::int64_t W);

enum class GateActivation { Sigmoid, SiLU };

struct DfbConfig {
  std::int64_t kspace_features = 8;  // complex channels in the k-space path
  std::int64_t res_width = 32;
  std::int64_t res_blocks = 2;
  GateActivation gate = GateActivation::Sigmoid;
};

class DfbImpl : public torch::nn::Module {
 public:
  explicit DfbImpl(DfbConfig cfg = {});

  /// x_u, xbar (B, 2, H, W) -> fused (B, 2, H, W).
  Tensor forward(const Tensor& x_u, const Tensor& xbar);

  /// f(a, b) on already-projected k-space features (B, 2F, H, W).
  Tensor kspace_fusion(const Tensor& a, const Tensor& b);
  /// g(x, y) image path.
  Tensor image_path(const Tensor& x_u, const Tensor& xbar);

  const DfbConfig& config() const { return cfg_; }

  torch::nn::Conv2d sigma_x{nullptr}, sigma_y{nullptr}, sigma_1{nullptr}, sigma_2{nullptr}, sigma_kout{nullptr},
      sigma_iout{nullptr};
  torch::nn::Conv2d g_in{nullptr}, g_out{nullptr};
  std::vector<nn::ResBlock> g_blocks;

 private:
  Tensor gate(const Tensor& t) const;
  DfbConfig cfg_;
};
TORCH_MODULE(Dfb);

}  // namespace mdpg
