#pragma once

#include "mdpg/common.hpp"
#include "mdpg/nn_blocks.hpp"

namespace mdpg {

struct DenoiserConfig {
  std::int64_t latent_channels = 4;
  std::int64_t cond_channels = 4;
  std::int64_t width = 64;
  std::int64_t time_dim = 128;
};

/// Time-conditional UNet predicting the injected noise from (Z_t, condition, t).
/// Two down/up stages; the condition is concatenated to Z_t along channels.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(DenoiserConfig cfg = {});

  /// zt (B, C, h, w), cond (B, C_cond, h, w), t (B,) int64 in [0, T].
  Tensor forward(const Tensor& zt, const Tensor& cond, const Tensor& t);

  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv2d in_{nullptr}, down1_{nullptr}, down2_{nullptr}, out_{nullptr};
  nn::ResBlock enc0_{nullptr}, enc1_{nullptr}, mid_{nullptr}, dec1_{nullptr}, dec0_{nullptr};
  torch::nn::GroupNorm out_norm_{nullptr};
};
TORCH_MODULE(Denoiser);

}  // namespace mdpg
