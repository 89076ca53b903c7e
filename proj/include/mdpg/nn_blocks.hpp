#pragma once

// Small building blocks shared by the stage-I and stage-II networks.

#include "mdpg/common.hpp"

namespace mdpg::nn {

namespace F = torch::nn::functional;

torch::nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride = 1,
                       std::int64_t groups = 1);

/// Zeroes a layer's weight and bias so a residual branch starts as the identity.
void zero_init(torch::nn::Module& layer);

/// Layer norm over the channel axis of an NCHW map (per pixel).
Tensor channel_layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias, double eps = 1e-6);

/// conv3x3 -> SiLU -> conv3x3 plus identity (or 1x1 projection) skip, optional additive embedding.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t embed_dim = 0, bool group_norm = false);
  Tensor forward(const Tensor& x, const Tensor& embedding = {});

 private:
  bool group_norm_;
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear embed_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Sinusoidal timestep embedding, (B,) -> (B, dim).
Tensor timestep_embedding(const Tensor& t, std::int64_t dim, torch::Dtype dtype);

}  // namespace mdpg::nn
