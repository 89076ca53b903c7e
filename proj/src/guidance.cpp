#include "mdpg/guidance.hpp"

#include <cmath>

namespace mdpg {

namespace F = torch::nn::functional;

LgaImpl::LgaImpl(LgaConfig cfg) : cfg_(cfg) {
  const auto c = cfg_.channels;
  if (c % cfg_.heads != 0) throw ConfigError("LGA channels must be divisible by the head count");
  norm_x = register_module("norm_x", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c}).eps(1e-6)));
  norm_z = register_module(
      "norm_z", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg_.latent_channels}).eps(cfg_.latent_norm_eps)));
  w_z = register_module("w_z", torch::nn::Linear(cfg_.latent_channels, 2 * c));
  auto nobias = [c] { return torch::nn::Linear(torch::nn::LinearOptions(c, c).bias(false)); };
  w_q = register_module("w_q", nobias());
  w_k = register_module("w_k", nobias());
  w_v = register_module("w_v", nobias());
  w_o = register_module("w_o", torch::nn::Linear(c, c));
  nn::zero_init(*w_o);
}

std::pair<Tensor, Tensor> LgaImpl::modulation(const Tensor& z) {
  if (z.size(-1) != cfg_.latent_channels) throw ShapeError("LGA: latent channel mismatch");
  auto parts = torch::silu(w_z(norm_z(z))).chunk(2, -1);
  return {parts[0], parts[1]};
}

Tensor LgaImpl::modulated(const Tensor& x, const Tensor& z) {
  if (x.dim() != 3 || x.size(-1) != cfg_.channels) throw ShapeError("LGA: feature channel mismatch");
  if (z.dim() != 3 || z.size(0) != x.size(0) || z.size(1) != x.size(1)) {
    throw ShapeError("LGA: latent tokens must match the feature token grid");
  }
  auto [z1, z2] = modulation(z);
  return norm_x(x) * z1 + z2;
}

Tensor LgaImpl::split_heads(const Tensor& t) const {
  const auto B = t.size(0), L = t.size(1);
  return t.view({B, L, cfg_.heads, cfg_.channels / cfg_.heads}).transpose(1, 2);
}

Tensor LgaImpl::attention_weights(const Tensor& x, const Tensor& z) {
  auto xm = modulated(x, z);
  auto q = split_heads(w_q(xm)), k = split_heads(w_k(xm));
  const double dk = static_cast<double>(cfg_.channels / cfg_.heads);
  return torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(dk), -1);
}

Tensor LgaImpl::forward_tokens(const Tensor& x, const Tensor& z) {
  auto xm = modulated(x, z);
  auto q = split_heads(w_q(xm)), k = split_heads(w_k(xm)), v = split_heads(w_v(xm));
  const double dk = static_cast<double>(cfg_.channels / cfg_.heads);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(dk), -1);
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape(x.sizes());
  return x + w_o(out);
}

Tensor latent_tokens(const Tensor& z0, std::int64_t H, std::int64_t W) {
  auto z = z0;
  if (z.size(2) != H || z.size(3) != W) {
    z = F::interpolate(z, F::InterpolateFuncOptions()
                              .size(std::vector<std::int64_t>{H, W})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  }
  return z.flatten(2).transpose(1, 2);
}

Tensor LgaImpl::forward(const Tensor& x, const Tensor& z0) {
  if (x.dim() != 4 || z0.dim() != 4) throw ShapeError("LGA: expected NCHW feature map and latent");
  const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  auto tokens = x.flatten(2).transpose(1, 2);
  auto out = forward_tokens(tokens, latent_tokens(z0, H, W));
  return out.transpose(1, 2).reshape({B, C, H, W});
}

// ---------------------------------------------------------------------------

DfbImpl::DfbImpl(DfbConfig cfg) : cfg_(cfg) {
  const auto f2 = 2 * cfg_.kspace_features;
  const auto w = cfg_.res_width;
  sigma_x = register_module("sigma_x", nn::conv(2, f2, 1));
  sigma_y = register_module("sigma_y", nn::conv(2, f2, 1));
  sigma_1 = register_module("sigma_1", nn::conv(f2, f2, 1));
  sigma_2 = register_module("sigma_2", nn::conv(f2, f2, 1));
  sigma_kout = register_module("sigma_kout", nn::conv(f2, f2, 1));
  g_in = register_module("g_in", nn::conv(4, w, 3));
  for (std::int64_t i = 0; i < cfg_.res_blocks; ++i) {
    g_blocks.push_back(register_module("g_block" + std::to_string(i), nn::ResBlock(w, w)));
  }
  g_out = register_module("g_out", nn::conv(w, f2, 1));
  sigma_iout = register_module("sigma_iout", nn::conv(f2, 2, 1));
  nn::zero_init(*sigma_iout);
}

Tensor DfbImpl::gate(const Tensor& t) const {
  return cfg_.gate == GateActivation::Sigmoid ? torch::sigmoid(t) : torch::silu(t);
}

Tensor DfbImpl::kspace_fusion(const Tensor& a, const Tensor& b) {
  auto pooled = (a + b).mean({2, 3}, true);
  auto t1 = sigma_1(pooled);
  auto t2 = sigma_2(pooled);
  return sigma_kout(a * gate(t1) + b * gate(t2));
}

Tensor DfbImpl::image_path(const Tensor& x_u, const Tensor& xbar) {
  auto h = g_in(torch::cat({x_u, xbar}, 1));
  for (auto& blk : g_blocks) h = blk(h);
  return g_out(h);
}

Tensor DfbImpl::forward(const Tensor& x_u, const Tensor& xbar) {
  if (x_u.sizes() != xbar.sizes() || x_u.dim() != 4 || x_u.size(1) != 2) {
    throw ShapeError("DFB: x_u and xbar must both be (B, 2, H, W)");
  }
  auto f = kspace_fusion(sigma_x(fft2c(x_u)), sigma_y(fft2c(xbar)));
  return sigma_iout(ifft2c(f) + image_path(x_u, xbar));
}

}  // namespace mdpg
