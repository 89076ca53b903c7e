#include "mdpg/denoiser.hpp"

namespace mdpg {

namespace F = torch::nn::functional;

DenoiserImpl::DenoiserImpl(DenoiserConfig cfg) : cfg_(cfg) {
  const auto w = cfg_.width;
  const auto td = cfg_.time_dim;
  time_mlp_ = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(td, td), torch::nn::SiLU(),
                                                                torch::nn::Linear(td, td)));
  in_ = register_module("in", nn::conv(cfg_.latent_channels + cfg_.cond_channels, w, 3));
  enc0_ = register_module("enc0", nn::ResBlock(w, w, td, true));
  down1_ = register_module("down1", nn::conv(w, 2 * w, 3, 2));
  enc1_ = register_module("enc1", nn::ResBlock(2 * w, 2 * w, td, true));
  down2_ = register_module("down2", nn::conv(2 * w, 2 * w, 3, 2));
  mid_ = register_module("mid", nn::ResBlock(2 * w, 2 * w, td, true));
  dec1_ = register_module("dec1", nn::ResBlock(4 * w, 2 * w, td, true));
  dec0_ = register_module("dec0", nn::ResBlock(3 * w, w, td, true));
  out_norm_ = register_module("out_norm", torch::nn::GroupNorm(8, w));
  out_ = register_module("out", nn::conv(w, cfg_.latent_channels, 3));
  nn::zero_init(*out_);
}

Tensor DenoiserImpl::forward(const Tensor& zt, const Tensor& cond, const Tensor& t) {
  if (zt.dim() != 4 || zt.size(1) != cfg_.latent_channels) throw ShapeError("denoiser: bad latent shape");
  if (cond.dim() != 4 || cond.size(1) != cfg_.cond_channels || cond.size(0) != zt.size(0) ||
      cond.size(2) != zt.size(2) || cond.size(3) != zt.size(3)) {
    throw ShapeError("denoiser: condition does not match latent grid");
  }
  if (t.dim() != 1 || t.size(0) != zt.size(0)) throw ShapeError("denoiser: one timestep per batch element");

  auto emb = time_mlp_->forward(nn::timestep_embedding(t, cfg_.time_dim, zt.scalar_type()));
  auto h0 = enc0_(in_(torch::cat({zt, cond}, 1)), emb);
  auto h1 = enc1_(down1_(h0), emb);
  auto h = mid_(down2_(h1), emb);

  auto up = [](const Tensor& x, const Tensor& like) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<std::int64_t>{like.size(2), like.size(3)})
                                 .mode(torch::kNearest));
  };
  h = dec1_(torch::cat({up(h, h1), h1}, 1), emb);
  h = dec0_(torch::cat({up(h, h0), h0}, 1), emb);
  return out_(torch::silu(out_norm_(h)));
}

}  // namespace mdpg
