#include "mdpg/vae.hpp"

#include "mdpg/nn_blocks.hpp"

namespace mdpg {

namespace {

void push_conv_silu(torch::nn::Sequential& s, std::int64_t in, std::int64_t out, std::int64_t stride) {
  s->push_back(nn::conv(in, out, 3, stride));
  s->push_back(torch::nn::SiLU());
}

void push_up_silu(torch::nn::Sequential& s, std::int64_t in, std::int64_t out) {
  s->push_back(torch::nn::Upsample(
      torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
  push_conv_silu(s, in, out, 1);
}

}  // namespace

void require_latent_compatible(const Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 2) throw ShapeError("expected a (B, 2, H, W) complex image batch");
  if (x.size(2) % 16 != 0 || x.size(3) % 16 != 0) throw ShapeError("image dims must be multiples of 16");
}

VaeImpl::VaeImpl(VaeConfig cfg) : cfg_(cfg) {
  const auto w = cfg_.base_width;
  const auto c = cfg_.latent_channels;
  torch::nn::Sequential enc;
  push_conv_silu(enc, 2, w, 1);
  push_conv_silu(enc, w, w, 2);
  push_conv_silu(enc, w, 2 * w, 2);
  push_conv_silu(enc, 2 * w, 2 * w, 2);
  push_conv_silu(enc, 2 * w, 4 * w, 2);
  enc->push_back(nn::conv(4 * w, 2 * c, 1));
  encoder_ = register_module("encoder", enc);

  torch::nn::Sequential dec;
  push_conv_silu(dec, c, 4 * w, 1);
  push_up_silu(dec, 4 * w, 2 * w);
  push_up_silu(dec, 2 * w, 2 * w);
  push_up_silu(dec, 2 * w, w);
  push_up_silu(dec, w, w);
  push_conv_silu(dec, w, w, 1);
  decoder_ = register_module("decoder", dec);
  decoder_out_ = register_module("decoder_out", nn::conv(w, 2, 3));
}

std::pair<Tensor, Tensor> VaeImpl::moments(const Tensor& x) {
  require_latent_compatible(x);
  auto h = encoder_->forward(x).chunk(2, 1);
  return {h[0], h[1].clamp(-30.0, 20.0)};
}

Tensor VaeImpl::encode(const Tensor& x) { return moments(x).first * latent_scale_; }

Tensor VaeImpl::decode(const Tensor& z) {
  if (z.dim() != 4 || z.size(1) != cfg_.latent_channels) {
    throw ShapeError("latent must be (B, " + std::to_string(cfg_.latent_channels) + ", h, w)");
  }
  return decoder_out_(decoder_->forward(z / latent_scale_));
}

VaeImpl::Loss VaeImpl::loss(const Tensor& x, torch::Generator& gen) {
  auto [mu, logvar] = moments(x);
  auto z = mu + torch::randn(mu.sizes(), gen, mu.options()) * torch::exp(0.5 * logvar);
  auto recon = decoder_out_(decoder_->forward(z));
  auto rec = (recon - x).pow(2).mean();
  auto kl = 0.5 * (mu.pow(2) + logvar.exp() - 1 - logvar).sum() / x.numel();
  return {rec + cfg_.kl_weight * kl, rec, kl};
}

void VaeImpl::set_latent_scale(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw InputError("latent scale must be positive and finite");
  latent_scale_ = s;
}

void VaeImpl::zero_output_layer() { torch::NoGradGuard g; decoder_out_->weight.zero_(); }

LatentTensor vae_encode(const ComplexImage& x, Vae& vae) {
  torch::NoGradGuard no_grad;
  auto dtype = vae->parameters().front().scalar_type();
  return LatentTensor{vae->encode(x.data.unsqueeze(0).to(dtype)).squeeze(0)};
}

ComplexImage vae_decode(const LatentTensor& z, Vae& vae) {
  torch::NoGradGuard no_grad;
  if (z.data.dim() != 3) throw ShapeError("latent must be (C, h, w)");
  auto dtype = vae->parameters().front().scalar_type();
  auto img = vae->decode(z.data.unsqueeze(0).to(dtype)).squeeze(0);
  require_finite(img, "decoded image");
  return ComplexImage{img, 1.0};
}

}  // namespace mdpg
