#include "mdpg/nn_blocks.hpp"

#include <cmath>

namespace mdpg::nn {

torch::nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride,
                       std::int64_t groups) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2).groups(groups));
}

void zero_init(torch::nn::Module& layer) {
  torch::NoGradGuard no_grad;
  for (auto& p : layer.parameters()) p.zero_();
}

Tensor channel_layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias, double eps) {
  auto t = x.permute({0, 2, 3, 1});
  t = F::layer_norm(t, F::LayerNormFuncOptions({x.size(1)}).weight(weight).bias(bias).eps(eps));
  return t.permute({0, 3, 1, 2});
}

ResBlockImpl::ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t embed_dim, bool group_norm)
    : group_norm_(group_norm) {
  if (group_norm_) {
    norm1_ = register_module("norm1", torch::nn::GroupNorm(std::min<std::int64_t>(8, in), in));
    norm2_ = register_module("norm2", torch::nn::GroupNorm(std::min<std::int64_t>(8, out), out));
  }
  conv1_ = register_module("conv1", conv(in, out, 3));
  conv2_ = register_module("conv2", conv(out, out, 3));
  if (in != out) skip_ = register_module("skip", conv(in, out, 1));
  if (embed_dim > 0) embed_ = register_module("embed", torch::nn::Linear(embed_dim, out));
}

Tensor ResBlockImpl::forward(const Tensor& x, const Tensor& embedding) {
  auto h = group_norm_ ? norm1_(x) : x;
  h = conv1_(torch::silu(h));
  if (embed_ && embedding.defined()) {
    h = h + embed_(torch::silu(embedding)).unsqueeze(-1).unsqueeze(-1);
  }
  if (group_norm_) h = norm2_(h);
  h = conv2_(torch::silu(h));
  return (skip_ ? skip_(x) : x) + h;
}

Tensor timestep_embedding(const Tensor& t, std::int64_t dim, torch::Dtype dtype) {
  const auto half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) *
                          torch::arange(half, torch::TensorOptions().dtype(torch::kFloat64)) / half);
  auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::cos(args), torch::sin(args)}, 1).to(dtype);
}

}  // namespace mdpg::nn
