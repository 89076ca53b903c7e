#include "mdpg/backbone.hpp"

namespace mdpg {

std::string AblationConfig::label() const {
  std::string s;
  auto put = [&s](char c, bool on) {
    s += c;
    s += on ? '1' : '0';
  };
  put('A', A_dfb);
  put('B', B_lga);
  put('C', C_sigmoid_gate);
  put('D', D_learnable_nu);
  put('E', E_dfb_before_encoder);
  put('F', F_nacs_reg);
  return s;
}

nlohmann::json AblationConfig::to_json() const {
  return {{"A_dfb", A_dfb},
          {"B_lga", B_lga},
          {"C_sigmoid_gate", C_sigmoid_gate},
          {"D_learnable_nu", D_learnable_nu},
          {"E_dfb_before_encoder", E_dfb_before_encoder},
          {"F_nacs_reg", F_nacs_reg}};
}

AblationConfig AblationConfig::from_json(const nlohmann::json& j) {
  AblationConfig a;
  a.A_dfb = j.at("A_dfb");
  a.B_lga = j.at("B_lga");
  a.C_sigmoid_gate = j.at("C_sigmoid_gate");
  a.D_learnable_nu = j.at("D_learnable_nu");
  a.E_dfb_before_encoder = j.at("E_dfb_before_encoder");
  a.F_nacs_reg = j.at("F_nacs_reg");
  return a;
}

std::vector<AblationConfig> ablation_rows() {
  // Columns A..F; "N/A" entries of the backbone-only row are off.
  return {
      {false, false, false, true, false, false},  // backbone without prior guidance
      {true, true, false, true, false, false},
      {true, true, true, true, false, false},
      {true, true, true, false, true, false},
      {true, true, false, true, true, false},
      {true, false, true, true, true, false},
      {false, true, true, true, true, false},
      {true, true, true, true, true, false},
      {true, true, true, true, true, true},
  };
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"widths", widths},
          {"patch", patch},
          {"state_dim", state_dim},
          {"heads", heads},
          {"latent_channels", latent_channels},
          {"decoder_width", decoder_width},
          {"dfb_kspace_features", dfb.kspace_features},
          {"dfb_res_width", dfb.res_width},
          {"dfb_res_blocks", dfb.res_blocks},
          {"nu_init", nu_init}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.widths = j.at("widths").get<std::vector<std::int64_t>>();
  c.patch = j.at("patch");
  c.state_dim = j.at("state_dim");
  c.heads = j.at("heads");
  c.latent_channels = j.at("latent_channels");
  c.decoder_width = j.at("decoder_width");
  c.dfb.kspace_features = j.at("dfb_kspace_features");
  c.dfb.res_width = j.at("dfb_res_width");
  c.dfb.res_blocks = j.at("dfb_res_blocks");
  c.nu_init = j.at("nu_init");
  return c;
}

BackboneImpl::BackboneImpl(BackboneConfig cfg, AblationConfig ablation) : cfg_(std::move(cfg)), ablation_(ablation) {
  const auto& w = cfg_.widths;
  const auto n = static_cast<std::int64_t>(w.size());
  if (n < 1) throw ConfigError("backbone needs at least one encoder stage");
  if (cfg_.nu_init < 0.0) throw ConfigError("nu must be initialized >= 0");

  stem = register_module("stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(2, w[0], cfg_.patch).stride(cfg_.patch)));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto tag = std::to_string(i);
    stages.push_back(register_module("stage" + tag, Ss2dBlock(Ss2dConfig{w[i], cfg_.state_dim})));
    if (ablation_.B_lga) {
      lgas.push_back(register_module("lga" + tag, Lga(LgaConfig{w[i], cfg_.latent_channels, cfg_.heads})));
    }
    if (i + 1 < n) {
      downs.push_back(register_module(
          "down" + tag, torch::nn::Conv2d(torch::nn::Conv2dOptions(w[i], w[i + 1], 2).stride(2))));
    }
  }
  for (std::int64_t i = n - 1; i >= 1; --i) {
    const auto tag = std::to_string(i);
    ups.push_back(register_module(
        "up" + tag, torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(w[i], w[i - 1], 2).stride(2))));
    dec_blocks.push_back(register_module("dec" + tag, nn::ResBlock(2 * w[i - 1], w[i - 1])));
  }
  ups.push_back(register_module(
      "up0", torch::nn::ConvTranspose2d(
                 torch::nn::ConvTranspose2dOptions(w[0], cfg_.decoder_width, cfg_.patch).stride(cfg_.patch))));
  dec_blocks.push_back(register_module("dec0", nn::ResBlock(cfg_.decoder_width + 2, cfg_.decoder_width)));
  head = register_module("head", nn::conv(cfg_.decoder_width, 2, 3));
  nn::zero_init(*head);

  if (ablation_.A_dfb) {
    auto dcfg = cfg_.dfb;
    dcfg.gate = ablation_.C_sigmoid_gate ? GateActivation::Sigmoid : GateActivation::SiLU;
    dfb = register_module("dfb", Dfb(dcfg));
  }
  nu = register_parameter("nu", torch::full({}, cfg_.nu_init), ablation_.D_learnable_nu);
}

BackboneImpl::Output BackboneImpl::forward(const Tensor& x_u, const Tensor& z0, const Tensor& xbar, const Tensor& y,
                                           const Tensor& mask) {
  if (x_u.dim() != 4 || x_u.size(1) != 2) throw ShapeError("backbone: x_u must be (B, 2, H, W)");
  const auto stride = cfg_.patch << (cfg_.widths.size() - 1);
  if (x_u.size(2) % stride != 0 || x_u.size(3) % stride != 0) {
    throw ShapeError("backbone: image dims must be multiples of " + std::to_string(stride));
  }
  if (ablation_.A_dfb && !xbar.defined()) throw ConfigError("backbone: DFB enabled but no synthesized image given");
  if (ablation_.B_lga && !z0.defined()) throw ConfigError("backbone: LGA enabled but no latent prior given");

  auto enc_in = x_u;
  if (ablation_.A_dfb && ablation_.E_dfb_before_encoder) enc_in = x_u + dfb(x_u, xbar);

  auto h = stem(enc_in);
  std::vector<Tensor> skips;
  const auto n = cfg_.widths.size();
  for (std::size_t i = 0; i < n; ++i) {
    h = stages[i](h);
    if (ablation_.B_lga) h = lgas[i](h, z0);
    skips.push_back(h);
    if (i + 1 < n) h = downs[i](h);
  }
  for (std::size_t k = 0; k + 1 < n; ++k) {
    h = ups[k](h);
    h = dec_blocks[k](torch::cat({h, skips[n - 2 - k]}, 1));
  }
  h = ups.back()(h);
  h = dec_blocks.back()(torch::cat({h, enc_in}, 1));

  auto xhat_prime = x_u + head(h);
  if (ablation_.A_dfb && !ablation_.E_dfb_before_encoder) xhat_prime = xhat_prime + dfb(xhat_prime, xbar);
  return {data_consistency(xhat_prime, y, mask, nu), xhat_prime};
}

std::vector<Tensor> BackboneImpl::trainable_parameters() {
  std::vector<Tensor> out;
  for (auto& p : parameters()) {
    if (p.is_same(nu) && !ablation_.D_learnable_nu) continue;
    out.push_back(p);
  }
  return out;
}

void BackboneImpl::project_nu() {
  torch::NoGradGuard no_grad;
  nu.clamp_min_(0.0);
}

ComplexImage backbone_forward(Backbone& net, const ComplexImage& x_u, const Tensor& z0, const ComplexImage* xbar,
                              const KSpaceMeasurement& y) {
  torch::NoGradGuard no_grad;
  auto dtype = net->nu.scalar_type();
  auto zb = z0.defined() ? z0.unsqueeze(0).to(dtype) : Tensor();
  auto xb = xbar ? xbar->data.unsqueeze(0).to(dtype) : Tensor();
  auto mask = y.mask.tensor(dtype).view({1, 1, 1, -1});
  auto out = net->forward(x_u.data.unsqueeze(0).to(dtype), zb, xb, y.data.unsqueeze(0).to(dtype), mask);
  return ComplexImage{out.xhat.squeeze(0), x_u.normalization_scale};
}

}  // namespace mdpg
