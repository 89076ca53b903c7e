#pragma once

#include "mdpg/guidance.hpp"
#include "mdpg/selective_scan.hpp"

#include <json.hpp>

namespace mdpg {

/// The six switches of the component ablation (letters follow the ablation table).
struct AblationConfig {
  bool A_dfb = true;                 // dual-domain fusion branch
  bool B_lga = true;                 // latent guided attention
  bool C_sigmoid_gate = true;        // Sigmoid (instead of SiLU) gates in the DFB
  bool D_learnable_nu = true;        // DC weight is trained
  bool E_dfb_before_encoder = true;  // DFB feeds the encoder (instead of following the decoder)
  bool F_nacs_reg = true;            // NACS k-space loss term

  bool uses_priors() const { return A_dfb || B_lga; }
  std::string label() const;
  nlohmann::json to_json() const;
  static AblationConfig from_json(const nlohmann::json& j);
  bool operator==(const AblationConfig&) const = default;
};

/// The nine rows of the ablation table, top to bottom (row 9 is the full model).
std::vector<AblationConfig> ablation_rows();

struct BackboneConfig {
  std::vector<std::int64_t> widths{32, 64, 128};
  std::int64_t patch = 4;
  std::int64_t state_dim = 8;
  std::int64_t heads = 4;
  std::int64_t latent_channels = 4;
  std::int64_t decoder_width = 16;
  DfbConfig dfb;
  double nu_init = 1.0;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

/// Selective-scan encoder / convolutional decoder UNet with prior guidance and a
/// terminal data-consistency layer.
class BackboneImpl : public torch::nn::Module {
 public:
  BackboneImpl(BackboneConfig cfg, AblationConfig ablation);

  struct Output {
    Tensor xhat;        // after data consistency
    Tensor xhat_prime;  // network output before data consistency
  };

  /// x_u (B, 2, H, W); z0 (B, Cz, H/16, W/16) and xbar (B, 2, H, W) may be undefined when
  /// the matching ablation switch is off; y (B, 2, H, W) measured k-space; mask broadcastable
  /// to y (e.g. (B, 1, 1, W)).
  Output forward(const Tensor& x_u, const Tensor& z0, const Tensor& xbar, const Tensor& y, const Tensor& mask);

  /// Parameters the optimizer should update (excludes nu when it is fixed).
  std::vector<Tensor> trainable_parameters();
  /// Clamps nu to >= 0.
  void project_nu();

  const BackboneConfig& config() const { return cfg_; }
  const AblationConfig& ablation() const { return ablation_; }

  Tensor nu;

  torch::nn::Conv2d stem{nullptr};
  std::vector<Ss2dBlock> stages;
  std::vector<Lga> lgas;
  std::vector<torch::nn::Conv2d> downs;
  std::vector<torch::nn::ConvTranspose2d> ups;
  std::vector<nn::ResBlock> dec_blocks;
  torch::nn::Conv2d head{nullptr};
  Dfb dfb{nullptr};

 private:
  BackboneConfig cfg_;
  AblationConfig ablation_;
};
TORCH_MODULE(Backbone);

/// Single-image convenience wrapper.
ComplexImage backbone_forward(Backbone& net, const ComplexImage& x_u, const Tensor& z0, const ComplexImage* xbar,
                              const KSpaceMeasurement& y);

}  // namespace mdpg
