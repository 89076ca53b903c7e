#pragma once

// Selective state-space scan (S6) and the four-direction 2D block built on it.

#include "mdpg/common.hpp"

namespace mdpg {

/// Discretized input-dependent recurrence over a batch of sequences:
///
///   h_i = exp(delta_i * A) .* h_{i-1} + delta_i * u_i * B_i
///   y_i = sum_n C_i[n] h_i[:, n] + D .* u_i
///
/// Shapes: u, delta (Bt, L, D); A (D, N); B, C (Bt, L, N); D (D,). Returns (Bt, L, D).
/// Forward and backward are explicit loops; the state history is kept for the backward pass.
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A, const Tensor& B, const Tensor& C,
                      const Tensor& D);

struct ScanConfig {
  std::int64_t channels = 32;
  std::int64_t state_dim = 8;
  double dt_min = 1e-3;
  double dt_max = 1e-1;
};

/// One scan direction with its own input-dependent projections.
class SelectiveScan1dImpl : public torch::nn::Module {
 public:
  explicit SelectiveScan1dImpl(ScanConfig cfg = {});

  /// u (Bt, L, D) -> (Bt, L, D).
  Tensor forward(const Tensor& u);

  /// A = -exp(A_log), (D, N).
  Tensor A() const { return -torch::exp(A_log); }

  torch::nn::Linear delta_proj{nullptr};
  torch::nn::Linear B_proj{nullptr};
  torch::nn::Linear C_proj{nullptr};
  Tensor A_log;
  Tensor D_skip;

 private:
  ScanConfig cfg_;
};
TORCH_MODULE(SelectiveScan1d);

/// Row-major, reversed row-major, column-major, reversed column-major.
enum class ScanOrder { RowForward = 0, RowBackward = 1, ColForward = 2, ColBackward = 3 };

/// (B, C, H, W) -> (B, L, C) sequence in the given order, and its inverse.
Tensor scan_sequence(const Tensor& x, ScanOrder order);
Tensor unscan_sequence(const Tensor& seq, ScanOrder order, std::int64_t H, std::int64_t W);

struct Ss2dConfig {
  std::int64_t channels = 32;
  std::int64_t state_dim = 8;
};

/// VMamba-style block: LN -> linear (x, z) -> depthwise 3x3 -> SiLU -> four directional
/// scans summed -> LN -> gate by SiLU(z) -> output projection -> residual add.
class Ss2dBlockImpl : public torch::nn::Module {
 public:
  explicit Ss2dBlockImpl(Ss2dConfig cfg = {});

  /// x (B, C, H, W) -> (B, C, H, W).
  Tensor forward(const Tensor& x);

  torch::nn::LayerNorm norm_in{nullptr};
  torch::nn::Linear in_proj{nullptr};
  torch::nn::Conv2d dwconv{nullptr};
  std::vector<SelectiveScan1d> scans;
  torch::nn::LayerNorm norm_out{nullptr};
  torch::nn::Linear out_proj{nullptr};

 private:
  Ss2dConfig cfg_;
};
TORCH_MODULE(Ss2dBlock);

}  // namespace mdpg
