#pragma once

// Single-coil Cartesian MRI signal model.
//
// Complex data live in a real "channel-pair" layout: a tensor of shape
// (..., 2C, H, W) holds C complex channels, real parts in the first C
// channels and imaginary parts in the last C. A single complex image is
// therefore (2, H, W) and a batch is (B, 2, H, W). Columns (the last axis)
// are the phase-encode direction that Cartesian masks subsample.

#include "mdpg/common.hpp"

#include <json.hpp>

#include <optional>
#include <vector>

namespace mdpg {

/// Which k-space columns count as the non-auto-calibration (NACS) set.
enum class GammaMode {
  Complement,   // every column outside the ACS band
  SampledOnly,  // sampled columns outside the ACS band
};

GammaMode gamma_mode_from_string(const std::string& s);
std::string to_string(GammaMode mode);

struct ComplexImage {
  Tensor data;  // (2, H, W)
  double normalization_scale = 1.0;

  /// Validates the invariants: (2, H, W) layout, finite, H and W multiples of 16.
  static ComplexImage from_tensor(Tensor data, double normalization_scale = 1.0);

  std::int64_t height() const { return data.size(-2); }
  std::int64_t width() const { return data.size(-1); }
};

class CartesianMask {
 public:
  CartesianMask() = default;

  std::int64_t width() const { return static_cast<std::int64_t>(columns_.size()); }
  double acceleration() const { return acceleration_; }
  double center_fraction() const { return center_fraction_; }
  std::uint64_t seed() const { return seed_; }

  const std::vector<std::uint8_t>& column_mask() const { return columns_; }
  bool sampled(std::int64_t col) const { return columns_.at(col) != 0; }
  std::int64_t sampled_count() const;

  // Centered contiguous ACS band [acs_begin, acs_begin + acs_count).
  std::int64_t acs_begin() const { return acs_begin_; }
  std::int64_t acs_count() const { return acs_count_; }
  bool is_acs(std::int64_t col) const { return col >= acs_begin_ && col < acs_begin_ + acs_count_; }

  std::vector<std::int64_t> acs_columns() const;
  std::vector<std::int64_t> nacs_columns(GammaMode mode = GammaMode::Complement) const;

  /// (W,) 0/1 tensor of sampled columns.
  Tensor tensor(torch::Dtype dtype = torch::kFloat) const;
  /// (W,) 0/1 tensor of the NACS set.
  Tensor gamma_tensor(GammaMode mode = GammaMode::Complement, torch::Dtype dtype = torch::kFloat) const;

  nlohmann::json to_json() const;
  static CartesianMask from_json(const nlohmann::json& j);

  friend CartesianMask make_cartesian_mask(std::int64_t width, double acceleration,
                                           double center_fraction, std::uint64_t seed);

 private:
  std::vector<std::uint8_t> columns_;
  double acceleration_ = 1.0;
  double center_fraction_ = 0.0;
  std::uint64_t seed_ = 0;
  std::int64_t acs_begin_ = 0;
  std::int64_t acs_count_ = 0;
};

/// Number of ACS columns for a given width and center fraction, round(width * c).
std::int64_t acs_width(std::int64_t width, double center_fraction);

/// Random Cartesian column mask: the centered round(W*c) band is always sampled and
/// every other column is kept with probability (W/R - n_acs) / (W - n_acs).
CartesianMask make_cartesian_mask(std::int64_t width, double acceleration, double center_fraction,
                                  std::uint64_t seed);

struct MeasurementModel {
  CartesianMask mask;
  std::optional<Tensor> sensitivity;  // (2, H, W); identity when empty
  double noise_sigma = 0.0;
};

struct KSpaceMeasurement {
  Tensor data;  // (2, H, W), zero outside omega
  CartesianMask mask;
  double noise_sigma = 0.0;
};

struct DataConsistencyParams {
  double nu = 1.0;
  bool learnable = true;
};

// Layout helpers.
Tensor to_complex(const Tensor& channels);
Tensor from_complex(const Tensor& complex);
/// Elementwise complex product of two channel-pair tensors.
Tensor complex_mul(const Tensor& a, const Tensor& b);
/// |z| per complex channel: (..., 2C, H, W) -> (..., C, H, W).
Tensor magnitude(const Tensor& channels);

/// Centered orthonormal 2D DFT over the last two axes.
Tensor fft2c(const Tensor& image);
Tensor ifft2c(const Tensor& kspace);

/// y = M F (S x) + n, n complex Gaussian with per-component std sigma, zero off the mask.
KSpaceMeasurement forward_model(const ComplexImage& x, const MeasurementModel& model, std::uint64_t seed);
/// Batched form; `mask` broadcasts against (B, 2, H, W), typically (B, 1, 1, W).
Tensor forward_model(const Tensor& x, const Tensor& mask, double noise_sigma, torch::Generator& gen);

ComplexImage zero_fill(const KSpaceMeasurement& y);
Tensor zero_fill(const Tensor& y);

/// Blend network k-space with measurements on the sampled set:
/// k = k' off the mask, (k' + nu*y) / (1 + nu) on it. Differentiable in xhat_prime and nu.
Tensor data_consistency(const Tensor& xhat_prime, const Tensor& y, const Tensor& mask, const Tensor& nu);
ComplexImage data_consistency(const ComplexImage& xhat_prime, const KSpaceMeasurement& y,
                              const CartesianMask& mask, const DataConsistencyParams& params);

/// Zero the ACS columns (or everything outside the chosen NACS set) of a k-space grid.
Tensor nacs_restrict(const Tensor& kspace, const CartesianMask& mask, GammaMode mode = GammaMode::Complement);
Tensor nacs_restrict(const Tensor& kspace, const Tensor& gamma);

}  // namespace mdpg
