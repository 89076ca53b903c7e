#include "mdpg/mri_signal.hpp"

#include <cmath>
#include <random>

namespace mdpg {

GammaMode gamma_mode_from_string(const std::string& s) {
  if (s == "complement") return GammaMode::Complement;
  if (s == "sampled") return GammaMode::SampledOnly;
  throw ConfigError("unknown gamma mode '" + s + "' (expected complement|sampled)");
}

std::string to_string(GammaMode mode) {
  return mode == GammaMode::Complement ? "complement" : "sampled";
}

ComplexImage ComplexImage::from_tensor(Tensor data, double normalization_scale) {
  if (data.dim() != 3 || data.size(0) != 2) {
    throw ShapeError("complex image must have shape (2, H, W)");
  }
  if (data.size(1) % 16 != 0 || data.size(2) % 16 != 0) {
    throw ShapeError("image dims must be multiples of 16, got " + std::to_string(data.size(1)) + "x" +
                     std::to_string(data.size(2)));
  }
  if (!(normalization_scale > 0.0)) throw InputError("normalization scale must be positive");
  require_finite(data, "complex image");
  return ComplexImage{std::move(data), normalization_scale};
}

// ---------------------------------------------------------------------------
// Masks

std::int64_t CartesianMask::sampled_count() const {
  std::int64_t n = 0;
  for (auto c : columns_) n += c;
  return n;
}

std::vector<std::int64_t> CartesianMask::acs_columns() const {
  std::vector<std::int64_t> out(acs_count_);
  for (std::int64_t i = 0; i < acs_count_; ++i) out[i] = acs_begin_ + i;
  return out;
}

std::vector<std::int64_t> CartesianMask::nacs_columns(GammaMode mode) const {
  std::vector<std::int64_t> out;
  for (std::int64_t c = 0; c < width(); ++c) {
    if (is_acs(c)) continue;
    if (mode == GammaMode::SampledOnly && !sampled(c)) continue;
    out.push_back(c);
  }
  return out;
}

Tensor CartesianMask::tensor(torch::Dtype dtype) const {
  auto t = torch::zeros({width()}, torch::kFloat64);
  auto acc = t.accessor<double, 1>();
  for (std::int64_t c = 0; c < width(); ++c) acc[c] = columns_[c];
  return t.to(dtype);
}

Tensor CartesianMask::gamma_tensor(GammaMode mode, torch::Dtype dtype) const {
  auto t = torch::zeros({width()}, torch::kFloat64);
  auto acc = t.accessor<double, 1>();
  for (auto c : nacs_columns(mode)) acc[c] = 1.0;
  return t.to(dtype);
}

nlohmann::json CartesianMask::to_json() const {
  std::vector<int> cols(columns_.begin(), columns_.end());
  return {{"width", width()},
          {"acceleration", acceleration_},
          {"center_fraction", center_fraction_},
          {"seed", seed_},
          {"column_mask", cols}};
}

CartesianMask CartesianMask::from_json(const nlohmann::json& j) {
  try {
    auto m = make_cartesian_mask(j.at("width").get<std::int64_t>(), j.at("acceleration").get<double>(),
                                 j.at("center_fraction").get<double>(), j.at("seed").get<std::uint64_t>());
    if (j.contains("column_mask")) {
      auto cols = j.at("column_mask").get<std::vector<int>>();
      if (static_cast<std::int64_t>(cols.size()) != m.width()) throw ConfigError("column_mask length != width");
      for (std::size_t i = 0; i < cols.size(); ++i) {
        if (cols[i] != 0 && cols[i] != 1) throw ConfigError("column_mask entries must be 0 or 1");
        if (m.is_acs(static_cast<std::int64_t>(i)) && cols[i] == 0) {
          throw ConfigError("column_mask leaves an ACS column unsampled");
        }
        m.columns_[i] = static_cast<std::uint8_t>(cols[i]);
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed mask json: ") + e.what());
  }
}

std::int64_t acs_width(std::int64_t width, double center_fraction) {
  return static_cast<std::int64_t>(std::llround(static_cast<double>(width) * center_fraction));
}

CartesianMask make_cartesian_mask(std::int64_t width, double acceleration, double center_fraction,
                                  std::uint64_t seed) {
  if (width < 16) throw ConfigError("mask width must be >= 16");
  if (!(acceleration >= 1.0)) throw ConfigError("acceleration must be >= 1");
  if (!(center_fraction > 0.0 && center_fraction <= 1.0)) throw ConfigError("center fraction must be in (0, 1]");
  const std::int64_t n_acs = acs_width(width, center_fraction);
  if (n_acs < 1) throw ConfigError("center fraction selects no ACS columns");

  double prob = 1.0;
  if (n_acs < width) {
    prob = (static_cast<double>(width) / acceleration - static_cast<double>(n_acs)) /
           static_cast<double>(width - n_acs);
  }
  if (!(prob >= 0.0 && prob <= 1.0)) {
    throw ConfigError("center fraction too large for the requested acceleration (p = " + std::to_string(prob) + ")");
  }

  CartesianMask m;
  m.columns_.assign(width, 0);
  m.acceleration_ = acceleration;
  m.center_fraction_ = center_fraction;
  m.seed_ = seed;
  m.acs_count_ = n_acs;
  m.acs_begin_ = (width - n_acs + 1) / 2;

  std::mt19937_64 rng(seed);
  for (std::int64_t c = 0; c < width; ++c) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m.columns_[c] = (m.is_acs(c) || u < prob) ? 1 : 0;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Transforms

Tensor to_complex(const Tensor& channels) {
  const auto c = channels.size(-3);
  if (c % 2 != 0) throw ShapeError("channel-pair tensor needs an even channel count");
  auto parts = channels.split(c / 2, -3);
  return torch::complex(parts[0], parts[1]);
}

Tensor from_complex(const Tensor& complex) {
  return torch::cat({torch::real(complex), torch::imag(complex)}, -3);
}

Tensor complex_mul(const Tensor& a, const Tensor& b) {
  return from_complex(to_complex(a) * to_complex(b));
}

Tensor magnitude(const Tensor& channels) {
  return torch::abs(to_complex(channels));
}

Tensor fft2c(const Tensor& image) {
  require_finite(image, "fft2c input");
  auto z = torch::fft::ifftshift(to_complex(image), {-2, -1});
  z = torch::fft::fft2(z, c10::nullopt, {-2, -1}, "ortho");
  return from_complex(torch::fft::fftshift(z, {-2, -1}));
}

Tensor ifft2c(const Tensor& kspace) {
  require_finite(kspace, "ifft2c input");
  auto z = torch::fft::ifftshift(to_complex(kspace), {-2, -1});
  z = torch::fft::ifft2(z, c10::nullopt, {-2, -1}, "ortho");
  return from_complex(torch::fft::fftshift(z, {-2, -1}));
}

// ---------------------------------------------------------------------------
// Acquisition

Tensor forward_model(const Tensor& x, const Tensor& mask, double noise_sigma, torch::Generator& gen) {
  if (noise_sigma < 0.0) throw ConfigError("noise sigma must be nonnegative");
  auto k = fft2c(x);
  if (noise_sigma > 0.0) {
    k = k + noise_sigma * torch::randn(k.sizes(), gen, k.options());
  }
  return k * mask;
}

KSpaceMeasurement forward_model(const ComplexImage& x, const MeasurementModel& model, std::uint64_t seed) {
  if (model.mask.width() != x.width()) throw ShapeError("mask width does not match image width");
  Tensor coil_image = x.data;
  if (model.sensitivity) {
    if (model.sensitivity->sizes() != x.data.sizes()) throw ShapeError("sensitivity map shape mismatch");
    coil_image = complex_mul(*model.sensitivity, x.data);
  }
  auto gen = make_generator(seed);
  auto y = forward_model(coil_image, model.mask.tensor(x.data.scalar_type()), model.noise_sigma, gen);
  return KSpaceMeasurement{y, model.mask, model.noise_sigma};
}

Tensor zero_fill(const Tensor& y) { return ifft2c(y); }

ComplexImage zero_fill(const KSpaceMeasurement& y) {
  if (y.data.dim() != 3 || y.data.size(0) != 2) throw ShapeError("measurement must have shape (2, H, W)");
  if (y.mask.width() != y.data.size(-1)) throw ShapeError("measurement width does not match its mask");
  return ComplexImage::from_tensor(ifft2c(y.data));
}

Tensor data_consistency(const Tensor& xhat_prime, const Tensor& y, const Tensor& mask, const Tensor& nu) {
  if (xhat_prime.sizes() != y.sizes()) throw ShapeError("data consistency: prediction/measurement shape mismatch");
  if (nu.lt(0).any().item<bool>()) throw InputError("data consistency: nu must be nonnegative");
  auto k = fft2c(xhat_prime);
  auto blended = (k + nu * y) / (1 + nu);
  return ifft2c(k * (1 - mask) + blended * mask);
}

ComplexImage data_consistency(const ComplexImage& xhat_prime, const KSpaceMeasurement& y, const CartesianMask& mask,
                              const DataConsistencyParams& params) {
  if (params.nu < 0.0 || !std::isfinite(params.nu)) throw InputError("data consistency: nu must be finite and >= 0");
  if (mask.width() != xhat_prime.width()) throw ShapeError("data consistency: mask width mismatch");
  auto dtype = xhat_prime.data.scalar_type();
  auto nu = torch::full({}, params.nu, torch::TensorOptions().dtype(dtype));
  auto out = data_consistency(xhat_prime.data, y.data.to(dtype), mask.tensor(dtype), nu);
  return ComplexImage{out, xhat_prime.normalization_scale};
}

Tensor nacs_restrict(const Tensor& kspace, const Tensor& gamma) { return kspace * gamma; }

Tensor nacs_restrict(const Tensor& kspace, const CartesianMask& mask, GammaMode mode) {
  if (kspace.size(-1) != mask.width()) throw ShapeError("nacs_restrict: width mismatch");
  return nacs_restrict(kspace, mask.gamma_tensor(mode, kspace.scalar_type()));
}

}  // namespace mdpg
