#pragma once

#include "mdpg/common.hpp"

// c10 logging defines its own CHECK.
#undef CHECK
#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <unistd.h>

namespace testing {

using mdpg::Tensor;
namespace fs = std::filesystem;

inline Tensor randn(std::vector<std::int64_t> shape, std::uint64_t seed, torch::Dtype dtype = torch::kFloat64) {
  auto gen = mdpg::make_generator(seed);
  return torch::randn(shape, gen, torch::TensorOptions().dtype(dtype));
}

inline double max_abs(const Tensor& t) { return t.abs().max().item<double>(); }
inline double rel_err(const Tensor& a, const Tensor& b) {
  return (a - b).norm().item<double>() / std::max(b.norm().item<double>(), 1e-300);
}

/// Perturbs every parameter of a module so zero-initialised layers are exercised.
inline void randomize(torch::nn::Module& m, std::uint64_t seed, double scale = 0.3) {
  torch::NoGradGuard g;
  auto gen = mdpg::make_generator(seed);
  for (auto& p : m.parameters()) p.add_(torch::randn(p.sizes(), gen, p.options()) * scale);
}

/// Fourth-order central differences against autograd on `count` random coordinates of `param`.
/// Returns the worst relative error; `loss` must rebuild the graph on each call.
inline double gradcheck(const std::function<Tensor()>& loss, Tensor param, std::uint64_t seed, int count = 5,
                        double h = 1e-4) {
  if (param.grad().defined()) param.mutable_grad().zero_();
  auto l = loss();
  auto grad = torch::autograd::grad({l}, {param}, {}, false, false, true)[0];
  if (!grad.defined()) grad = torch::zeros_like(param);
  grad = grad.flatten();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> pick(0, param.numel() - 1);
  double worst = 0;
  torch::NoGradGuard ng;
  auto flat = param.view({-1});
  for (int i = 0; i < count; ++i) {
    const auto k = pick(rng);
    const double orig = flat[k].item<double>();
    auto at = [&](double v) {
      flat[k].fill_(v);
      return loss().item<double>();
    };
    const double fd = (-at(orig + 2 * h) + 8 * at(orig + h) - 8 * at(orig - h) + at(orig - 2 * h)) / (12 * h);
    flat[k].fill_(orig);
    const double ad = grad[k].item<double>();
    const double err = std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-6});
    worst = std::max(worst, err);
    if (std::getenv("MDPG_GRADCHECK_VERBOSE")) MESSAGE("coord " << k << " fd " << fd << " ad " << ad);
  }
  return worst;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() /
           ("mdpg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  fs::path operator/(const std::string& s) const { return path / s; }
};

}  // namespace testing
