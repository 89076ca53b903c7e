#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mdpg {

using torch::Tensor;

// Error taxonomy. The CLI maps these onto process exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct InputError : Error {
  using Error::Error;
};
struct CheckpointError : Error {
  using Error::Error;
};
struct IngestError : Error {
  using Error::Error;
};
struct DivergenceError : Error {
  using Error::Error;
};
struct DegenerateTargetError : Error {
  using Error::Error;
};

inline void require_finite(const Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw InputError(std::string(what) + ": non-finite entries");
  }
}

// Dedicated generator so every random draw is reproducible from an explicit seed.
inline torch::Generator make_generator(std::uint64_t seed) {
  return at::detail::createCPUGenerator(seed);
}

// splitmix64 finalizer; combines a base seed with a counter (step, sample index, ...).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace mdpg
