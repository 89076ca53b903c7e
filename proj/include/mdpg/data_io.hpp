#pragma once

#include "mdpg/mri_signal.hpp"
#include "mdpg/tensor_io.hpp"

#include <map>
#include <string>
#include <vector>

namespace mdpg {

struct Sample {
  std::string id;
  std::string volume_id;
  ComplexImage target;  // normalized to unit max magnitude
};

/// Shepp-Logan geometry with MR-like contrast, 3-8 random ellipses and a smooth
/// random phase; max magnitude exactly 1. `size` must be a multiple of 16.
ComplexImage generate_phantom(std::uint64_t seed, std::int64_t size);

/// Centered crop of the last two axes.
Tensor center_crop(const Tensor& x, std::int64_t height, std::int64_t width);

/// Reads a FastMRI-layout HDF5 file: dataset `kspace`, complex (slices, H, W).
/// Each slice is inverse-transformed, center-cropped and max-normalized.
/// Any failure raises IngestError before a single sample is returned.
std::vector<Sample> load_fastmri_volume(const fs::path& path, std::int64_t crop = 320);

/// Writes complex k-space (slices, H, W) as an HDF5 `kspace` dataset of {r, i} float32 pairs.
void write_kspace_h5(const fs::path& path, const Tensor& kspace);

struct DatasetManifest {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::string source = "phantom";
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::uint64_t seed = 0;
  // Per-sample volume id and normalization scale; filled in by write_dataset.
  std::map<std::string, std::string> volumes;
  std::map<std::string, double> scales;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// Seeded shuffle and split; round(n * ratio) samples go to train.
DatasetManifest make_splits(const std::vector<std::string>& ids, double ratio, std::uint64_t seed);

/// Dataset directory: manifest.json + samples/<id>.{bin,json} (array container, (2, H, W) float32).
/// Refuses to overwrite an existing dataset.
void write_dataset(const fs::path& dir, const std::vector<Sample>& samples, DatasetManifest manifest);
DatasetManifest read_manifest(const fs::path& dir);
std::vector<Sample> read_samples(const fs::path& dir, const std::vector<std::string>& ids);

/// 8-bit grayscale PNG of a magnitude image (H, W) or complex image (2, H, W), scaled by `vmax`
/// (max of the image when vmax <= 0) and clipped.
void write_png_magnitude(const fs::path& path, const Tensor& image, double vmax = 0.0);

/// Generates `count` phantoms with ids "ph%05d", seeds derived from `seed`.
std::vector<Sample> generate_phantom_set(std::int64_t count, std::int64_t size, std::uint64_t seed);

}  // namespace mdpg
