#include "mdpg/data_io.hpp"

#include <hdf5.h>
#include <png.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numbers>
#include <random>
#include <set>

namespace mdpg {

namespace {

struct Ellipse {
  double x0, y0, a, b, theta_deg, value;
};

// Shepp-Logan geometry; intensities give a dim rim and bright interior.
constexpr std::array<Ellipse, 10> kBase{{
    {0.0, 0.0, 0.69, 0.92, 0.0, 0.3},
    {0.0, -0.0184, 0.6624, 0.874, 0.0, 0.5},
    {0.22, 0.0, 0.11, 0.31, -18.0, -0.2},
    {-0.22, 0.0, 0.16, 0.41, 18.0, -0.2},
    {0.0, 0.35, 0.21, 0.25, 0.0, 0.1},
    {0.0, 0.1, 0.046, 0.046, 0.0, 0.1},
    {0.0, -0.1, 0.046, 0.046, 0.0, 0.1},
    {-0.08, -0.605, 0.046, 0.023, 0.0, 0.1},
    {0.0, -0.606, 0.023, 0.023, 0.0, 0.1},
    {0.06, -0.605, 0.023, 0.046, 0.0, 0.1},
}};

class Uniform {
 public:
  explicit Uniform(std::uint64_t seed) : rng_(seed) {}
  double operator()(double lo, double hi) { return lo + (hi - lo) * (static_cast<double>(rng_() >> 11) * 0x1.0p-53); }
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>((*this)(0.0, 1.0) * n); }

 private:
  std::mt19937_64 rng_;
};

struct H5Handle {
  hid_t id = -1;
  herr_t (*close)(hid_t) = nullptr;
  H5Handle(hid_t i, herr_t (*c)(hid_t)) : id(i), close(c) {}
  H5Handle(const H5Handle&) = delete;
  H5Handle& operator=(const H5Handle&) = delete;
  ~H5Handle() {
    if (id >= 0 && close) close(id);
  }
  explicit operator bool() const { return id >= 0; }
};

struct ComplexPair {
  double r, i;
};

hid_t complex_memtype() {
  hid_t t = H5Tcreate(H5T_COMPOUND, sizeof(ComplexPair));
  H5Tinsert(t, "r", HOFFSET(ComplexPair, r), H5T_NATIVE_DOUBLE);
  H5Tinsert(t, "i", HOFFSET(ComplexPair, i), H5T_NATIVE_DOUBLE);
  return t;
}

}  // namespace

ComplexImage generate_phantom(std::uint64_t seed, std::int64_t size) {
  if (size < 16 || size % 16 != 0) throw ShapeError("phantom size must be a positive multiple of 16");
  Uniform rnd(seed);
  std::vector<Ellipse> ellipses(kBase.begin(), kBase.end());
  const auto extra = 3 + static_cast<int>(rnd.below(6));
  for (int k = 0; k < extra; ++k) {
    Ellipse e{};
    e.x0 = rnd(-0.45, 0.45);
    e.y0 = rnd(-0.55, 0.55);
    e.a = rnd(0.04, 0.2);
    e.b = rnd(0.04, 0.2);
    e.theta_deg = rnd(0.0, 180.0);
    e.value = rnd(-0.3, 0.3);
    ellipses.push_back(e);
  }
  std::array<double, 6> phase{};
  phase[0] = rnd(-std::numbers::pi, std::numbers::pi);
  for (int k = 1; k < 6; ++k) phase[k] = rnd(-1.0, 1.0);

  // 2x2 supersampled intensities, clipped at zero before averaging.
  constexpr int ss = 2;
  const auto m = size * ss;
  std::vector<double> fine(m * m, 0.0);
  for (const auto& e : ellipses) {
    const double th = e.theta_deg * std::numbers::pi / 180.0;
    const double ct = std::cos(th), st = std::sin(th);
    for (std::int64_t r = 0; r < m; ++r) {
      const double y = -((r + 0.5) / m * 2.0 - 1.0);
      for (std::int64_t c = 0; c < m; ++c) {
        const double x = (c + 0.5) / m * 2.0 - 1.0;
        const double xr = (x - e.x0) * ct + (y - e.y0) * st;
        const double yr = -(x - e.x0) * st + (y - e.y0) * ct;
        if ((xr / e.a) * (xr / e.a) + (yr / e.b) * (yr / e.b) <= 1.0) fine[r * m + c] += e.value;
      }
    }
  }

  auto img = torch::zeros({2, size, size}, torch::kFloat64);
  auto acc = img.accessor<double, 3>();
  double peak = 0.0;
  for (std::int64_t r = 0; r < size; ++r) {
    const double y = -((r + 0.5) / size * 2.0 - 1.0);
    for (std::int64_t c = 0; c < size; ++c) {
      const double x = (c + 0.5) / size * 2.0 - 1.0;
      double mag = 0.0;
      for (int dr = 0; dr < ss; ++dr)
        for (int dc = 0; dc < ss; ++dc) mag += std::max(0.0, fine[(r * ss + dr) * m + c * ss + dc]);
      mag /= ss * ss;
      const double ph = phase[0] + phase[1] * x + phase[2] * y + phase[3] * x * y + phase[4] * x * x + phase[5] * y * y;
      acc[0][r][c] = mag * std::cos(ph);
      acc[1][r][c] = mag * std::sin(ph);
    }
  }
  peak = magnitude(img).max().item<double>();
  if (!(peak > 0.0)) throw Error("degenerate phantom");
  img /= peak;
  return ComplexImage::from_tensor(img.to(torch::kFloat32), 1.0 / peak);
}

Tensor center_crop(const Tensor& x, std::int64_t height, std::int64_t width) {
  const auto H = x.size(-2), W = x.size(-1);
  if (height > H || width > W) throw ShapeError("crop larger than input");
  const auto r0 = (H - height) / 2, c0 = (W - width) / 2;
  return x.narrow(-2, r0, height).narrow(-1, c0, width);
}

std::vector<Sample> load_fastmri_volume(const fs::path& path, std::int64_t crop) {
  H5Eset_auto2(H5E_DEFAULT, nullptr, nullptr);
  if (!fs::exists(path)) throw IngestError("no such file: " + path.string());
  H5Handle file(H5Fopen(path.c_str(), H5F_ACC_RDONLY, H5P_DEFAULT), H5Fclose);
  if (!file) throw IngestError("not a readable HDF5 file: " + path.string());
  if (H5Lexists(file.id, "kspace", H5P_DEFAULT) <= 0) throw IngestError("missing dataset 'kspace' in " + path.string());
  H5Handle dset(H5Dopen2(file.id, "kspace", H5P_DEFAULT), H5Dclose);
  if (!dset) throw IngestError("cannot open dataset 'kspace'");
  H5Handle space(H5Dget_space(dset.id), H5Sclose);
  const int rank = H5Sget_simple_extent_ndims(space.id);
  if (rank != 3) throw IngestError("kspace must have rank 3 (slices, H, W), got rank " + std::to_string(rank));
  hsize_t dims[3];
  H5Sget_simple_extent_dims(space.id, dims, nullptr);
  H5Handle ftype(H5Dget_type(dset.id), H5Tclose);
  if (H5Tget_class(ftype.id) != H5T_COMPOUND || H5Tget_nmembers(ftype.id) != 2) {
    throw IngestError("kspace must be complex ({r, i} compound)");
  }
  H5Handle mtype(complex_memtype(), H5Tclose);
  const auto S = static_cast<std::int64_t>(dims[0]), H = static_cast<std::int64_t>(dims[1]),
             W = static_cast<std::int64_t>(dims[2]);
  if (H < crop || W < crop) throw IngestError("slices smaller than the crop size");
  std::vector<ComplexPair> buf(static_cast<std::size_t>(S * H * W));
  if (H5Dread(dset.id, mtype.id, H5S_ALL, H5S_ALL, H5P_DEFAULT, buf.data()) < 0) {
    throw IngestError("failed to read kspace data from " + path.string());
  }

  auto raw = torch::from_blob(buf.data(), {S, H, W, 2}, torch::kFloat64).clone();
  auto kspace = raw.permute({0, 3, 1, 2}).contiguous();  // (S, 2, H, W)
  if (!torch::isfinite(kspace).all().item<bool>()) throw IngestError("non-finite k-space values");
  auto images = center_crop(ifft2c(kspace), crop, crop);

  const auto volume = path.stem().string();
  std::vector<Sample> out;
  for (std::int64_t s = 0; s < S; ++s) {
    auto img = images[s].contiguous();
    const double peak = magnitude(img).max().item<double>();
    if (!(peak > 0.0)) throw IngestError("slice " + std::to_string(s) + " is all zeros");
    out.push_back(Sample{volume + "_s" + std::to_string(s), volume,
                         ComplexImage::from_tensor((img / peak).to(torch::kFloat32), 1.0 / peak)});
  }
  return out;
}

void write_kspace_h5(const fs::path& path, const Tensor& kspace) {
  if (!kspace.is_complex() || kspace.dim() != 3) throw ShapeError("write_kspace_h5 expects complex (S, H, W)");
  struct Pair32 {
    float r, i;
  };
  auto c = kspace.to(torch::kComplexFloat).contiguous();
  std::vector<Pair32> buf(c.numel());
  std::memcpy(buf.data(), c.data_ptr(), c.nbytes());

  H5Handle file(H5Fcreate(path.c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT), H5Fclose);
  if (!file) throw Error("cannot create " + path.string());
  H5Handle type(H5Tcreate(H5T_COMPOUND, sizeof(Pair32)), H5Tclose);
  H5Tinsert(type.id, "r", HOFFSET(Pair32, r), H5T_NATIVE_FLOAT);
  H5Tinsert(type.id, "i", HOFFSET(Pair32, i), H5T_NATIVE_FLOAT);
  hsize_t dims[3] = {static_cast<hsize_t>(c.size(0)), static_cast<hsize_t>(c.size(1)),
                     static_cast<hsize_t>(c.size(2))};
  H5Handle space(H5Screate_simple(3, dims, nullptr), H5Sclose);
  H5Handle dset(H5Dcreate2(file.id, "kspace", type.id, space.id, H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT), H5Dclose);
  if (!dset || H5Dwrite(dset.id, type.id, H5S_ALL, H5S_ALL, H5P_DEFAULT, buf.data()) < 0) {
    throw Error("failed to write kspace to " + path.string());
  }
}

nlohmann::json DatasetManifest::to_json() const {
  return {{"train", train}, {"val", val},       {"source", source},   {"height", height},
          {"width", width}, {"seed", seed},     {"volumes", volumes}, {"scales", scales}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.train = j.at("train").get<std::vector<std::string>>();
  m.val = j.at("val").get<std::vector<std::string>>();
  m.source = j.at("source");
  m.height = j.at("height");
  m.width = j.at("width");
  m.seed = j.at("seed");
  if (j.contains("volumes")) m.volumes = j.at("volumes").get<std::map<std::string, std::string>>();
  if (j.contains("scales")) m.scales = j.at("scales").get<std::map<std::string, double>>();
  std::set<std::string> seen(m.train.begin(), m.train.end());
  for (const auto& id : m.val) {
    if (seen.count(id)) throw IngestError("manifest lists '" + id + "' in both train and val");
  }
  return m;
}

DatasetManifest make_splits(const std::vector<std::string>& ids, double ratio, std::uint64_t seed) {
  if (ids.empty()) throw InputError("cannot split an empty sample set");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must be in (0, 1)");
  std::vector<std::string> order = ids;
  Uniform rnd(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rnd.below(i + 1)]);
  const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ids.size())));
  DatasetManifest m;
  m.seed = seed;
  m.train.assign(order.begin(), order.begin() + n_train);
  m.val.assign(order.begin() + n_train, order.end());
  return m;
}

void write_dataset(const fs::path& dir, const std::vector<Sample>& samples, DatasetManifest manifest) {
  if (fs::exists(dir / "manifest.json")) throw InputError("dataset already exists at " + dir.string());
  fs::create_directories(dir / "samples");
  for (const auto& s : samples) {
    write_array(dir / "samples" / s.id, s.target.data.to(torch::kFloat32));
    manifest.volumes[s.id] = s.volume_id;
    manifest.scales[s.id] = s.target.normalization_scale;
  }
  write_text_atomic(dir / "manifest.json", manifest.to_json().dump(2));
}

DatasetManifest read_manifest(const fs::path& dir) {
  try {
    return DatasetManifest::from_json(nlohmann::json::parse(read_text(dir / "manifest.json")));
  } catch (const nlohmann::json::exception& e) {
    throw IngestError(std::string("bad dataset manifest: ") + e.what());
  } catch (const Error& e) {
    throw IngestError(e.what());
  }
}

std::vector<Sample> read_samples(const fs::path& dir, const std::vector<std::string>& ids) {
  const auto m = read_manifest(dir);
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto t = read_array(dir / "samples" / id);
    const auto v = m.volumes.find(id);
    const auto s = m.scales.find(id);
    out.push_back(Sample{id, v == m.volumes.end() ? id : v->second,
                         ComplexImage::from_tensor(t.to(torch::kFloat32), s == m.scales.end() ? 1.0 : s->second)});
  }
  return out;
}

std::vector<Sample> generate_phantom_set(std::int64_t count, std::int64_t size, std::uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::int64_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "ph%05lld", static_cast<long long>(i));
    out.push_back(Sample{id, id, generate_phantom(mix_seed(seed, i), size)});
  }
  return out;
}

void write_png_magnitude(const fs::path& path, const Tensor& image, double vmax) {
  auto mag = image.dim() == 3 ? magnitude(image.to(torch::kFloat64)).squeeze(0) : image.to(torch::kFloat64);
  if (mag.dim() != 2) throw ShapeError("write_png_magnitude expects (H, W) or (2, H, W)");
  if (vmax <= 0.0) vmax = mag.max().item<double>();
  if (!(vmax > 0.0)) vmax = 1.0;
  auto px = (mag / vmax * 255.0).round().clamp(0, 255).to(torch::kUInt8).contiguous();
  const auto H = static_cast<png_uint_32>(px.size(0)), W = static_cast<png_uint_32>(px.size(1));

  const auto tmp = fs::path(path.string() + ".tmp");
  std::FILE* fp = std::fopen(tmp.c_str(), "wb");
  if (!fp) throw Error("cannot open " + tmp.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto* base = px.data_ptr<std::uint8_t>();
  for (png_uint_32 r = 0; r < H; ++r) png_write_row(png, base + static_cast<std::size_t>(r) * W);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  fs::rename(tmp, path);
}

}  // namespace mdpg
