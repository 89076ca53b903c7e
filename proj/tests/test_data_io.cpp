#include "helpers.hpp"

#include "mdpg/data_io.hpp"

#include <hdf5.h>

#include <fstream>
#include <set>

using namespace mdpg;
using testing::TempDir;

namespace {

// Writes a compound {r, i} float32 dataset of arbitrary rank under `name`.
void write_compound(const fs::path& path, const std::string& name, const std::vector<hsize_t>& dims) {
  struct Pair {
    float r, i;
  };
  hsize_t n = 1;
  for (auto d : dims) n *= d;
  std::vector<Pair> buf(n, Pair{1.0f, 0.5f});
  hid_t f = H5Fcreate(path.c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT);
  hid_t t = H5Tcreate(H5T_COMPOUND, sizeof(Pair));
  H5Tinsert(t, "r", HOFFSET(Pair, r), H5T_NATIVE_FLOAT);
  H5Tinsert(t, "i", HOFFSET(Pair, i), H5T_NATIVE_FLOAT);
  hid_t s = H5Screate_simple(static_cast<int>(dims.size()), dims.data(), nullptr);
  hid_t d = H5Dcreate2(f, name.c_str(), t, s, H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT);
  H5Dwrite(d, t, H5S_ALL, H5S_ALL, H5P_DEFAULT, buf.data());
  H5Dclose(d);
  H5Sclose(s);
  H5Tclose(t);
  H5Fclose(f);
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_SUITE("data_io") {
  TEST_CASE("phantoms: shape, normalisation, determinism") {
    auto a = generate_phantom(3, 64), b = generate_phantom(3, 64), c = generate_phantom(4, 64);
    CHECK(a.data.sizes() == torch::IntArrayRef({2, 64, 64}));
    CHECK((a.data.scalar_type() == torch::kFloat32));
    CHECK(torch::equal(a.data, b.data));
    CHECK_FALSE(torch::equal(a.data, c.data));
    for (std::uint64_t s = 0; s < 20; ++s) {
      auto p = generate_phantom(s, 64);
      auto mag = magnitude(p.data.to(torch::kFloat64))[0];
      CHECK(std::abs(mag.max().item<double>() - 1.0) < 1e-6);
      CHECK(torch::isfinite(p.data).all().item<bool>());
      CHECK(p.normalization_scale > 0.0);
      // the object sits inside a background of zeros and has non-trivial phase
      CHECK(mag[0][0].item<double>() == 0.0);
      CHECK((mag > 0.05).to(torch::kFloat64).mean().item<double>() > 0.2);
      CHECK(p.data[1].abs().max().item<double>() > 0.05);
    }
    CHECK(generate_phantom(1, 320).data.sizes() == torch::IntArrayRef({2, 320, 320}));
    CHECK_THROWS_AS(generate_phantom(0, 40), ShapeError);
  }

  TEST_CASE("phantom sets") {
    auto set = generate_phantom_set(5, 32, 9);
    REQUIRE(set.size() == 5);
    CHECK(set[0].id == "ph00000");
    CHECK(set[4].id == "ph00004");
    CHECK(set[2].volume_id == set[2].id);
    CHECK_FALSE(torch::equal(set[0].target.data, set[1].target.data));
    auto again = generate_phantom_set(5, 32, 9);
    CHECK(torch::equal(set[3].target.data, again[3].target.data));
  }

  TEST_CASE("splits are seeded, disjoint and complete") {
    std::vector<std::string> ids;
    for (int i = 0; i < 200; ++i) ids.push_back("s" + std::to_string(i));
    auto m = make_splits(ids, 0.9, 4);
    CHECK(m.train.size() == 180);
    CHECK(m.val.size() == 20);
    std::set<std::string> all(m.train.begin(), m.train.end());
    for (auto& v : m.val) CHECK(all.insert(v).second);
    CHECK(all.size() == 200);
    auto m2 = make_splits(ids, 0.9, 4), m3 = make_splits(ids, 0.9, 5);
    CHECK(m.train == m2.train);
    CHECK(m.train != m3.train);
    CHECK_THROWS_AS(make_splits(ids, 1.0, 0), ConfigError);
    CHECK_THROWS_AS(make_splits({}, 0.5, 0), InputError);
  }

  TEST_CASE("dataset round trip and overwrite protection") {
    TempDir dir("ds");
    auto samples = generate_phantom_set(6, 32, 1);
    samples[2].volume_id = "volA";
    std::vector<std::string> ids;
    for (auto& s : samples) ids.push_back(s.id);
    auto m = make_splits(ids, 0.5, 2);
    m.height = m.width = 32;
    write_dataset(dir.path, samples, m);
    auto back_m = read_manifest(dir.path);
    CHECK(back_m.train == m.train);
    CHECK(back_m.val == m.val);
    auto back = read_samples(dir.path, ids);
    REQUIRE(back.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(back[i].id == samples[i].id);
      CHECK(back[i].volume_id == samples[i].volume_id);
      CHECK(torch::equal(back[i].target.data, samples[i].target.data));
      CHECK(back[i].target.normalization_scale == doctest::Approx(samples[i].target.normalization_scale));
    }
    CHECK_THROWS_AS(write_dataset(dir.path, samples, m), InputError);

    auto j = m.to_json();
    j["val"].push_back(m.train.front());
    CHECK_THROWS_AS(DatasetManifest::from_json(j), IngestError);
  }

  TEST_CASE("array container") {
    TempDir dir("arr");
    auto t = torch::randn({3, 4, 5}, torch::kFloat64);
    write_array(dir / "x", t);
    CHECK(torch::equal(read_array(dir / "x"), t));
    auto side = nlohmann::json::parse(read_text(dir / "x.json"));
    CHECK(side["dtype"].get<std::string>() == "float64");
    CHECK(side["shape"].get<std::vector<int>>() == std::vector<int>{3, 4, 5});
    CHECK(fs::file_size(dir / "x.bin") == 60 * 8);
  }

  TEST_CASE("checkpoint container detects damage") {
    TempDir dir("ck");
    Checkpoint ck;
    ck.meta = {{"kind", "test"}, {"n", 3}};
    ck.tensors["a"] = torch::randn({4, 4});
    ck.tensors["b"] = torch::arange(6, torch::kLong);
    save_checkpoint(dir / "c.ckpt", ck);
    auto back = load_checkpoint(dir / "c.ckpt");
    CHECK(back.meta["n"].get<int>() == 3);
    CHECK(torch::equal(back.tensors.at("a"), ck.tensors["a"]));
    CHECK(torch::equal(back.tensors.at("b"), ck.tensors["b"]));
    CHECK(hash_tensors(back.tensors) == hash_tensors(ck.tensors));

    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
    auto bytes = read_bytes(dir / "c.ckpt");
    {
      std::ofstream f(dir / "trunc.ckpt", std::ios::binary);
      f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size() - 7));
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), CheckpointError);
    bytes.back() ^= 0xff;
    {
      std::ofstream f(dir / "flip.ckpt", std::ios::binary);
      f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "flip.ckpt"), CheckpointError);
    {
      std::ofstream f(dir / "junk.ckpt", std::ios::binary);
      f << "not a checkpoint at all";
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), CheckpointError);
  }

  TEST_CASE("HDF5 ingest: three slices") {
    TempDir dir("h5");
    std::vector<Tensor> imgs;
    for (int s = 0; s < 3; ++s) imgs.push_back(generate_phantom(10 + s, 320).data.to(torch::kFloat64) * (s + 2.0));
    auto img = torch::stack(imgs);  // (3, 2, 320, 320)
    auto k = to_complex(fft2c(img)).squeeze(1);
    write_kspace_h5(dir / "vol1.h5", k);
    auto out = load_fastmri_volume(dir / "vol1.h5", 320);
    REQUIRE(out.size() == 3);
    for (int s = 0; s < 3; ++s) {
      CHECK(out[s].volume_id == "vol1");
      CHECK(out[s].id == "vol1_s" + std::to_string(s));
      CHECK(std::abs(magnitude(out[s].target.data.to(torch::kFloat64)).max().item<double>() - 1.0) < 1e-6);
      // float32 storage on disk bounds the achievable agreement
      CHECK(testing::rel_err(out[s].target.data.to(torch::kFloat64), imgs[s] / (s + 2.0)) < 1e-5);
      CHECK(out[s].target.normalization_scale == doctest::Approx(1.0 / (s + 2.0)).epsilon(1e-5));
    }
  }

  TEST_CASE("HDF5 ingest: 640x368 slices are centre-cropped to 320x320") {
    TempDir dir("h5c");
    auto full = torch::zeros({1, 2, 640, 368}, torch::kFloat64);
    auto rows = torch::arange(640, torch::kFloat64).view({640, 1});
    auto cols = torch::arange(368, torch::kFloat64).view({1, 368});
    full[0][0] = 1.0 + rows / 640.0 + cols / 368.0;
    full[0][1] = 0.25 * (rows / 640.0 - cols / 368.0);
    write_kspace_h5(dir / "crop.h5", to_complex(fft2c(full)).squeeze(1));
    auto out = load_fastmri_volume(dir / "crop.h5", 320);
    REQUIRE(out.size() == 1);
    auto expect = full[0].narrow(1, 160, 320).narrow(2, 24, 320);
    expect = expect / magnitude(expect).max();
    CHECK(testing::rel_err(out[0].target.data.to(torch::kFloat64), expect) < 1e-5);
    CHECK(out[0].target.data.sizes() == torch::IntArrayRef({2, 320, 320}));
  }

  TEST_CASE("HDF5 ingest failures raise IngestError") {
    TempDir dir("h5e");
    {
      std::ofstream f(dir / "corrupt.h5", std::ios::binary);
      f << "\x89HDF\r\n\x1a\n garbage garbage garbage";
    }
    CHECK_THROWS_AS(load_fastmri_volume(dir / "corrupt.h5"), IngestError);
    CHECK_THROWS_AS(load_fastmri_volume(dir / "absent.h5"), IngestError);
    write_compound(dir / "nokey.h5", "reconstruction", {2, 320, 320});
    CHECK_THROWS_AS(load_fastmri_volume(dir / "nokey.h5"), IngestError);
    write_compound(dir / "rank2.h5", "kspace", {320, 320});
    CHECK_THROWS_AS(load_fastmri_volume(dir / "rank2.h5"), IngestError);
    write_compound(dir / "small.h5", "kspace", {1, 64, 64});
    CHECK_THROWS_AS(load_fastmri_volume(dir / "small.h5"), IngestError);
    write_kspace_h5(dir / "zeros.h5", torch::zeros({2, 320, 320}, torch::kComplexDouble));
    CHECK_THROWS_AS(load_fastmri_volume(dir / "zeros.h5"), IngestError);
  }

  TEST_CASE("PNG export") {
    TempDir dir("png");
    auto img = generate_phantom(1, 32).data;
    write_png_magnitude(dir / "a.png", img);
    auto b = read_bytes(dir / "a.png");
    REQUIRE(b.size() > 24);
    CHECK(b[0] == 0x89);
    CHECK(b[1] == 'P');
    auto be32 = [&](std::size_t o) { return (b[o] << 24) | (b[o + 1] << 16) | (b[o + 2] << 8) | b[o + 3]; };
    CHECK(be32(16) == 32);  // IHDR width
    CHECK(be32(20) == 32);  // IHDR height
    CHECK(b[24] == 8);      // bit depth
    CHECK(b[25] == 0);      // grayscale
    CHECK_THROWS_AS(write_png_magnitude(dir / "bad.png", torch::zeros({2, 2, 4, 4})), ShapeError);
  }
}
