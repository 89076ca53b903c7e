#include "mdpg/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "container formats assume a little-endian host");

namespace mdpg {

namespace {

constexpr char kMagic[8] = {'M', 'D', 'P', 'G', 'C', 'K', 'P', 'T'};

std::string dtype_name(torch::Dtype d) {
  switch (d) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kUInt8: return "uint8";
    default: throw Error("unsupported dtype for serialization");
  }
}

torch::Dtype dtype_from_name(const std::string& s) {
  if (s == "float32") return torch::kFloat32;
  if (s == "float64") return torch::kFloat64;
  if (s == "int64") return torch::kInt64;
  if (s == "uint8") return torch::kUInt8;
  throw CheckpointError("unknown dtype '" + s + "'");
}

std::vector<std::int64_t> shape_of(const Tensor& t) { return t.sizes().vec(); }

fs::path temp_sibling(const fs::path& path) {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  return path.parent_path() / (path.filename().string() + ".tmp" + hex64(rng()));
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view s, std::uint64_t h) { return fnv1a64(s.data(), s.size(), h); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t hash_tensors(const std::map<std::string, Tensor>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : tensors) {
    auto c = t.detach().contiguous().cpu();
    h = fnv1a64(name, h);
    h = fnv1a64(dtype_name(c.scalar_type()), h);
    for (auto s : c.sizes()) h = fnv1a64(&s, sizeof s, h);
    h = fnv1a64(c.data_ptr(), c.nbytes(), h);
  }
  return h;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = temp_sibling(path);
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw Error("cannot write " + tmp.string());
    f << text;
    if (!f) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_array(const fs::path& stem, const Tensor& t) {
  auto c = t.detach().contiguous().cpu();
  nlohmann::json side = {{"dtype", dtype_name(c.scalar_type())}, {"shape", shape_of(c)}, {"byte_order", "little"}};
  auto bin = stem;
  bin += ".bin";
  auto json = stem;
  json += ".json";
  write_text_atomic(bin, std::string(static_cast<const char*>(c.data_ptr()), c.nbytes()));
  write_text_atomic(json, side.dump(2));
}

Tensor read_array(const fs::path& stem) {
  auto bin = stem;
  bin += ".bin";
  auto json = stem;
  json += ".json";
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(read_text(json));
  } catch (const nlohmann::json::exception& e) {
    throw IngestError("bad array sidecar " + json.string() + ": " + e.what());
  } catch (const Error& e) {
    throw IngestError(e.what());
  }
  if (side.value("byte_order", "") != "little") throw IngestError("unsupported byte order in " + json.string());
  auto dtype = dtype_from_name(side.at("dtype").get<std::string>());
  auto shape = side.at("shape").get<std::vector<std::int64_t>>();
  auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
  std::string raw;
  try {
    raw = read_text(bin);
  } catch (const Error& e) {
    throw IngestError(e.what());
  }
  if (raw.size() != t.nbytes()) throw IngestError("array payload size mismatch for " + bin.string());
  std::memcpy(t.data_ptr(), raw.data(), raw.size());
  return t;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  nlohmann::json entries = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, t] : ckpt.tensors) {
    auto c = t.detach().contiguous().cpu();
    entries.push_back({{"name", name},
                       {"dtype", dtype_name(c.scalar_type())},
                       {"shape", shape_of(c)},
                       {"offset", payload.size()},
                       {"nbytes", c.nbytes()}});
    payload.append(static_cast<const char*>(c.data_ptr()), c.nbytes());
  }
  nlohmann::json header = {{"meta", ckpt.meta},
                           {"tensors", entries},
                           {"payload_hash", hex64(fnv1a64(payload.data(), payload.size()))}};
  const std::string h = header.dump();
  std::string out(kMagic, sizeof kMagic);
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t hlen = h.size();
  out.append(reinterpret_cast<const char*>(&version), sizeof version);
  out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out += h;
  out += payload;
  write_text_atomic(path, out);
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  const std::string raw = read_text(path);
  const std::size_t pre = sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (raw.size() < pre || std::memcmp(raw.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a checkpoint file: " + path.string());
  }
  std::uint32_t version;
  std::uint64_t hlen;
  std::memcpy(&version, raw.data() + sizeof kMagic, sizeof version);
  std::memcpy(&hlen, raw.data() + sizeof kMagic + sizeof version, sizeof hlen);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  if (raw.size() < pre + hlen) throw CheckpointError("truncated checkpoint header: " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.substr(pre, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupted checkpoint header: " + std::string(e.what()));
  }
  const char* payload = raw.data() + pre + hlen;
  const std::size_t payload_size = raw.size() - pre - hlen;
  if (header.value("payload_hash", "") != hex64(fnv1a64(payload, payload_size))) {
    throw CheckpointError("checkpoint payload hash mismatch: " + path.string());
  }
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& e : header.at("tensors")) {
    auto t = torch::empty(e.at("shape").get<std::vector<std::int64_t>>(),
                          torch::TensorOptions().dtype(dtype_from_name(e.at("dtype").get<std::string>())));
    const auto off = e.at("offset").get<std::size_t>();
    const auto nb = e.at("nbytes").get<std::size_t>();
    if (nb != t.nbytes() || off + nb > payload_size) throw CheckpointError("tensor extent out of range");
    std::memcpy(t.data_ptr(), payload + off, nb);
    ckpt.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

std::map<std::string, Tensor> named_parameters(const torch::nn::Module& m) {
  std::map<std::string, Tensor> out;
  for (const auto& p : m.named_parameters()) out.emplace(p.key(), p.value());
  return out;
}

std::map<std::string, Tensor> named_buffers(const torch::nn::Module& m) {
  std::map<std::string, Tensor> out;
  for (const auto& p : m.named_buffers()) out.emplace(p.key(), p.value());
  return out;
}

void store_module_state(const torch::nn::Module& m, std::map<std::string, Tensor>& out, const std::string& prefix) {
  for (const auto& p : m.named_parameters()) out[prefix + p.key()] = p.value().detach().clone();
  for (const auto& p : m.named_buffers()) out[prefix + p.key()] = p.value().detach().clone();
}

void load_module_state(torch::nn::Module& m, const std::map<std::string, Tensor>& tensors, const std::string& prefix) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& key, Tensor& dst) {
    auto it = tensors.find(prefix + key);
    if (it == tensors.end()) throw CheckpointError("checkpoint is missing tensor '" + prefix + key + "'");
    if (it->second.sizes() != dst.sizes()) throw CheckpointError("shape mismatch for tensor '" + prefix + key + "'");
    dst.copy_(it->second);
  };
  for (auto& p : m.named_parameters()) assign(p.key(), p.value());
  for (auto& p : m.named_buffers()) assign(p.key(), p.value());
}

}  // namespace mdpg
