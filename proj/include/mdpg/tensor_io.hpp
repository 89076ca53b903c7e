#pragma once

// On-disk formats.
//
//   Array container: `<stem>.bin` holds raw little-endian values, `<stem>.json`
//   the sidecar {"dtype": "float32"|"float64", "shape": [...], "byte_order": "little"}.
//
//   Checkpoint container: one file,
//     8 bytes  magic "MDPGCKPT"
//     u32      format version
//     u64      header length N
//     N bytes  JSON header {meta, tensors:[{name, dtype, shape, offset, nbytes}], payload_hash}
//     payload  concatenated tensor bytes (little-endian)
//   The payload hash is FNV-1a 64 over the payload; a mismatch is reported as corruption.

#include "mdpg/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace mdpg {

namespace fs = std::filesystem;

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

/// Hash of tensor contents (dtype, shape, bytes) in iteration order.
std::uint64_t hash_tensors(const std::map<std::string, Tensor>& tensors);

void write_array(const fs::path& stem, const Tensor& t);
Tensor read_array(const fs::path& stem);

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
};

/// Writes to a temporary sibling and renames into place, so concurrent writers never expose partial files.
void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
/// Throws CheckpointError on missing, truncated, or corrupted files.
Checkpoint load_checkpoint(const fs::path& path);

void write_text_atomic(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

std::map<std::string, Tensor> named_parameters(const torch::nn::Module& m);
std::map<std::string, Tensor> named_buffers(const torch::nn::Module& m);
/// Copies matching entries (prefix + name) into module parameters/buffers; every one must be present.
void load_module_state(torch::nn::Module& m, const std::map<std::string, Tensor>& tensors,
                       const std::string& prefix = "");
void store_module_state(const torch::nn::Module& m, std::map<std::string, Tensor>& out,
                        const std::string& prefix = "");

}  // namespace mdpg
