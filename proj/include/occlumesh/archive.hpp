#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "occlumesh/tensor.hpp"

namespace occlumesh::io {

// Versioned container: magic "OCMESHCK", u32 version, u64 header length,
// JSON header, u64 entry count, then per entry u32 name length, name,
// u32 rank, i64 dims, raw f64 payload. All integers and floats little-endian.
inline constexpr std::uint32_t kArchiveVersion = 1;

struct TensorArchive {
  nlohmann::json header = nlohmann::json::object();
  tensor::ParamMap entries;
};

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes);

// Writes through a temporary file and renames, so a failed write leaves no
// partial archive behind.
void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

// 64-bit FNV-1a; stable across platforms, used for config and cache hashes.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t value);

}  // namespace occlumesh::io
