#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "infobfr/nn.hpp"

namespace infobfr {

inline constexpr uint32_t kCheckpointFormatVersion = 1;

/// On-disk container: magic, format version, a JSON metadata record and a list
/// of named float32 arrays. Sections are expressed as name prefixes
/// ("base/", "lora/", ...) so one file can hold several weight sets.
///
///   "IBFRCKPT" | u32 version | u64 meta_len | meta JSON
///   | u32 count | { u32 name_len | name | u32 ndim | i64 dims[ndim] | f32 data[] }*
///
/// All integers and floats are little-endian.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, WeightSet> sections;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  const WeightSet& section(const std::string& name) const;
};

/// SHA-256 hex digest of a file's bytes.
std::string file_sha256(const std::filesystem::path& path);
std::string sha256_hex(const void* data, std::size_t size);

}  // namespace infobfr
