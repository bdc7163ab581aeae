#pragma once

// Versioned binary checkpoint container.
//
//   magic     8 bytes  "SPICKPT1"
//   version   u32      1
//   config    u64 length + UTF-8 JSON (experiment config echo)
//   history   u64 length + UTF-8 JSON (per-epoch records)
//   epoch     i64
//   arrays    u64 count, then per array: u32 name length, name,
//             u64 element count, IEEE-754 binary64 elements
//   checksum  u64 FNV-1a over every preceding byte
//
// All integers and doubles are little-endian; doubles are stored by bit
// pattern so a load reproduces every parameter exactly.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace spi {

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json config = nlohmann::json::object();
  nlohmann::json history = nlohmann::json::array();
  std::int64_t epoch = 0;
  std::map<std::string, std::vector<double>> arrays;

  std::string serialize() const;
  static Checkpoint deserialize(std::string_view bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  const std::vector<double>& array(const std::string& name) const;
};

}  // namespace spi
