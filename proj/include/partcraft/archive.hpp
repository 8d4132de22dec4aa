#pragma once

#include "partcraft/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace partcraft {

/// Named float64 tensors plus a JSON metadata block.
///
/// Layout: 8-byte magic "PCARCH01", little-endian u64 header length, JSON
/// header {"meta": ..., "tensors": [{"name","rows","cols","offset"}]}, then
/// the concatenated row-major little-endian doubles.
struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Matrix> tensors;

  const Matrix& tensor(const std::string& name) const;
};

std::vector<std::uint8_t> encode_archive(const Archive& archive);
Archive decode_archive(const std::vector<std::uint8_t>& bytes);
void write_archive(const Archive& archive, const std::filesystem::path& path);
Archive read_archive(const std::filesystem::path& path);

}  // namespace partcraft
