#include "partcraft/archive.hpp"

#include "partcraft/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace partcraft {

namespace {

constexpr char kMagic[8] = {'P', 'C', 'A', 'R', 'C', 'H', '0', '1'};

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

}  // namespace

const Matrix& Archive::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw InputError("archive lacks tensor '" + name + "'");
  return it->second;
}

std::vector<std::uint8_t> encode_archive(const Archive& archive) {
  nlohmann::json header;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : archive.tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(sizeof(kMagic) + sizeof(std::uint64_t) + text.size() + offset);
  std::uint8_t* p = out.data();
  std::memcpy(p, kMagic, sizeof(kMagic));
  p += sizeof(kMagic);
  const std::uint64_t len = text.size();
  std::memcpy(p, &len, sizeof(len));
  p += sizeof(len);
  std::memcpy(p, text.data(), text.size());
  p += text.size();
  for (const auto& [name, m] : archive.tensors) {
    std::memcpy(p, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    p += static_cast<std::size_t>(m.size()) * sizeof(double);
  }
  return out;
}

Archive decode_archive(const std::vector<std::uint8_t>& bytes) {
  constexpr std::size_t kPrefix = sizeof(kMagic) + sizeof(std::uint64_t);
  if (bytes.size() < kPrefix || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw InputError("not a partcraft archive");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), sizeof(len));
  if (kPrefix + len > bytes.size()) throw InputError("truncated archive header");
  Archive out;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPrefix, bytes.begin() + static_cast<std::ptrdiff_t>(kPrefix + len));
    out.meta = header.at("meta");
    const std::size_t data_start = kPrefix + len;
    for (const auto& t : header.at("tensors")) {
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      const std::size_t nbytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
      if (data_start + offset + nbytes > bytes.size()) throw InputError("truncated archive payload");
      Matrix m(rows, cols);
      std::memcpy(m.data(), bytes.data() + data_start + offset, nbytes);
      out.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed archive header: ") + e.what());
  }
  return out;
}

void write_archive(const Archive& archive, const std::filesystem::path& path) {
  auto bytes = encode_archive(archive);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

}  // namespace partcraft
