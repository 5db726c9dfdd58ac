#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "muffin/errors.hpp"
#include "muffin/tensor.hpp"

// Flat parameter archive: a JSON manifest (format version, config hash,
// entry table) followed by concatenated little-endian f64 payloads. Entries
// are keyed by dotted parameter paths.

namespace muffin::checkpoint {

inline constexpr char kMagic[4] = {'M', 'U', 'F', 'N'};
inline constexpr int kFormatVersion = 1;

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline void put_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f64_le(std::ostream& os, double d) {
  put_u64_le(os, std::bit_cast<std::uint64_t>(d));
}

inline double get_f64_le(std::istream& is) {
  return std::bit_cast<double>(get_u64_le(is));
}

}  // namespace detail

inline void save(const std::filesystem::path& path, const NamedParams& params,
                 const std::string& config_hash) {
  nlohmann::json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["config_hash"] = config_hash;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    nlohmann::json e;
    e["path"] = name;
    e["shape"] = t.shape();
    e["offset"] = offset;
    e["count"] = t.numel();
    entries.push_back(std::move(e));
    offset += t.numel();
  }
  manifest["entries"] = std::move(entries);
  const std::string mjson = manifest.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot open for write: " +
                           path.string());
  os.write(kMagic, 4);
  detail::put_u64_le(os, mjson.size());
  os.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
  for (const auto& [name, t] : params)
    for (std::size_t i = 0; i < t.numel(); ++i)
      detail::put_f64_le(os, t.at(i));
  if (!os) throw DataError("checkpoint: write failed: " + path.string());
}

struct Loaded {
  int format_version = 0;
  std::string config_hash;
  std::map<std::string, Tensor> tensors;
};

inline Loaded load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("checkpoint: bad magic in " + path.string());
  const std::uint64_t mlen = detail::get_u64_le(is);
  std::string mjson(mlen, '\0');
  is.read(mjson.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw DataError("checkpoint: truncated manifest in " +
                           path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mjson);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: manifest parse error: ") +
                    e.what());
  }

  Loaded out;
  out.format_version = manifest.at("format_version").get<int>();
  if (out.format_version != kFormatVersion)
    throw DataError("checkpoint: unsupported format version " +
                    std::to_string(out.format_version));
  out.config_hash = manifest.at("config_hash").get<std::string>();
  for (const auto& e : manifest.at("entries")) {
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t count = e.at("count").get<std::size_t>();
    if (shape_numel(shape) != count)
      throw DataError("checkpoint: entry '" +
                      e.at("path").get<std::string>() +
                      "' shape/count mismatch");
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) data[i] = detail::get_f64_le(is);
    if (!is) throw DataError("checkpoint: truncated payload in " +
                             path.string());
    out.tensors.emplace(e.at("path").get<std::string>(),
                        Tensor::from_data(std::move(shape), std::move(data)));
  }
  return out;
}

/// Assigns archived values into existing parameter tensors in place,
/// preserving requires_grad flags. Every parameter must be present with a
/// matching shape.
inline void load_into(const std::filesystem::path& path, NamedParams& params,
                      std::string* config_hash_out = nullptr) {
  Loaded loaded = load(path);
  if (config_hash_out) *config_hash_out = loaded.config_hash;
  for (auto& [name, t] : params) {
    auto it = loaded.tensors.find(name);
    if (it == loaded.tensors.end())
      throw DataError("checkpoint: missing parameter '" + name + "' in " +
                      path.string());
    if (it->second.shape() != t.shape())
      throw DataError("checkpoint: parameter '" + name + "' has shape " +
                      shape_str(it->second.shape()) + ", model expects " +
                      shape_str(t.shape()));
    auto& dst = t.mutable_data();
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace muffin::checkpoint
