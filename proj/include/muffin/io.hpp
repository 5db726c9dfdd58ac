#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "muffin/errors.hpp"

namespace muffin::io {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path,
                       std::string_view content) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for write " + path.string());
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) throw DataError("write failed " + path.string());
}

/// Strict JSONL reader: every non-empty line must parse. Lines holding a
/// {"type": "meta", ...} record are skipped unless keep_meta is set.
inline std::vector<nlohmann::json> read_jsonl(
    const std::filesystem::path& path, bool keep_meta = false) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": bad JSON: " + e.what());
    }
    if (!keep_meta && j.is_object() && j.value("type", "") == "meta")
      continue;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace muffin::io
