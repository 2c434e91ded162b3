#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "s4d/backbone.hpp"

// Named-tensor container, magic "S4DC", version 1. Per entry: u16 name
// length, name bytes, u32 rank, u32 dims, f32 payload; all integers and
// floats little-endian. Writes go to a sibling temp file and rename into
// place so a crash never leaves a torn checkpoint.

namespace s4d {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

struct LoadReport {
  std::vector<std::string> loaded;   // copied into the table
  std::vector<std::string> missing;  // in the table but not the file
  std::vector<std::string> extra;    // in the file but not the table
};

namespace detail {

inline void write_bytes(std::ofstream& f, const void* p, size_t n) {
  f.write(reinterpret_cast<const char*>(p), (std::streamsize)n);
}

template <typename T>
void write_pod(std::ofstream& f, T v) {
  write_bytes(f, &v, sizeof(T));
}

inline void read_bytes(std::ifstream& f, void* p, size_t n) {
  f.read(reinterpret_cast<char*>(p), (std::streamsize)n);
  if ((size_t)f.gcount() != n) throw std::runtime_error("checkpoint: truncated file");
}

template <typename T>
T read_pod(std::ifstream& f) {
  T v;
  read_bytes(f, &v, sizeof(T));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ParamTable<float>& t) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + tmp.string() + " for writing");
    detail::write_bytes(f, "S4DC", 4);
    detail::write_pod<uint16_t>(f, 1);
    detail::write_pod<uint32_t>(f, (uint32_t)t.count());
    for (int i = 0; i < t.count(); ++i) {
      const auto& p = t.param(i);
      if (p.name.size() > 0xFFFF) throw std::runtime_error("checkpoint: parameter name too long");
      detail::write_pod<uint16_t>(f, (uint16_t)p.name.size());
      detail::write_bytes(f, p.name.data(), p.name.size());
      detail::write_pod<uint32_t>(f, (uint32_t)p.shape.size());
      for (int dim : p.shape) detail::write_pod<uint32_t>(f, (uint32_t)dim);
      detail::write_bytes(f, p.value.data(), p.value.size() * sizeof(float));
    }
    if (!f) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// Copies file tensors into same-named table slots. With allow_partial the
// two sides may each have names the other lacks (stage transfer); without
// it any mismatch throws. Shape mismatches always throw.
inline LoadReport load_checkpoint(const std::filesystem::path& path, ParamTable<float>& t,
                                  bool allow_partial = false) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  detail::read_bytes(f, magic, 4);
  if (std::memcmp(magic, "S4DC", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const auto version = detail::read_pod<uint16_t>(f);
  if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
  const auto count = detail::read_pod<uint32_t>(f);

  LoadReport report;
  std::unordered_map<std::string, bool> seen;
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<uint16_t>(f);
    std::string name(name_len, '\0');
    detail::read_bytes(f, name.data(), name_len);
    const auto rank = detail::read_pod<uint32_t>(f);
    if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for " + name);
    Shape shape((size_t)rank);
    for (auto& dim : shape) dim = (int)detail::read_pod<uint32_t>(f);
    std::vector<float> data((size_t)numel(shape));
    detail::read_bytes(f, data.data(), data.size() * sizeof(float));

    if (!t.has(name)) {
      if (!allow_partial)
        throw std::runtime_error("checkpoint: unexpected tensor " + name);
      report.extra.push_back(name);
      continue;
    }
    auto& p = t.at(name);
    if (p.shape != shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": table " +
                               shape_str(p.shape) + " vs file " + shape_str(shape));
    p.value = std::move(data);
    seen[name] = true;
    report.loaded.push_back(name);
  }
  for (int i = 0; i < t.count(); ++i)
    if (!seen.count(t.param(i).name)) report.missing.push_back(t.param(i).name);
  if (!allow_partial && !report.missing.empty())
    throw std::runtime_error("checkpoint: missing tensor " + report.missing.front());
  return report;
}

}  // namespace s4d
