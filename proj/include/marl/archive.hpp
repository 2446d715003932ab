#pragma once

// Versioned container of named fp64 arrays plus a JSON manifest. Used for
// model checkpoints, the stored synthetic templates and rollout dumps.
//
// Byte layout (all integers and floats little-endian):
//
//   0   8 bytes   magic "MARLARCH"
//   8   u32       format version (kArchiveVersion)
//   12  u32       reserved, zero
//   16  u64       manifest length L in bytes
//   24  L bytes   manifest, UTF-8 JSON:
//                   {"format_version": 1,
//                    "meta": {...},
//                    "tensors": [{"name": str, "shape": [u64...],
//                                 "offset": u64}, ...]}
//   ..  zero padding up to the next multiple of 8
//   D   payload; tensor k occupies numel_k * 8 bytes at D + offset_k,
//       IEEE-754 binary64 values in row-major order
//
// Files are written to "<path>.tmp" and renamed over the destination, so an
// interrupted write never leaves a truncated archive at `path`.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "marl/errors.hpp"
#include "marl/tensor.hpp"

namespace marl {

inline constexpr char kArchiveMagic[8] = {'M', 'A', 'R', 'L', 'A', 'R', 'C', 'H'};
inline constexpr std::uint32_t kArchiveVersion = 1;

namespace detail {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <class T>
void write_le(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("archive truncated");
  return to_little(v);
}

}  // namespace detail

class Archive {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<double> data;
  };

  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) throw DimensionError("archive entry '" + name + "' has inconsistent shape");
    if (auto it = index_.find(name); it != index_.end()) {
      entries_[it->second] = {name, std::move(shape), std::move(data)};
      return;
    }
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(shape), std::move(data)});
  }

  void put(const std::string& name, const Tensor& t) { put(name, t.shape(), t.vec()); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Entry& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("archive has no entry named '" + name + "'");
    return entries_[it->second];
  }

  Tensor tensor(const std::string& name) const {
    const auto& e = get(name);
    return Tensor(e.shape, e.data);
  }

  const std::vector<Entry>& entries() const { return entries_; }

  void save(const std::filesystem::path& path) const {
    nlohmann::json manifest;
    manifest["format_version"] = kArchiveVersion;
    manifest["meta"] = meta;
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& e : entries_) {
      manifest["tensors"].push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}});
      offset += e.data.size() * sizeof(double);
    }
    const std::string text = manifest.dump();

    if (path.has_parent_path()) {
      std::error_code ec;
      std::filesystem::create_directories(path.parent_path(), ec);
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
      os.write(kArchiveMagic, sizeof(kArchiveMagic));
      detail::write_le<std::uint32_t>(os, kArchiveVersion);
      detail::write_le<std::uint32_t>(os, 0);
      detail::write_le<std::uint64_t>(os, text.size());
      os.write(text.data(), static_cast<std::streamsize>(text.size()));
      const std::size_t pad = (8 - (24 + text.size()) % 8) % 8;
      for (std::size_t i = 0; i < pad; ++i) os.put('\0');
      for (const auto& e : entries_)
        for (double v : e.data) detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
      os.flush();
      if (!os) throw IoError("failed writing '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move archive into place at '" + path.string() + "': " + ec.message());
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open archive '" + path.string() + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kArchiveMagic, 8) != 0) throw IoError("'" + path.string() + "' is not an archive");
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kArchiveVersion) {
      throw IoError("unsupported archive version " + std::to_string(version) + " in '" + path.string() + "'");
    }
    detail::read_le<std::uint32_t>(is);
    const auto len = detail::read_le<std::uint64_t>(is);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw IoError("archive manifest truncated");
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("archive manifest is not valid JSON: ") + e.what());
    }
    const std::size_t pad = (8 - (24 + len) % 8) % 8;
    is.ignore(static_cast<std::streamsize>(pad));
    Archive a;
    a.meta = manifest.value("meta", nlohmann::json::object());
    std::uint64_t expected = 0;
    for (const auto& t : manifest.at("tensors")) {
      Entry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      if (t.at("offset").get<std::uint64_t>() != expected) throw IoError("archive entry '" + e.name + "' misplaced");
      e.data.resize(shape_numel(e.shape));
      for (auto& v : e.data) v = std::bit_cast<double>(detail::read_le<std::uint64_t>(is));
      expected += e.data.size() * sizeof(double);
      a.put(e.name, std::move(e.shape), std::move(e.data));
    }
    return a;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace marl
