#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <zlib.h>

#include "dapsam/errors.hpp"

namespace dapsam::zip {

// Minimal "stored" (method 0) zip archives: no compression, no zip64, fixed
// timestamps so identical contents give identical bytes.

using Bytes = std::vector<char>;

namespace detail {

inline constexpr std::uint16_t kDosTime = 0;
inline constexpr std::uint16_t kDosDate = (1 << 5) | 1;  // 1980-01-01

inline void put16(Bytes& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xFF));
  b.push_back(static_cast<char>(v >> 8));
}

inline void put32(Bytes& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get(const Bytes& b, std::size_t off, int n) {
  if (off + n > b.size()) throw CorruptCheckpoint("zip: truncated archive");
  std::uint32_t v = 0;
  for (int i = 0; i < n; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + i])) << (8 * i);
  }
  return v;
}

inline std::uint32_t crc(const Bytes& data) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
}

}  // namespace detail

class Writer {
 public:
  void add(const std::string& name, Bytes data) {
    if (data.size() > 0xFFFFFFF0u) throw InvalidInput("zip: entry too large: " + name);
    entries_.push_back({name, std::move(data)});
  }

  Bytes finish() const {
    Bytes out;
    Bytes central;
    for (const auto& e : entries_) {
      const std::uint32_t offset = static_cast<std::uint32_t>(out.size());
      const std::uint32_t crc = detail::crc(e.data);
      const auto size = static_cast<std::uint32_t>(e.data.size());
      const auto name_len = static_cast<std::uint16_t>(e.name.size());

      detail::put32(out, 0x04034b50);
      detail::put16(out, 20);
      detail::put16(out, 0);
      detail::put16(out, 0);
      detail::put16(out, detail::kDosTime);
      detail::put16(out, detail::kDosDate);
      detail::put32(out, crc);
      detail::put32(out, size);
      detail::put32(out, size);
      detail::put16(out, name_len);
      detail::put16(out, 0);
      out.insert(out.end(), e.name.begin(), e.name.end());
      out.insert(out.end(), e.data.begin(), e.data.end());

      detail::put32(central, 0x02014b50);
      detail::put16(central, 20);
      detail::put16(central, 20);
      detail::put16(central, 0);
      detail::put16(central, 0);
      detail::put16(central, detail::kDosTime);
      detail::put16(central, detail::kDosDate);
      detail::put32(central, crc);
      detail::put32(central, size);
      detail::put32(central, size);
      detail::put16(central, name_len);
      detail::put16(central, 0);
      detail::put16(central, 0);
      detail::put16(central, 0);
      detail::put16(central, 0);
      detail::put32(central, 0);
      detail::put32(central, offset);
      central.insert(central.end(), e.name.begin(), e.name.end());
    }
    const auto cd_offset = static_cast<std::uint32_t>(out.size());
    out.insert(out.end(), central.begin(), central.end());
    detail::put32(out, 0x06054b50);
    detail::put16(out, 0);
    detail::put16(out, 0);
    detail::put16(out, static_cast<std::uint16_t>(entries_.size()));
    detail::put16(out, static_cast<std::uint16_t>(entries_.size()));
    detail::put32(out, static_cast<std::uint32_t>(central.size()));
    detail::put32(out, cd_offset);
    detail::put16(out, 0);
    return out;
  }

 private:
  struct Entry {
    std::string name;
    Bytes data;
  };
  std::vector<Entry> entries_;
};

/// Reads every entry of a stored archive, checking signatures and CRCs.
inline std::map<std::string, Bytes> read_archive(const Bytes& b) {
  if (b.size() < 22) throw CorruptCheckpoint("zip: archive too small");
  std::size_t eocd = b.size() - 22;
  while (detail::get(b, eocd, 4) != 0x06054b50) {
    if (eocd == 0 || b.size() - eocd > 22 + 0xFFFF) {
      throw CorruptCheckpoint("zip: end of central directory not found");
    }
    --eocd;
  }
  const std::uint32_t count = detail::get(b, eocd + 10, 2);
  std::size_t p = detail::get(b, eocd + 16, 4);
  std::map<std::string, Bytes> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (detail::get(b, p, 4) != 0x02014b50) throw CorruptCheckpoint("zip: bad central directory");
    const std::uint32_t method = detail::get(b, p + 10, 2);
    const std::uint32_t crc = detail::get(b, p + 16, 4);
    const std::uint32_t size = detail::get(b, p + 20, 4);
    const std::uint32_t name_len = detail::get(b, p + 28, 2);
    const std::uint32_t extra_len = detail::get(b, p + 30, 2);
    const std::uint32_t comment_len = detail::get(b, p + 32, 2);
    const std::uint32_t local = detail::get(b, p + 42, 4);
    if (p + 46 + name_len > b.size()) throw CorruptCheckpoint("zip: truncated central directory");
    std::string name(b.data() + p + 46, name_len);
    if (method != 0) throw CorruptCheckpoint("zip: entry " + name + " is compressed");
    if (detail::get(b, local, 4) != 0x04034b50) throw CorruptCheckpoint("zip: bad local header for " + name);
    const std::size_t data_start =
        local + 30 + detail::get(b, local + 26, 2) + detail::get(b, local + 28, 2);
    if (data_start + size > b.size()) throw CorruptCheckpoint("zip: truncated entry " + name);
    Bytes data(b.begin() + static_cast<std::ptrdiff_t>(data_start),
               b.begin() + static_cast<std::ptrdiff_t>(data_start + size));
    if (detail::crc(data) != crc) throw CorruptCheckpoint("zip: CRC mismatch in " + name);
    out.emplace(std::move(name), std::move(data));
    p += 46 + name_len + extra_len + comment_len;
  }
  return out;
}

inline Bytes read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const Bytes& b) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!out) throw LoadError("write failed: " + path.string());
}

}  // namespace dapsam::zip
