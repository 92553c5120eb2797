#pragma once

#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vmx/binary_io.hpp"
#include "vmx/data.hpp"
#include "vmx/errors.hpp"
#include "vmx/mask.hpp"

namespace vmx {

inline constexpr char kDatasetMagic[4] = {'V', 'M', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<unsigned char> dataset_encode(const std::vector<ModalityPair>& pairs) {
  io::Writer w;
  w.put_bytes(kDatasetMagic, 4);
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pairs.size()));
  for (const auto& p : pairs) {
    const std::size_t h = p.height(), wd = p.width();
    if (p.ct.shape() != Shape{1, h, wd} || p.pet.shape() != Shape{1, h, wd}) {
      throw DimensionError("dataset_write: sample " + p.id + " has mismatched ct/pet/mask shapes");
    }
    w.put_string16(p.id);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(h));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(wd));
    for (double v : p.ct.data()) w.put<float>(static_cast<float>(v));
    for (double v : p.pet.data()) w.put<float>(static_cast<float>(v));
    w.put_bytes(p.mask.values.data(), p.mask.values.size());
  }
  return std::move(w.bytes());
}

inline std::vector<ModalityPair> dataset_decode(const std::vector<unsigned char>& bytes) {
  io::Reader r(bytes);
  char magic[4];
  r.get_bytes(magic, 4, "dataset magic");
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw FormatError("dataset: bad magic, expected VMDS");
  const auto version = r.get<std::uint32_t>("dataset version");
  if (version != kDatasetVersion) throw FormatError("dataset: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("pair count");
  std::vector<ModalityPair> out;
  out.reserve(std::min<std::size_t>(count, 1 << 16));
  for (std::uint32_t i = 0; i < count; ++i) {
    ModalityPair p;
    p.id = r.get_string16("sample id");
    const std::size_t dims_at = r.offset();
    const auto h = r.get<std::uint32_t>("height");
    const auto w = r.get<std::uint32_t>("width");
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    // Reject sizes that cannot fit before allocating for them.
    if (hw > r.remaining() / 9) {
      throw IoError("dataset: sample " + p.id + " declares " + std::to_string(h) + "x" + std::to_string(w) +
                        " but only " + std::to_string(r.remaining()) + " bytes remain",
                    dims_at);
    }
    std::vector<float> buf(hw);
    auto plane = [&](const char* what) {
      r.get_bytes(buf.data(), hw * sizeof(float), what);
      return Tensor(Shape{1, h, w}, std::vector<double>(buf.begin(), buf.end()));
    };
    p.ct = plane("ct plane");
    p.pet = plane("pet plane");
    const std::size_t mask_at = r.offset();
    std::vector<std::uint8_t> m(hw);
    r.get_bytes(m.data(), hw, "mask plane");
    for (std::size_t k = 0; k < hw; ++k) {
      if (m[k] > 1) throw FormatError("dataset: non-binary mask value at byte offset " + std::to_string(mask_at + k));
    }
    p.mask = BinaryMask(h, w, std::move(m));
    out.push_back(std::move(p));
  }
  if (r.remaining() != 0) throw FormatError("dataset: " + std::to_string(r.remaining()) + " trailing bytes");
  return out;
}

inline void dataset_write(const std::vector<ModalityPair>& pairs, const std::string& path) {
  io::write_file(path, dataset_encode(pairs));
}

inline std::vector<ModalityPair> dataset_read(const std::string& path) { return dataset_decode(io::read_file(path)); }

// Binary PGM, maxval 255, foreground = 255.
inline void write_pgm(const BinaryMask& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing", 0);
  out << "P5\n" << m.width << ' ' << m.height << "\n255\n";
  for (auto v : m.values) out.put(static_cast<char>(v ? 255 : 0));
  if (!out) throw IoError("short write to " + path);
}

inline BinaryMask read_pgm(const std::string& path) {
  const auto bytes = io::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P5") throw FormatError(path + ": not a binary PGM");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw FormatError(path + ": malformed PGM header");
  }
  if (maxval != 255) throw FormatError(path + ": expected maxval 255");
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + w * h) throw IoError(path + ": truncated PGM raster", pos);
  BinaryMask m(h, w);
  for (std::size_t i = 0; i < w * h; ++i) {
    const auto v = bytes[pos + i];
    if (v != 0 && v != 255) throw FormatError(path + ": mask value " + std::to_string(v) + " is not 0 or 255");
    m.values[i] = v ? 1 : 0;
  }
  return m;
}

}  // namespace vmx
