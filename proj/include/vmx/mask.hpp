#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vmx/errors.hpp"

namespace vmx {

// Binary H x W mask, row-major, values in {0, 1}. Spacing is mm per pixel.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;
  double spacing_row = 1.0;
  double spacing_col = 1.0;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), values(h * w, 0) {}
  BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> v)
      : height(h), width(w), values(std::move(v)) {
    validate();
  }

  std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  std::uint8_t& at(std::size_t r, std::size_t c) { return values[r * width + c]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : values) n += v;
    return n;
  }
  bool empty_foreground() const { return count() == 0; }

  void validate() const {
    if (values.size() != height * width) {
      throw DimensionError("mask: " + std::to_string(values.size()) + " values for " + std::to_string(height) + "x" +
                           std::to_string(width));
    }
    for (auto v : values)
      if (v > 1) throw ParameterError("mask: non-binary value " + std::to_string(v));
    if (!(spacing_row > 0) || !(spacing_col > 0)) throw ParameterError("mask: spacing must be positive");
  }

  friend bool operator==(const BinaryMask& a, const BinaryMask& b) {
    return a.height == b.height && a.width == b.width && a.values == b.values;
  }
};

inline void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError(std::string(op) + ": mask shapes " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " and " + std::to_string(b.height) + "x" +
                         std::to_string(b.width) + " differ");
  }
}

}  // namespace vmx
