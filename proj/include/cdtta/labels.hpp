#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace cdtta {

// (n, h, w) map of class indices.
struct LabelMap {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> data;

  std::size_t plane() const noexcept { return h * w; }
  std::span<const std::uint8_t> sample(std::size_t i) const { return {data.data() + i * plane(), plane()}; }
  std::span<std::uint8_t> sample(std::size_t i) { return {data.data() + i * plane(), plane()}; }
  bool operator==(const LabelMap&) const = default;
};

}  // namespace cdtta
