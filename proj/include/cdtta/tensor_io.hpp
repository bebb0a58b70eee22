#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "cdtta/tensor.hpp"

namespace cdtta {

// CDT1 block: "CDT1" | u8 precision | u8 rank | rank x u32 dims | raw values, all little-endian.
struct Cdt1Block {
  Precision precision = Precision::single;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;  // widened; float payloads round-trip exactly

  std::size_t element_count() const;
};

template <typename T>
void write_cdt1(std::ostream& os, std::span<const std::uint32_t> dims, std::span<const T> values);

template <typename T>
void write_tensor(std::ostream& os, const BasicTensor<T>& t);

template <typename T>
void write_vector(std::ostream& os, std::span<const T> values);

// Throws ErrorKind::format on bad magic, unknown precision tag or truncation.
Cdt1Block read_cdt1(std::istream& is);

// Rank-4 blocks map directly; rank-3 blocks are read as a single sample.
template <typename T>
BasicTensor<T> block_to_tensor(const Cdt1Block& block);

template <typename T>
std::vector<T> block_to_vector(const Cdt1Block& block);

void write_u32(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32(std::istream& is);

}  // namespace cdtta
