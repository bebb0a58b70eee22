#include "cdtta/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace cdtta {

namespace {

constexpr std::array<char, 4> kMagic{'C', 'D', 'T', '1'};

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) fail(ErrorKind::format, "CDT1: truncated input");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

std::size_t Cdt1Block::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
std::uint32_t read_u32(std::istream& is) { return get_le<std::uint32_t>(is); }

template <typename T>
void write_cdt1(std::ostream& os, std::span<const std::uint32_t> dims, std::span<const T> values) {
  require(dims.size() <= 255, ErrorKind::format, "CDT1: rank too large");
  os.write(kMagic.data(), kMagic.size());
  put_le(os, static_cast<std::uint8_t>(precision_of<T>::value));
  put_le(os, static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) put_le(os, d);
  if constexpr (std::is_same_v<T, float>) {
    for (float v : values) put_le(os, std::bit_cast<std::uint32_t>(v));
  } else {
    for (double v : values) put_le(os, std::bit_cast<std::uint64_t>(v));
  }
}

template <typename T>
void write_tensor(std::ostream& os, const BasicTensor<T>& t) {
  const Shape& s = t.shape();
  const std::array<std::uint32_t, 4> dims{static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                                          static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
  write_cdt1<T>(os, dims, t.data());
}

template <typename T>
void write_vector(std::ostream& os, std::span<const T> values) {
  const std::array<std::uint32_t, 1> dims{static_cast<std::uint32_t>(values.size())};
  write_cdt1<T>(os, dims, values);
}

Cdt1Block read_cdt1(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (is.gcount() != 4) fail(ErrorKind::format, "CDT1: truncated input");
  if (magic != kMagic) fail(ErrorKind::format, "CDT1: bad magic");
  Cdt1Block block;
  const auto tag = get_le<std::uint8_t>(is);
  if (tag > 1) fail(ErrorKind::format, "CDT1: unknown precision tag " + std::to_string(tag));
  block.precision = static_cast<Precision>(tag);
  const auto rank = get_le<std::uint8_t>(is);
  block.dims.resize(rank);
  for (auto& d : block.dims) d = get_le<std::uint32_t>(is);
  const std::size_t count = block.element_count();
  if (count > (std::size_t{1} << 31)) fail(ErrorKind::format, "CDT1: implausible element count");
  block.values.resize(count);
  if (block.precision == Precision::single) {
    for (auto& v : block.values) v = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(is)));
  } else {
    for (auto& v : block.values) v = std::bit_cast<double>(get_le<std::uint64_t>(is));
  }
  return block;
}

template <typename T>
BasicTensor<T> block_to_tensor(const Cdt1Block& block) {
  Shape s;
  if (block.dims.size() == 4) {
    s = {block.dims[0], block.dims[1], block.dims[2], block.dims[3]};
  } else if (block.dims.size() == 3) {
    s = {1, block.dims[0], block.dims[1], block.dims[2]};
  } else {
    fail(ErrorKind::format, "CDT1: expected rank 3 or 4, got " + std::to_string(block.dims.size()));
  }
  return BasicTensor<T>(s, std::vector<T>(block.values.begin(), block.values.end()));
}

template <typename T>
std::vector<T> block_to_vector(const Cdt1Block& block) {
  require(block.dims.size() == 1, ErrorKind::format, "CDT1: expected a rank-1 block");
  return std::vector<T>(block.values.begin(), block.values.end());
}

template void write_cdt1<float>(std::ostream&, std::span<const std::uint32_t>, std::span<const float>);
template void write_cdt1<double>(std::ostream&, std::span<const std::uint32_t>, std::span<const double>);
template void write_tensor(std::ostream&, const BasicTensor<float>&);
template void write_tensor(std::ostream&, const BasicTensor<double>&);
template void write_vector<float>(std::ostream&, std::span<const float>);
template void write_vector<double>(std::ostream&, std::span<const double>);
template BasicTensor<float> block_to_tensor(const Cdt1Block&);
template BasicTensor<double> block_to_tensor(const Cdt1Block&);
template std::vector<float> block_to_vector(const Cdt1Block&);
template std::vector<double> block_to_vector(const Cdt1Block&);

}  // namespace cdtta
