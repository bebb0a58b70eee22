#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cdtta/errors.hpp"

namespace cdtta {

enum class Precision : std::uint8_t { single = 0, dual = 1 };

template <typename T>
struct precision_of;
template <>
struct precision_of<float> {
  static constexpr Precision value = Precision::single;
};
template <>
struct precision_of<double> {
  static constexpr Precision value = Precision::dual;
};

// Dense (n, c, h, w) extent, row-major.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t size() const noexcept { return n * c * h * w; }
  std::size_t plane() const noexcept { return h * w; }
  std::size_t sample_size() const noexcept { return c * h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(shape), data_(shape.size(), fill) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    require(data_.size() == shape_.size(), ErrorKind::invalid_shape,
            "tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_.str());
  }

  static constexpr Precision precision() noexcept { return precision_of<T>::value; }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  std::span<T> sample(std::size_t n) { return {data_.data() + n * shape_.sample_size(), shape_.sample_size()}; }
  std::span<const T> sample(std::size_t n) const {
    return {data_.data() + n * shape_.sample_size(), shape_.sample_size()};
  }
  std::span<T> plane(std::size_t n, std::size_t c) {
    return {data_.data() + (n * shape_.c + c) * shape_.plane(), shape_.plane()};
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const {
    return {data_.data() + (n * shape_.c + c) * shape_.plane(), shape_.plane()};
  }

  bool all_finite() const noexcept {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_{};
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Copies the samples listed in `indices` into a new batch, in that order.
template <typename T>
BasicTensor<T> gather_samples(const BasicTensor<T>& src, std::span<const std::size_t> indices);

// Stacks single-sample tensors of identical (c, h, w) along the batch axis.
template <typename T>
BasicTensor<T> stack_samples(std::span<const BasicTensor<T>> samples);

// Per-channel first and second moments; variance is the population (biased) one.
struct ChannelStats {
  std::vector<double> means;
  std::vector<double> vars;

  std::size_t channels() const noexcept { return means.size(); }
  bool operator==(const ChannelStats&) const = default;
};

}  // namespace cdtta
