#include "cdtta/tensor.hpp"

#include <algorithm>

namespace cdtta {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_shape: return "invalid-shape";
    case ErrorKind::invalid_branch: return "invalid-branch";
    case ErrorKind::stale_context: return "stale-context";
    case ErrorKind::invalid_config: return "invalid-config";
    case ErrorKind::invalid_feature: return "invalid-feature";
    case ErrorKind::domain: return "domain";
    case ErrorKind::format: return "format";
    case ErrorKind::data: return "data";
    case ErrorKind::undefined_metric: return "undefined-metric";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

std::string Shape::str() const {
  return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " + std::to_string(w) +
         ")";
}

template <typename T>
BasicTensor<T> gather_samples(const BasicTensor<T>& src, std::span<const std::size_t> indices) {
  Shape s = src.shape();
  s.n = indices.size();
  BasicTensor<T> out(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < src.shape().n, ErrorKind::invalid_shape, "gather_samples: index out of range");
    auto from = src.sample(indices[i]);
    std::copy(from.begin(), from.end(), out.sample(i).begin());
  }
  return out;
}

template <typename T>
BasicTensor<T> stack_samples(std::span<const BasicTensor<T>> samples) {
  if (samples.empty()) return {};
  Shape s = samples.front().shape();
  std::size_t total = 0;
  for (const auto& t : samples) {
    require(t.shape().c == s.c && t.shape().h == s.h && t.shape().w == s.w, ErrorKind::invalid_shape,
            "stack_samples: inconsistent sample shapes");
    total += t.shape().n;
  }
  s.n = total;
  std::vector<T> data;
  data.reserve(s.size());
  for (const auto& t : samples) data.insert(data.end(), t.data().begin(), t.data().end());
  return BasicTensor<T>(s, std::move(data));
}

template BasicTensor<float> gather_samples(const BasicTensor<float>&, std::span<const std::size_t>);
template BasicTensor<double> gather_samples(const BasicTensor<double>&, std::span<const std::size_t>);
template BasicTensor<float> stack_samples(std::span<const BasicTensor<float>>);
template BasicTensor<double> stack_samples(std::span<const BasicTensor<double>>);

}  // namespace cdtta
