#include "cdtta/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "cdtta/parallel.hpp"

namespace cdtta {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRow = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapRow = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t in_c, h, w, out_c, k, oh, ow;
  int stride, padding;
  std::size_t col_rows() const { return in_c * k * k; }
  std::size_t col_cols() const { return oh * ow; }
  bool is_pointwise() const { return k == 1 && stride == 1 && padding == 0; }
};

template <typename T>
ConvGeometry conv_geometry(const Shape& in, const Shape& wshape, int stride, int padding) {
  require(stride > 0, ErrorKind::invalid_shape, "conv2d: stride must be positive");
  require(padding >= 0, ErrorKind::invalid_shape, "conv2d: padding must be non-negative");
  require(wshape.h == wshape.w && wshape.h > 0, ErrorKind::invalid_shape, "conv2d: kernel must be square");
  require(wshape.c == in.c, ErrorKind::invalid_shape,
          "conv2d: kernel expects " + std::to_string(wshape.c) + " input channels, got " + std::to_string(in.c));
  long span_h = static_cast<long>(in.h) + 2L * padding - static_cast<long>(wshape.h);
  long span_w = static_cast<long>(in.w) + 2L * padding - static_cast<long>(wshape.w);
  require(span_h >= 0 && span_w >= 0, ErrorKind::invalid_shape, "conv2d: output spatial dims would be empty");
  ConvGeometry g{};
  g.in_c = in.c;
  g.h = in.h;
  g.w = in.w;
  g.out_c = wshape.n;
  g.k = wshape.h;
  g.oh = static_cast<std::size_t>(span_h / stride + 1);
  g.ow = static_cast<std::size_t>(span_w / stride + 1);
  g.stride = stride;
  g.padding = padding;
  return g;
}

template <typename T>
void im2col(const T* src, const ConvGeometry& g, T* col) {
  const long pad = g.padding;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    const T* plane = src + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * g.col_cols();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          long iy = static_cast<long>(oy) * g.stride - pad + static_cast<long>(ky);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* line = plane + iy * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            long ix = static_cast<long>(ox) * g.stride - pad + static_cast<long>(kx);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T{0} : line[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dst) {
  const long pad = g.padding;
  std::fill(dst, dst + g.in_c * g.h * g.w, T{0});
  for (std::size_t c = 0; c < g.in_c; ++c) {
    T* plane = dst + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * g.col_cols();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          long iy = static_cast<long>(oy) * g.stride - pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* line = plane + iy * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            long ix = static_cast<long>(ox) * g.stride - pad + static_cast<long>(kx);
            if (ix >= 0 && ix < static_cast<long>(g.w)) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights, std::span<const T> bias,
                      int stride, int padding) {
  const auto g = conv_geometry<T>(input.shape(), weights.shape(), stride, padding);
  require(bias.size() == g.out_c, ErrorKind::invalid_shape, "conv2d: bias length does not match output channels");
  const std::size_t n = input.shape().n;
  BasicTensor<T> out(Shape{n, g.out_c, g.oh, g.ow});
  ConstMapRow<T> wmat(weights.data().data(), g.out_c, g.col_rows());
  Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>> b(bias.data(), g.out_c);

  parallel_for(n, [&](std::size_t s) {
    MapRow<T> dst(out.sample(s).data(), g.out_c, g.col_cols());
    if (g.is_pointwise()) {
      ConstMapRow<T> col(input.sample(s).data(), g.col_rows(), g.col_cols());
      dst.noalias() = wmat * col;
    } else {
      RowMat<T> col(g.col_rows(), g.col_cols());
      im2col(input.sample(s).data(), g, col.data());
      dst.noalias() = wmat * col;
    }
    dst.colwise() += b;
  });
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weights, int stride, int padding,
                             const BasicTensor<T>& upstream, ConvGradRequest request) {
  const auto g = conv_geometry<T>(input.shape(), weights.shape(), stride, padding);
  const std::size_t n = input.shape().n;
  require(upstream.shape() == Shape{n, g.out_c, g.oh, g.ow}, ErrorKind::invalid_shape,
          "conv2d_backward: upstream shape " + upstream.shape().str() + " does not match forward output");
  ConvGrads<T> grads;
  ConstMapRow<T> wmat(weights.data().data(), g.out_c, g.col_rows());

  std::vector<RowMat<T>> weight_parts;
  std::vector<Eigen::Vector<T, Eigen::Dynamic>> bias_parts;
  if (request.input) grads.input = BasicTensor<T>(input.shape());
  if (request.params) {
    weight_parts.resize(n);
    bias_parts.resize(n);
  }

  parallel_for(n, [&](std::size_t s) {
    ConstMapRow<T> dout(upstream.sample(s).data(), g.out_c, g.col_cols());
    RowMat<T> col;
    if (request.params || (request.input && !g.is_pointwise())) col.resize(g.col_rows(), g.col_cols());
    if (request.params) {
      if (g.is_pointwise()) {
        ConstMapRow<T> raw(input.sample(s).data(), g.col_rows(), g.col_cols());
        weight_parts[s].noalias() = dout * raw.transpose();
      } else {
        im2col(input.sample(s).data(), g, col.data());
        weight_parts[s].noalias() = dout * col.transpose();
      }
      // Plain loop: Eigen's vectorised sum peels by buffer alignment, which would make the
      // rounding depend on where the allocator placed the upstream tensor.
      bias_parts[s].resize(g.out_c);
      for (std::size_t c = 0; c < g.out_c; ++c) {
        T acc{0};
        for (std::size_t i = 0; i < g.col_cols(); ++i) acc += dout(c, i);
        bias_parts[s][c] = acc;
      }
    }
    if (request.input) {
      if (g.is_pointwise()) {
        MapRow<T> din(grads.input.sample(s).data(), g.col_rows(), g.col_cols());
        din.noalias() = wmat.transpose() * dout;
      } else {
        col.noalias() = wmat.transpose() * dout;
        col2im(col.data(), g, grads.input.sample(s).data());
      }
    }
  });

  if (request.params) {
    // Fixed reduction order over samples keeps results independent of the worker count.
    RowMat<T> wsum = RowMat<T>::Zero(g.out_c, g.col_rows());
    Eigen::Vector<T, Eigen::Dynamic> bsum = Eigen::Vector<T, Eigen::Dynamic>::Zero(g.out_c);
    for (std::size_t s = 0; s < n; ++s) {
      wsum += weight_parts[s];
      bsum += bias_parts[s];
    }
    grads.weights = BasicTensor<T>(weights.shape(), std::vector<T>(wsum.data(), wsum.data() + wsum.size()));
    grads.bias.assign(bsum.data(), bsum.data() + bsum.size());
  }
  return grads;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  auto src = input.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T{0} ? src[i] : T{0};
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& activation, const BasicTensor<T>& upstream) {
  require(activation.shape() == upstream.shape(), ErrorKind::invalid_shape, "relu_backward: shape mismatch");
  BasicTensor<T> out(upstream.shape());
  auto a = activation.data();
  auto u = upstream.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = a[i] > T{0} ? u[i] : T{0};
  return out;
}

template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits) {
  const Shape s = logits.shape();
  require(s.c >= 2, ErrorKind::invalid_shape, "softmax_channels: need at least 2 channels");
  BasicTensor<T> out(s);
  const std::size_t plane = s.plane();
  std::vector<T> buf(s.c);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* src = logits.sample(n).data();
    T* dst = out.sample(n).data();
    for (std::size_t p = 0; p < plane; ++p) {
      T mx = src[p];
      for (std::size_t c = 1; c < s.c; ++c) mx = std::max(mx, src[c * plane + p]);
      T sum{0};
      for (std::size_t c = 0; c < s.c; ++c) {
        buf[c] = std::exp(src[c * plane + p] - mx);
        sum += buf[c];
      }
      for (std::size_t c = 0; c < s.c; ++c) dst[c * plane + p] = buf[c] / sum;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_channels_backward(const BasicTensor<T>& probs, const BasicTensor<T>& upstream) {
  require(probs.shape() == upstream.shape(), ErrorKind::invalid_shape, "softmax_channels_backward: shape mismatch");
  const Shape s = probs.shape();
  BasicTensor<T> out(s);
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* p = probs.sample(n).data();
    const T* g = upstream.sample(n).data();
    T* dst = out.sample(n).data();
    for (std::size_t i = 0; i < plane; ++i) {
      T dot{0};
      for (std::size_t c = 0; c < s.c; ++c) dot += p[c * plane + i] * g[c * plane + i];
      for (std::size_t c = 0; c < s.c; ++c) dst[c * plane + i] = p[c * plane + i] * (g[c * plane + i] - dot);
    }
  }
  return out;
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;  // weight of `hi`
};

std::vector<Tap> bilinear_taps(std::size_t in_len, int factor) {
  std::vector<Tap> taps(in_len * static_cast<std::size_t>(factor));
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in_len - 1) lo = in_len - 1;
    std::size_t hi = std::min(lo + 1, in_len - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename T>
BasicTensor<T> upsample_bilinear(const BasicTensor<T>& input, int factor) {
  require(factor >= 1, ErrorKind::invalid_shape, "upsample_bilinear: factor must be >= 1");
  const Shape s = input.shape();
  if (factor == 1) return input;
  const auto ty = bilinear_taps(s.h, factor);
  const auto tx = bilinear_taps(s.w, factor);
  BasicTensor<T> out(Shape{s.n, s.c, ty.size(), tx.size()});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto src = input.plane(n, c);
      auto dst = out.plane(n, c);
      for (std::size_t oy = 0; oy < ty.size(); ++oy) {
        const T fy = static_cast<T>(ty[oy].frac);
        const T* r0 = src.data() + ty[oy].lo * s.w;
        const T* r1 = src.data() + ty[oy].hi * s.w;
        T* line = dst.data() + oy * tx.size();
        for (std::size_t ox = 0; ox < tx.size(); ++ox) {
          const T fx = static_cast<T>(tx[ox].frac);
          const T top = r0[tx[ox].lo] * (T{1} - fx) + r0[tx[ox].hi] * fx;
          const T bot = r1[tx[ox].lo] * (T{1} - fx) + r1[tx[ox].hi] * fx;
          line[ox] = top * (T{1} - fy) + bot * fy;
        }
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>& upstream, int factor, const Shape& input_shape) {
  require(factor >= 1, ErrorKind::invalid_shape, "upsample_bilinear_backward: factor must be >= 1");
  const std::size_t f = static_cast<std::size_t>(factor);
  require(upstream.shape() == Shape{input_shape.n, input_shape.c, input_shape.h * f, input_shape.w * f},
          ErrorKind::invalid_shape, "upsample_bilinear_backward: upstream shape mismatch");
  if (factor == 1) return upstream;
  const auto ty = bilinear_taps(input_shape.h, factor);
  const auto tx = bilinear_taps(input_shape.w, factor);
  BasicTensor<T> out(input_shape);
  for (std::size_t n = 0; n < input_shape.n; ++n) {
    for (std::size_t c = 0; c < input_shape.c; ++c) {
      auto src = upstream.plane(n, c);
      auto dst = out.plane(n, c);
      for (std::size_t oy = 0; oy < ty.size(); ++oy) {
        const T fy = static_cast<T>(ty[oy].frac);
        T* r0 = dst.data() + ty[oy].lo * input_shape.w;
        T* r1 = dst.data() + ty[oy].hi * input_shape.w;
        const T* line = src.data() + oy * tx.size();
        for (std::size_t ox = 0; ox < tx.size(); ++ox) {
          const T fx = static_cast<T>(tx[ox].frac);
          const T g = line[ox];
          r0[tx[ox].lo] += g * (T{1} - fy) * (T{1} - fx);
          r0[tx[ox].hi] += g * (T{1} - fy) * fx;
          r1[tx[ox].lo] += g * fy * (T{1} - fx);
          r1[tx[ox].hi] += g * fy * fx;
        }
      }
    }
  }
  return out;
}

template <typename T>
std::vector<ChannelStats> channel_statistics(const BasicTensor<T>& input, StatsScope scope) {
  const Shape s = input.shape();
  require(s.plane() >= 1, ErrorKind::invalid_shape, "channel_statistics: empty spatial extent");
  auto moments = [&](std::size_t n_begin, std::size_t n_end, std::size_t c, double& mean, double& var) {
    double sum = 0;
    for (std::size_t n = n_begin; n < n_end; ++n)
      for (T v : input.plane(n, c)) sum += static_cast<double>(v);
    const double count = static_cast<double>((n_end - n_begin) * s.plane());
    mean = sum / count;
    double sq = 0;
    for (std::size_t n = n_begin; n < n_end; ++n)
      for (T v : input.plane(n, c)) {
        const double d = static_cast<double>(v) - mean;
        sq += d * d;
      }
    var = sq / count;
  };

  std::vector<ChannelStats> out;
  if (scope == StatsScope::per_batch) {
    ChannelStats st{std::vector<double>(s.c), std::vector<double>(s.c)};
    for (std::size_t c = 0; c < s.c; ++c) moments(0, s.n, c, st.means[c], st.vars[c]);
    out.push_back(std::move(st));
  } else {
    out.resize(s.n);
    for (std::size_t n = 0; n < s.n; ++n) {
      out[n].means.resize(s.c);
      out[n].vars.resize(s.c);
      for (std::size_t c = 0; c < s.c; ++c) moments(n, n + 1, c, out[n].means[c], out[n].vars[c]);
    }
  }
  return out;
}

#define CDTTA_INSTANTIATE_OPS(T)                                                                                  \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>, int, int);    \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, int, int,                   \
                                        const BasicTensor<T>&, ConvGradRequest);                                  \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                            \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> softmax_channels(const BasicTensor<T>&);                                                \
  template BasicTensor<T> softmax_channels_backward(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> upsample_bilinear(const BasicTensor<T>&, int);                                          \
  template BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>&, int, const Shape&);                   \
  template std::vector<ChannelStats> channel_statistics(const BasicTensor<T>&, StatsScope);

CDTTA_INSTANTIATE_OPS(float)
CDTTA_INSTANTIATE_OPS(double)

}  // namespace cdtta
