#include "cdtta/batch_norm.hpp"

#include <atomic>
#include <cmath>

#include "cdtta/ops.hpp"

namespace cdtta {

namespace {

std::uint64_t fresh_instance() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

// y = gamma * (x - mean) * inv_std + beta, per channel. Shared by every inference path so
// that identical statistics give bit-identical outputs.
template <typename T>
void normalize_affine(const BasicTensor<T>& input, std::span<const double> mean, std::span<const double> var,
                      double epsilon, const AffineParams<T>& affine, BasicTensor<T>* normalized,
                      std::vector<T>& inv_std, BasicTensor<T>& output) {
  const Shape s = input.shape();
  inv_std.resize(s.c);
  output = BasicTensor<T>(s);
  if (normalized) *normalized = BasicTensor<T>(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    const T m = static_cast<T>(mean[c]);
    const T inv = static_cast<T>(1.0 / std::sqrt(var[c] + epsilon));
    inv_std[c] = inv;
    const T g = affine.gamma[c];
    const T b = affine.beta[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      auto src = input.plane(n, c);
      auto dst = output.plane(n, c);
      if (normalized) {
        auto xh = normalized->plane(n, c);
        for (std::size_t i = 0; i < src.size(); ++i) {
          const T v = (src[i] - m) * inv;
          xh[i] = v;
          dst[i] = g * v + b;
        }
      } else {
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = g * ((src[i] - m) * inv) + b;
      }
    }
  }
}

void check_channels(std::size_t got, std::size_t want, const char* who) {
  require(got == want, ErrorKind::invalid_shape,
          std::string(who) + ": input has " + std::to_string(got) + " channels, bank has " + std::to_string(want));
}

}  // namespace

template <typename T>
BnBranchBank<T>::BnBranchBank() : instance_(fresh_instance()) {}

template <typename T>
BnBranchBank<T>::BnBranchBank(const BnBranchBank& other)
    : source_(other.source_),
      branches_(other.branches_),
      alpha_(other.alpha_),
      epsilon_(other.epsilon_),
      instance_(fresh_instance()) {}

template <typename T>
BnBranchBank<T>& BnBranchBank<T>::operator=(const BnBranchBank& other) {
  if (this != &other) {
    source_ = other.source_;
    branches_ = other.branches_;
    alpha_ = other.alpha_;
    epsilon_ = other.epsilon_;
    instance_ = fresh_instance();
    serial_ = 0;
  }
  return *this;
}

template <typename T>
BnBranchBank<T> BnBranchBank<T>::init_branches(std::span<const T> gamma, std::span<const T> beta,
                                               const ChannelStats& running, std::size_t branches, double alpha,
                                               double epsilon) {
  require(branches >= 1, ErrorKind::invalid_config, "init_branches: K must be >= 1");
  require(gamma.size() == beta.size() && gamma.size() == running.means.size() &&
              running.vars.size() == running.means.size(),
          ErrorKind::invalid_config, "init_branches: affine and running-stat lengths differ");
  std::vector<AffineParams<T>> copies(
      branches, AffineParams<T>{std::vector<T>(gamma.begin(), gamma.end()), std::vector<T>(beta.begin(), beta.end())});
  return from_parts(running, std::move(copies), alpha, epsilon);
}

template <typename T>
BnBranchBank<T> BnBranchBank<T>::from_parts(ChannelStats source, std::vector<AffineParams<T>> branches, double alpha,
                                            double epsilon) {
  require(!branches.empty(), ErrorKind::invalid_config, "BnBranchBank: K must be >= 1");
  require(epsilon > 0, ErrorKind::invalid_config, "BnBranchBank: epsilon must be positive");
  require(source.vars.size() == source.means.size(), ErrorKind::invalid_config,
          "BnBranchBank: source mean/var lengths differ");
  for (double v : source.vars)
    require(v >= 0 && std::isfinite(v), ErrorKind::invalid_config, "BnBranchBank: negative source variance");
  for (const auto& b : branches)
    require(b.gamma.size() == source.means.size() && b.beta.size() == source.means.size(),
            ErrorKind::invalid_config, "BnBranchBank: branch vector length differs from channel count");
  BnBranchBank bank;
  bank.source_ = std::move(source);
  bank.branches_ = std::move(branches);
  bank.epsilon_ = epsilon;
  bank.set_alpha(alpha);
  return bank;
}

template <typename T>
void BnBranchBank<T>::set_alpha(double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::invalid_config, "BnBranchBank: alpha must lie in [0, 1]");
  alpha_ = alpha;
}

template <typename T>
const AffineParams<T>& BnBranchBank<T>::branch(std::size_t k) const {
  require(k < branches_.size(), ErrorKind::invalid_branch,
          "branch " + std::to_string(k) + " out of range (K = " + std::to_string(branches_.size()) + ")");
  return branches_[k];
}

template <typename T>
AffineParams<T>& BnBranchBank<T>::branch_params(std::size_t k) {
  require(k < branches_.size(), ErrorKind::invalid_branch,
          "branch " + std::to_string(k) + " out of range (K = " + std::to_string(branches_.size()) + ")");
  return branches_[k];
}

template <typename T>
BnForward<T> bn_forward(const BasicTensor<T>& input, const BnBranchBank<T>& bank, std::size_t branch) {
  const auto& affine = bank.branch(branch);
  check_channels(input.shape().c, bank.channels(), "bn_forward");
  BnForward<T> out;
  out.target = std::move(channel_statistics(input, StatsScope::per_batch).front());
  const std::size_t c = bank.channels();
  const double a = bank.alpha();
  std::vector<double> mean(c), var(c);
  for (std::size_t i = 0; i < c; ++i) {
    mean[i] = a * bank.source().means[i] + (1.0 - a) * out.target.means[i];
    var[i] = a * bank.source().vars[i] + (1.0 - a) * out.target.vars[i];
  }
  normalize_affine(input, mean, var, bank.epsilon(), affine, &out.context.normalized, out.context.inv_std, out.output);
  out.context.instance = bank.instance();
  out.context.serial = bank.next_serial();
  out.context.branch = branch;
  out.context.gamma = affine.gamma;
  return out;
}

template <typename T>
BnGrads<T> bn_backward(const BasicTensor<T>& upstream, const BnContext<T>& ctx, const BnBranchBank<T>& bank,
                       bool want_input) {
  require(ctx.serial != 0 && ctx.instance == bank.instance() && ctx.serial == bank.last_serial(),
          ErrorKind::stale_context, "bn_backward: context does not belong to the latest forward pass");
  require(upstream.shape() == ctx.normalized.shape(), ErrorKind::stale_context,
          "bn_backward: upstream shape differs from the forward context");
  const Shape s = upstream.shape();
  BnGrads<T> g;
  g.gamma.assign(s.c, T{0});
  g.beta.assign(s.c, T{0});
  if (want_input) g.input = BasicTensor<T>(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    double sg = 0, sb = 0;
    const T scale = ctx.gamma[c] * ctx.inv_std[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      auto up = upstream.plane(n, c);
      auto xh = ctx.normalized.plane(n, c);
      for (std::size_t i = 0; i < up.size(); ++i) {
        sb += static_cast<double>(up[i]);
        sg += static_cast<double>(up[i]) * static_cast<double>(xh[i]);
      }
      if (want_input) {
        auto dst = g.input.plane(n, c);
        for (std::size_t i = 0; i < up.size(); ++i) dst[i] = up[i] * scale;
      }
    }
    g.gamma[c] = static_cast<T>(sg);
    g.beta[c] = static_cast<T>(sb);
  }
  return g;
}

template <typename T>
BasicTensor<T> bn_forward_source(const BasicTensor<T>& input, const BnBranchBank<T>& bank, std::size_t branch) {
  const auto& affine = bank.branch(branch);
  check_channels(input.shape().c, bank.channels(), "bn_forward_source");
  std::vector<T> inv;
  BasicTensor<T> out;
  normalize_affine<T>(input, bank.source().means, bank.source().vars, bank.epsilon(), affine, nullptr, inv, out);
  return out;
}

template <typename T>
BnTrainForward<T> bn_forward_train(const BasicTensor<T>& input, const AffineParams<T>& affine, double epsilon) {
  require(input.shape().c == affine.gamma.size(), ErrorKind::invalid_shape, "bn_forward_train: channel mismatch");
  BnTrainForward<T> out;
  out.batch = std::move(channel_statistics(input, StatsScope::per_batch).front());
  normalize_affine<T>(input, out.batch.means, out.batch.vars, epsilon, affine, &out.context.normalized,
                      out.context.inv_std, out.output);
  return out;
}

template <typename T>
BnGrads<T> bn_backward_train(const BasicTensor<T>& upstream, const BnTrainContext<T>& ctx,
                             const AffineParams<T>& affine) {
  require(upstream.shape() == ctx.normalized.shape(), ErrorKind::stale_context,
          "bn_backward_train: upstream shape differs from the forward context");
  const Shape s = upstream.shape();
  const double m = static_cast<double>(s.n * s.plane());
  BnGrads<T> g;
  g.gamma.assign(s.c, T{0});
  g.beta.assign(s.c, T{0});
  g.input = BasicTensor<T>(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_dy = 0, sum_dy_xh = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      auto up = upstream.plane(n, c);
      auto xh = ctx.normalized.plane(n, c);
      for (std::size_t i = 0; i < up.size(); ++i) {
        sum_dy += static_cast<double>(up[i]);
        sum_dy_xh += static_cast<double>(up[i]) * static_cast<double>(xh[i]);
      }
    }
    g.gamma[c] = static_cast<T>(sum_dy_xh);
    g.beta[c] = static_cast<T>(sum_dy);
    const double k = static_cast<double>(affine.gamma[c]) * static_cast<double>(ctx.inv_std[c]) / m;
    for (std::size_t n = 0; n < s.n; ++n) {
      auto up = upstream.plane(n, c);
      auto xh = ctx.normalized.plane(n, c);
      auto dst = g.input.plane(n, c);
      for (std::size_t i = 0; i < up.size(); ++i)
        dst[i] = static_cast<T>(k * (m * static_cast<double>(up[i]) - sum_dy - static_cast<double>(xh[i]) * sum_dy_xh));
    }
  }
  return g;
}

void update_running_stats(ChannelStats& running, const ChannelStats& batch, double momentum) {
  require(running.means.size() == batch.means.size(), ErrorKind::invalid_shape,
          "update_running_stats: channel mismatch");
  for (std::size_t c = 0; c < running.means.size(); ++c) {
    running.means[c] = (1.0 - momentum) * running.means[c] + momentum * batch.means[c];
    running.vars[c] = (1.0 - momentum) * running.vars[c] + momentum * batch.vars[c];
  }
}

#define CDTTA_INSTANTIATE_BN(T)                                                                                   \
  template class BnBranchBank<T>;                                                                                 \
  template BnForward<T> bn_forward(const BasicTensor<T>&, const BnBranchBank<T>&, std::size_t);                   \
  template BnGrads<T> bn_backward(const BasicTensor<T>&, const BnContext<T>&, const BnBranchBank<T>&, bool);     \
  template BasicTensor<T> bn_forward_source(const BasicTensor<T>&, const BnBranchBank<T>&, std::size_t);          \
  template BnTrainForward<T> bn_forward_train(const BasicTensor<T>&, const AffineParams<T>&, double);             \
  template BnGrads<T> bn_backward_train(const BasicTensor<T>&, const BnTrainContext<T>&, const AffineParams<T>&);

CDTTA_INSTANTIATE_BN(float)
CDTTA_INSTANTIATE_BN(double)

}  // namespace cdtta
