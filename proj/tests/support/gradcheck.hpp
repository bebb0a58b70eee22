#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cdtta/losses.hpp"
#include "cdtta/network.hpp"
#include "cdtta/ops.hpp"

namespace cdtta::testing {

inline TensorD random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  TensorD t(s);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& n, double floor = 1e-7) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - n[i]) / std::max({std::abs(a[i]), std::abs(n[i]), floor}));
  return worst;
}

// ||a - n|| / max(||a||, ||n||) over a whole parameter vector. Element-wise ratios are
// dominated by rounding noise on entries that are themselves near zero.
inline double vector_rel_err(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double scale = std::sqrt(std::max(na, nn));
  return scale == 0 ? 0.0 : std::sqrt(diff) / scale;
}

// Central differences of f with respect to every entry of `x`.
inline std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& f,
                                            double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// Copy of `net` whose normalisation statistics are pinned to the mixed statistics that
// `batch` produces on `branch`: source stats := mix, alpha := 1. At the base point the
// copy computes the same function, and perturbing any parameter no longer moves the
// statistics, which is what the affine gradient assumes.
inline SegNet<double> freeze_statistics(const SegNet<double>& net, const TensorD& batch, std::size_t branch) {
  const auto fw = net.forward_with_taps(batch, branch);
  std::array<ConvLayer<double>, kNumTaps + 1> convs;
  for (std::size_t i = 0; i <= kNumTaps; ++i) convs[i] = net.conv(i);
  std::array<BnBranchBank<double>, kNumTaps> banks;
  for (std::size_t l = 0; l < kNumTaps; ++l) {
    const auto& src = net.bn(l).source();
    const auto tgt = channel_statistics(fw.trace.pre_bn[l], StatsScope::per_batch).front();
    const double a = net.bn(l).alpha();
    ChannelStats mixed = src;
    for (std::size_t c = 0; c < src.channels(); ++c) {
      mixed.means[c] = a * src.means[c] + (1 - a) * tgt.means[c];
      mixed.vars[c] = a * src.vars[c] + (1 - a) * tgt.vars[c];
    }
    banks[l] = BnBranchBank<double>::from_parts(mixed, net.bn(l).branches(), 1.0, net.bn(l).epsilon());
  }
  return SegNet<double>(std::move(convs), std::move(banks));
}

// Random network with non-trivial affine branches and source statistics.
inline SegNet<double> random_net(std::uint64_t seed, std::size_t branches, double alpha, std::size_t classes = 5) {
  auto base = SegNet<double>::create(NetConfig{classes, 1, alpha}, seed);
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  std::uniform_real_distribution<double> gam(0.5, 1.5), bet(-0.2, 0.2), mu(-0.3, 0.3), var(0.5, 2.0);
  std::array<ConvLayer<double>, kNumTaps + 1> convs;
  for (std::size_t i = 0; i <= kNumTaps; ++i) convs[i] = base.conv(i);
  std::array<BnBranchBank<double>, kNumTaps> banks;
  for (std::size_t l = 0; l < kNumTaps; ++l) {
    const std::size_t c = base.bn(l).channels();
    ChannelStats src{std::vector<double>(c), std::vector<double>(c)};
    for (std::size_t i = 0; i < c; ++i) {
      src.means[i] = mu(rng);
      src.vars[i] = var(rng);
    }
    std::vector<AffineParams<double>> br(branches);
    for (auto& b : br) {
      b.gamma.resize(c);
      b.beta.resize(c);
      for (std::size_t i = 0; i < c; ++i) {
        b.gamma[i] = gam(rng);
        b.beta[i] = bet(rng);
      }
    }
    banks[l] = BnBranchBank<double>::from_parts(src, br, alpha, kBnEpsilon);
  }
  return SegNet<double>(std::move(convs), std::move(banks));
}

struct AffineCheck {
  double max_rel_err = 0;
  std::size_t parameters = 0;
};

// Analytic affine gradient of sum_n loss_n against central differences on the
// statistics-frozen copy, over every gamma and beta entry of `branch`. The error is
// the worst vector_rel_err across the eight gamma/beta vectors.
inline AffineCheck check_affine_gradients(const SegNet<double>& net, const TensorD& batch, std::size_t branch,
                                          LossKind kind) {
  const auto fw = net.forward_with_taps(batch, branch);
  const auto loss = unsupervised_loss(kind, fw.probs);
  const auto grads = net.backward_affine_only(loss.logits_grad, fw.trace);

  SegNet<double> frozen = freeze_statistics(net, batch, branch);
  const auto total = [&] {
    const auto l = unsupervised_loss(kind, frozen.forward_with_taps(batch, branch).probs).per_sample;
    double s = 0;
    for (double v : l) s += v;
    return s;
  };
  AffineCheck out;
  for (std::size_t l = 0; l < kNumTaps; ++l) {
    auto& p = frozen.bn_params(l).branch_params(branch);
    const auto num_g = numeric_gradient(p.gamma, total);
    const auto num_b = numeric_gradient(p.beta, total);
    out.max_rel_err =
        std::max({out.max_rel_err, vector_rel_err(grads.gamma[l], num_g), vector_rel_err(grads.beta[l], num_b)});
    out.parameters += num_g.size() + num_b.size();
  }
  return out;
}

}  // namespace cdtta::testing
