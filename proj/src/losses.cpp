#include "cdtta/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cdtta/ops.hpp"

namespace cdtta {

std::string_view to_string(LossKind k) noexcept {
  switch (k) {
    case LossKind::entropy: return "entropy";
    case LossKind::max_squares: return "max_squares";
    case LossKind::pseudo_label: return "pseudo_label";
  }
  return "unknown";
}

LossKind parse_loss(std::string_view name) {
  for (LossKind k : {LossKind::entropy, LossKind::max_squares, LossKind::pseudo_label})
    if (to_string(k) == name) return k;
  fail(ErrorKind::invalid_config,
       "unknown loss '" + std::string(name) + "' (expected entropy, max_squares or pseudo_label)");
}

template <typename T>
LossResult<T> entropy_loss(const BasicTensor<T>& probs) {
  const Shape s = probs.shape();
  const std::size_t plane = s.plane();
  LossResult<T> r{std::vector<double>(s.n, 0.0), {}};
  BasicTensor<T> dprobs(s);
  const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* p = probs.sample(n).data();
    T* g = dprobs.sample(n).data();
    double total = 0;
    for (std::size_t i = 0; i < s.c * plane; ++i) {
      if (p[i] > T{0}) {
        const T lp = std::log(p[i]);
        total -= static_cast<double>(p[i]) * static_cast<double>(lp);
        g[i] = -(lp + T{1}) * inv;
      }
    }
    r.per_sample[n] = total / static_cast<double>(plane);
  }
  r.logits_grad = softmax_channels_backward(probs, dprobs);
  return r;
}

template <typename T>
LossResult<T> max_squares_loss(const BasicTensor<T>& probs) {
  const Shape s = probs.shape();
  const std::size_t plane = s.plane();
  LossResult<T> r{std::vector<double>(s.n, 0.0), {}};
  BasicTensor<T> dprobs(s);
  const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* p = probs.sample(n).data();
    T* g = dprobs.sample(n).data();
    double total = 0;
    for (std::size_t i = 0; i < s.c * plane; ++i) {
      total -= 0.5 * static_cast<double>(p[i]) * static_cast<double>(p[i]);
      g[i] = -p[i] * inv;
    }
    r.per_sample[n] = total / static_cast<double>(plane);
  }
  r.logits_grad = softmax_channels_backward(probs, dprobs);
  return r;
}

std::size_t pseudo_label_keep(std::size_t n) noexcept { return (33 * n + 99) / 100; }

template <typename T>
LossResult<T> pseudo_label_loss(const BasicTensor<T>& probs) {
  const Shape s = probs.shape();
  const std::size_t plane = s.plane();
  LossResult<T> r{std::vector<double>(s.n, 0.0), BasicTensor<T>(s)};
  std::vector<std::vector<std::size_t>> by_class(s.c);
  std::vector<std::size_t> label(plane);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* p = probs.sample(n).data();
    for (auto& v : by_class) v.clear();
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < s.c; ++c)
        if (p[c * plane + i] > p[best * plane + i]) best = c;
      label[i] = best;
      by_class[best].push_back(i);
    }
    std::vector<std::size_t> kept;
    for (std::size_t c = 0; c < s.c; ++c) {
      auto& px = by_class[c];
      const std::size_t k = pseudo_label_keep(px.size());
      std::stable_sort(px.begin(), px.end(),
                       [&](std::size_t a, std::size_t b) { return p[c * plane + a] > p[c * plane + b]; });
      kept.insert(kept.end(), px.begin(), px.begin() + static_cast<std::ptrdiff_t>(k));
    }
    if (kept.empty()) continue;
    const double inv = 1.0 / static_cast<double>(kept.size());
    double total = 0;
    T* g = r.logits_grad.sample(n).data();
    for (std::size_t i : kept) {
      const std::size_t y = label[i];
      total -= std::log(static_cast<double>(p[y * plane + i]));
      for (std::size_t c = 0; c < s.c; ++c) {
        const double target = c == y ? 1.0 : 0.0;
        g[c * plane + i] = static_cast<T>((static_cast<double>(p[c * plane + i]) - target) * inv);
      }
    }
    r.per_sample[n] = total * inv;
  }
  return r;
}

template <typename T>
LossResult<T> unsupervised_loss(LossKind kind, const BasicTensor<T>& probs) {
  switch (kind) {
    case LossKind::entropy: return entropy_loss(probs);
    case LossKind::max_squares: return max_squares_loss(probs);
    case LossKind::pseudo_label: return pseudo_label_loss(probs);
  }
  fail(ErrorKind::invalid_config, "unsupervised_loss: unknown loss kind");
}

template <typename T>
std::vector<double> mean_entropy(const BasicTensor<T>& probs) {
  const Shape s = probs.shape();
  std::vector<double> out(s.n, 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    double total = 0;
    for (T v : probs.sample(n))
      if (v > T{0}) total -= static_cast<double>(v) * std::log(static_cast<double>(v));
    out[n] = total / static_cast<double>(s.plane());
  }
  return out;
}

template <typename T>
std::vector<double> mean_max_probability(const BasicTensor<T>& probs) {
  const Shape s = probs.shape();
  const std::size_t plane = s.plane();
  std::vector<double> out(s.n, 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* p = probs.sample(n).data();
    double total = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      T best = p[i];
      for (std::size_t c = 1; c < s.c; ++c) best = std::max(best, p[c * plane + i]);
      total += static_cast<double>(best);
    }
    out[n] = total / static_cast<double>(plane);
  }
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::invalid_feature, "cosine_similarity: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

namespace {

std::vector<double> mean_std_vector(const ChannelStats& st) {
  std::vector<double> v(st.means);
  v.reserve(2 * st.means.size());
  for (double var : st.vars) v.push_back(std::sqrt(std::max(var, 0.0)));
  return v;
}

}  // namespace

std::vector<double> denoise_weight(const TapStats& taps, const std::array<ChannelStats, kNumTaps>& source,
                                   const DenoiseConfig& cfg) {
  require(!cfg.layer_set.empty(), ErrorKind::invalid_config, "denoise_weight: empty layer set");
  require(cfg.delta >= 0, ErrorKind::invalid_config, "denoise_weight: delta must be >= 0");
  const std::size_t n = taps[cfg.layer_set.front()].size();
  std::vector<double> w(n, 0.0);
  for (std::size_t layer : cfg.layer_set) {
    require(layer < kNumTaps && taps[layer].size() == n, ErrorKind::invalid_config,
            "denoise_weight: taps do not cover layer t" + std::to_string(layer));
    const auto src = mean_std_vector(source[layer]);
    for (std::size_t s = 0; s < n; ++s) w[s] += cosine_similarity(mean_std_vector(taps[layer][s]), src);
  }
  for (auto& v : w) v /= static_cast<double>(cfg.layer_set.size());
  return w;
}

WeightedObjective weighted_objective(std::span<const double> losses, std::span<const double> weights, double delta) {
  require(losses.size() == weights.size(), ErrorKind::invalid_config, "weighted_objective: length mismatch");
  require(delta >= 0, ErrorKind::invalid_config, "weighted_objective: delta must be >= 0");
  WeightedObjective out;
  out.scales.resize(losses.size());
  double total = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    out.scales[i] = std::pow(std::clamp(weights[i], 0.0, 1.0), delta);
    total += out.scales[i] * losses[i];
  }
  out.loss = losses.empty() ? 0.0 : total / static_cast<double>(losses.size());
  return out;
}

template <typename T>
void apply_sample_scales(BasicTensor<T>& grad, std::span<const double> scales) {
  const std::size_t n = grad.shape().n;
  require(scales.size() == n, ErrorKind::invalid_shape, "apply_sample_scales: one scale per sample required");
  for (std::size_t i = 0; i < n; ++i) {
    const T f = static_cast<T>(scales[i] / static_cast<double>(n));
    for (auto& v : grad.sample(i)) v *= f;
  }
}

#define CDTTA_INSTANTIATE_LOSSES(T)                                                 \
  template LossResult<T> entropy_loss(const BasicTensor<T>&);                       \
  template LossResult<T> max_squares_loss(const BasicTensor<T>&);                   \
  template LossResult<T> pseudo_label_loss(const BasicTensor<T>&);                  \
  template LossResult<T> unsupervised_loss(LossKind, const BasicTensor<T>&);        \
  template std::vector<double> mean_entropy(const BasicTensor<T>&);                 \
  template std::vector<double> mean_max_probability(const BasicTensor<T>&);         \
  template void apply_sample_scales(BasicTensor<T>&, std::span<const double>);

CDTTA_INSTANTIATE_LOSSES(float)
CDTTA_INSTANTIATE_LOSSES(double)

}  // namespace cdtta
