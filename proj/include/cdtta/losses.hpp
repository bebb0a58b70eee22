#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "cdtta/network.hpp"
#include "cdtta/tensor.hpp"

namespace cdtta {

enum class LossKind { entropy, max_squares, pseudo_label };

std::string_view to_string(LossKind k) noexcept;
LossKind parse_loss(std::string_view name);  // throws invalid_config

// Per-sample losses and d(loss_n)/d(logits) for each sample, unscaled.
template <typename T>
struct LossResult {
  std::vector<double> per_sample;
  BasicTensor<T> logits_grad;
};

// Mean over pixels of -sum_c p log p (natural log, 0 log 0 = 0).
template <typename T>
LossResult<T> entropy_loss(const BasicTensor<T>& probs);

// Mean over pixels of -1/2 sum_c p^2.
template <typename T>
LossResult<T> max_squares_loss(const BasicTensor<T>& probs);

// Hard pseudo-labels from the argmax; per predicted class only the
// ceil(0.33 * n_class) most confident pixels contribute cross-entropy.
template <typename T>
LossResult<T> pseudo_label_loss(const BasicTensor<T>& probs);

template <typename T>
LossResult<T> unsupervised_loss(LossKind kind, const BasicTensor<T>& probs);

// Number of pixels kept out of `n` for one class: ceil(33 n / 100).
std::size_t pseudo_label_keep(std::size_t n) noexcept;

// Per-pixel mean entropy of each sample (diagnostic, no gradient).
template <typename T>
std::vector<double> mean_entropy(const BasicTensor<T>& probs);

// Per-sample mean of the per-pixel maximum probability.
template <typename T>
std::vector<double> mean_max_probability(const BasicTensor<T>& probs);

struct DenoiseConfig {
  double delta = 1.5;
  std::vector<std::size_t> layer_set{0, 1, 2, 3};
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Per sample: mean over `cfg.layer_set` of cos([means || stds], [src means || src stds]).
// A zero-norm vector gives similarity 0 for that layer. Output is unexponentiated, in [-1, 1].
std::vector<double> denoise_weight(const TapStats& taps, const std::array<ChannelStats, kNumTaps>& source,
                                   const DenoiseConfig& cfg);

struct WeightedObjective {
  double loss = 0;
  std::vector<double> scales;  // w_n^delta after clamping w_n to [0, 1]
};

// loss = mean_n(w_n^delta * loss_n). The batch gradient of sample n is scales[n] / N times its
// own loss gradient.
WeightedObjective weighted_objective(std::span<const double> losses, std::span<const double> weights, double delta);

// grad[n] *= scales[n] / N for every sample n.
template <typename T>
void apply_sample_scales(BasicTensor<T>& grad, std::span<const double> scales);

}  // namespace cdtta
