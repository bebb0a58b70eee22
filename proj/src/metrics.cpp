#include "cdtta/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>

#include "cdtta/errors.hpp"

namespace cdtta {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  require(classes >= 1, ErrorKind::invalid_config, "ConfusionMatrix: need at least one class");
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

void ConfusionMatrix::update(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  require(pred.size() == gt.size(), ErrorKind::invalid_shape,
          "ConfusionMatrix::update: " + std::to_string(pred.size()) + " predictions vs " +
              std::to_string(gt.size()) + " labels");
  // Validate first so a rejected update leaves the counts untouched.
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] >= classes_ || gt[i] >= classes_)
      fail(ErrorKind::data, "ConfusionMatrix::update: class index " + std::to_string(std::max(pred[i], gt[i])) +
                                " out of range for C = " + std::to_string(classes_));
  for (std::size_t i = 0; i < pred.size(); ++i) ++counts_[gt[i] * classes_ + pred[i]];
}

void ConfusionMatrix::update(const LabelMap& pred, const LabelMap& gt) {
  require(pred.n == gt.n && pred.h == gt.h && pred.w == gt.w, ErrorKind::invalid_shape,
          "ConfusionMatrix::update: label map shapes differ");
  update(std::span<const std::uint8_t>(pred.data), std::span<const std::uint8_t>(gt.data));
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  require(other.classes_ == classes_, ErrorKind::invalid_shape, "ConfusionMatrix::merge: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

IouResult miou(const ConfusionMatrix& cm) {
  const std::size_t c = cm.classes();
  IouResult r;
  r.per_class.assign(c, std::numeric_limits<double>::quiet_NaN());
  double sum = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const std::uint64_t tp = cm.at(k, k);
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) continue;
    r.per_class[k] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += r.per_class[k];
    ++r.counted;
  }
  require(r.counted > 0, ErrorKind::undefined_metric, "miou: every class has an empty union");
  r.miou = sum / static_cast<double>(r.counted);
  return r;
}

double pixel_accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  require(total > 0, ErrorKind::undefined_metric, "pixel_accuracy: empty confusion matrix");
  std::uint64_t diag = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) diag += cm.at(k, k);
  return static_cast<double>(diag) / static_cast<double>(total);
}

double pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorKind::invalid_shape, "pearson: length mismatch");
  require(x.size() >= 2, ErrorKind::undefined_metric, "pearson: need at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  require(sxx > 0 && syy > 0, ErrorKind::undefined_metric, "pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double label_agreement(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  require(a.size() == b.size(), ErrorKind::invalid_shape, "label_agreement: length mismatch");
  if (a.empty()) return 1.0;
  const std::size_t m = std::max(*std::max_element(a.begin(), a.end()), *std::max_element(b.begin(), b.end())) + 1;
  require(m <= 9, ErrorKind::invalid_config, "label_agreement: too many labels for exhaustive matching");
  std::vector<std::uint64_t> joint(m * m, 0);
  for (std::size_t i = 0; i < a.size(); ++i) ++joint[a[i] * m + b[i]];
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  std::uint64_t best = 0;
  do {
    std::uint64_t hit = 0;
    for (std::size_t k = 0; k < m; ++k) hit += joint[k * m + perm[k]];
    best = std::max(best, hit);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(best) / static_cast<double>(a.size());
}

double purity(std::span<const std::size_t> clusters, std::span<const std::size_t> truth) {
  require(clusters.size() == truth.size(), ErrorKind::invalid_shape, "purity: length mismatch");
  if (clusters.empty()) return 1.0;
  std::map<std::size_t, std::map<std::size_t, std::uint64_t>> tally;
  for (std::size_t i = 0; i < clusters.size(); ++i) ++tally[clusters[i]][truth[i]];
  std::uint64_t hit = 0;
  for (const auto& [k, row] : tally) {
    std::uint64_t top = 0;
    for (const auto& [t, count] : row) top = std::max(top, count);
    hit += top;
  }
  return static_cast<double>(hit) / static_cast<double>(clusters.size());
}

}  // namespace cdtta
