#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cdtta/labels.hpp"

namespace cdtta {

// C x C pixel counts, rows are ground truth and columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_.at(gt * classes_ + pred); }
  std::uint64_t total() const noexcept;

  // Throws ErrorKind::data for a class index >= C, invalid_shape for mismatched lengths.
  void update(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
  void update(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

struct IouResult {
  double miou = 0;
  std::vector<double> per_class;  // NaN for classes with an empty union
  std::size_t counted = 0;        // classes included in the mean
};

// IoU_c = TP / (TP + FP + FN); classes with zero union are left out of the mean.
// Throws undefined_metric when every union is zero.
IouResult miou(const ConfusionMatrix& cm);

// Fraction of pixels on the diagonal; undefined_metric on an empty matrix.
double pixel_accuracy(const ConfusionMatrix& cm);

// Sample Pearson correlation. Throws undefined_metric for fewer than two points or a
// zero variance, invalid_shape for unequal lengths.
double pearson(std::span<const double> x, std::span<const double> y);

// Best agreement between two labelings over one-to-one relabelings of `a`
// (exhaustive over permutations, so intended for small label counts).
double label_agreement(std::span<const std::size_t> a, std::span<const std::size_t> b);

// Share of samples whose cluster's majority true label matches their own.
double purity(std::span<const std::size_t> clusters, std::span<const std::size_t> truth);

}  // namespace cdtta
