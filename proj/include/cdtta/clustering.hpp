#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdtta/network.hpp"
#include "cdtta/tensor.hpp"

namespace cdtta {

enum class Metric { bhattacharyya, euclidean, wasserstein2, stats_divergence };

inline constexpr std::array<Metric, 4> kAllMetrics{Metric::bhattacharyya, Metric::euclidean, Metric::wasserstein2,
                                                   Metric::stats_divergence};

std::string_view to_string(Metric m) noexcept;
Metric parse_metric(std::string_view name);  // throws invalid_config

inline constexpr double kVarianceFloor = 1e-8;

// A 1-D Gaussian as (mean, variance).
struct Gaussian1d {
  double mean = 0;
  double var = 1;
};

// D_B = 1/4 ln(1/4 (vp/vq + vq/vp + 2)) + 1/4 (mp - mq)^2 / (vp + vq).
// Variances are floored at kVarianceFloor; throws ErrorKind::domain if one is
// still not positive (negative or NaN input).
double bhattacharyya(Gaussian1d p, Gaussian1d q);

// Per-channel scalar distance between two (mean, var) pairs.
//   bhattacharyya     as above
//   euclidean         sqrt(dmean^2 + dvar^2) on the stored (mean, var) coordinates
//   wasserstein2      sqrt(dmean^2 + dstd^2), the closed form for 1-D Gaussians
//   stats_divergence  |dmean| + |dstd|
double channel_distance(Gaussian1d p, Gaussian1d q, Metric metric);

// Stacked per-layer channel statistics of one sample.
struct DomainFeature {
  std::vector<std::size_t> taps;  // tap index of each layer
  std::vector<ChannelStats> layers;

  std::size_t total_channels() const noexcept;
  // Single-layer view; throws invalid_feature if the tap is absent.
  DomainFeature layer(std::size_t tap) const;
  bool operator==(const DomainFeature&) const = default;
};

// Builds one feature per sample from tap statistics, layers ordered as `tap_set`.
std::vector<DomainFeature> make_features(const TapStats& taps, std::span<const std::size_t> tap_set);

// Mean over every channel of every layer of the per-channel distance.
// Throws invalid_feature when the layer layouts differ.
double feature_distance(const DomainFeature& a, const DomainFeature& b, Metric metric);

// Online clustering state: K centroids updated by exponential moving average.
class ClusterBank {
 public:
  static constexpr std::size_t kSeedPersistence = 2;

  // seed_threshold gates the seeding phase: the next empty centroid opens once
  // kSeedPersistence consecutive features lie farther than it from every seeded
  // centroid, so a single outlier cannot claim a cluster. A negative threshold
  // seeds unconditionally from the first K samples.
  ClusterBank(std::size_t clusters, double eta, Metric metric, double seed_threshold = -1.0);

  std::size_t clusters() const noexcept { return centroids_.size(); }
  std::size_t initialized() const noexcept { return initialized_; }
  double eta() const noexcept { return eta_; }
  Metric metric() const noexcept { return metric_; }
  double seed_threshold() const noexcept { return seed_threshold_; }
  const std::vector<DomainFeature>& centroids() const noexcept { return centroids_; }
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }

  // Distances to every centroid; +inf for centroids not yet seeded.
  std::vector<double> distances(const DomainFeature& feature) const;

  // Nearest seeded centroid without mutating anything (ties -> lowest index).
  std::size_t nearest(const DomainFeature& feature) const;

  // Seeds or assigns, then c <- eta*c + (1-eta)*feature on means and variances.
  std::size_t assign_and_update(const DomainFeature& feature);

 private:
  std::vector<DomainFeature> centroids_;
  std::vector<std::uint64_t> counts_;
  std::size_t initialized_ = 0;
  double eta_;
  Metric metric_;
  double seed_threshold_;
  std::size_t novel_run_ = 0;
};

struct KMeansResult {
  std::vector<std::size_t> labels;
  std::vector<DomainFeature> centroids;
  std::size_t iterations = 0;
};

// Lloyd iterations with metric-based assignment and arithmetic-mean centroids,
// k-means++ seeding from `seed`; stops when assignments are stable or after 100 rounds.
KMeansResult offline_kmeans(std::span<const DomainFeature> features, std::size_t clusters, Metric metric,
                            std::uint64_t seed);

// Mean cross-domain pairwise distance over mean within-domain pairwise distance
// (self-pairs excluded) at a single tap. 0/0 returns 1.0; other denominators are
// floored at 1e-12.
double ddr(const std::map<int, std::vector<DomainFeature>>& features_by_domain, Metric metric, std::size_t tap);

}  // namespace cdtta
