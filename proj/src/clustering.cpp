#include "cdtta/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cdtta {

std::string_view to_string(Metric m) noexcept {
  switch (m) {
    case Metric::bhattacharyya: return "bhattacharyya";
    case Metric::euclidean: return "euclidean";
    case Metric::wasserstein2: return "wasserstein2";
    case Metric::stats_divergence: return "stats_divergence";
  }
  return "unknown";
}

Metric parse_metric(std::string_view name) {
  for (Metric m : kAllMetrics)
    if (to_string(m) == name) return m;
  fail(ErrorKind::invalid_config, "unknown metric '" + std::string(name) +
                                      "' (expected bhattacharyya, euclidean, wasserstein2 or stats_divergence)");
}

double bhattacharyya(Gaussian1d p, Gaussian1d q) {
  const double vp = std::max(p.var, kVarianceFloor);
  const double vq = std::max(q.var, kVarianceFloor);
  if (!(vp > 0) || !(vq > 0) || std::isnan(p.var) || std::isnan(q.var))
    fail(ErrorKind::domain, "bhattacharyya: variance must be positive");
  const double dm = p.mean - q.mean;
  return 0.25 * std::log(0.25 * (vp / vq + vq / vp + 2.0)) + 0.25 * (dm * dm / (vp + vq));
}

double channel_distance(Gaussian1d p, Gaussian1d q, Metric metric) {
  const double dm = p.mean - q.mean;
  switch (metric) {
    case Metric::bhattacharyya: return bhattacharyya(p, q);
    case Metric::euclidean: {
      const double dv = p.var - q.var;
      return std::sqrt(dm * dm + dv * dv);
    }
    case Metric::wasserstein2: {
      const double ds = std::sqrt(std::max(p.var, 0.0)) - std::sqrt(std::max(q.var, 0.0));
      return std::sqrt(dm * dm + ds * ds);
    }
    case Metric::stats_divergence: {
      const double ds = std::sqrt(std::max(p.var, 0.0)) - std::sqrt(std::max(q.var, 0.0));
      return std::abs(dm) + std::abs(ds);
    }
  }
  return 0;
}

std::size_t DomainFeature::total_channels() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.channels();
  return n;
}

DomainFeature DomainFeature::layer(std::size_t tap) const {
  for (std::size_t i = 0; i < taps.size(); ++i)
    if (taps[i] == tap) return DomainFeature{{tap}, {layers[i]}};
  fail(ErrorKind::invalid_feature, "domain feature has no layer for tap t" + std::to_string(tap));
}

std::vector<DomainFeature> make_features(const TapStats& taps, std::span<const std::size_t> tap_set) {
  require(!tap_set.empty(), ErrorKind::invalid_config, "make_features: empty tap set");
  const std::size_t n = tap_set.front() < kNumTaps ? taps[tap_set.front()].size() : 0;
  for (std::size_t t : tap_set)
    require(t < kNumTaps && !taps[t].empty() && taps[t].size() == n, ErrorKind::invalid_feature,
            "make_features: tap statistics missing for t" + std::to_string(t));
  std::vector<DomainFeature> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    out[s].taps.assign(tap_set.begin(), tap_set.end());
    for (std::size_t t : tap_set) out[s].layers.push_back(taps[t][s]);
  }
  return out;
}

double feature_distance(const DomainFeature& a, const DomainFeature& b, Metric metric) {
  require(a.taps == b.taps && a.layers.size() == b.layers.size(), ErrorKind::invalid_feature,
          "feature_distance: layer sets differ");
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& x = a.layers[l];
    const auto& y = b.layers[l];
    require(x.channels() == y.channels() && x.vars.size() == x.channels() && y.vars.size() == y.channels(),
            ErrorKind::invalid_feature, "feature_distance: channel counts differ");
    for (std::size_t c = 0; c < x.channels(); ++c)
      sum += channel_distance({x.means[c], x.vars[c]}, {y.means[c], y.vars[c]}, metric);
    count += x.channels();
  }
  require(count > 0, ErrorKind::invalid_feature, "feature_distance: empty feature");
  return sum / static_cast<double>(count);
}

ClusterBank::ClusterBank(std::size_t clusters, double eta, Metric metric, double seed_threshold)
    : centroids_(clusters), counts_(clusters, 0), eta_(eta), metric_(metric), seed_threshold_(seed_threshold) {
  require(clusters >= 1, ErrorKind::invalid_config, "ClusterBank: K must be >= 1");
  require(eta >= 0.0 && eta <= 1.0, ErrorKind::invalid_config, "ClusterBank: eta must lie in [0, 1]");
}

std::vector<double> ClusterBank::distances(const DomainFeature& feature) const {
  std::vector<double> d(centroids_.size(), std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < initialized_; ++k) d[k] = feature_distance(feature, centroids_[k], metric_);
  return d;
}

std::size_t ClusterBank::nearest(const DomainFeature& feature) const {
  require(initialized_ > 0, ErrorKind::invalid_config, "ClusterBank: no centroid has been seeded");
  const auto d = distances(feature);
  return static_cast<std::size_t>(std::min_element(d.begin(), d.end()) - d.begin());
}

std::size_t ClusterBank::assign_and_update(const DomainFeature& feature) {
  if (initialized_ < centroids_.size()) {
    bool open = initialized_ == 0 || seed_threshold_ < 0;
    if (!open) {
      const auto d = distances(feature);
      novel_run_ = *std::min_element(d.begin(), d.end()) > seed_threshold_ ? novel_run_ + 1 : 0;
      open = novel_run_ >= kSeedPersistence;
      // A lone novel feature is held back: assigned, but kept out of the centroids.
      if (novel_run_ > 0 && !open) {
        const std::size_t k = nearest(feature);
        ++counts_[k];
        return k;
      }
    }
    if (open) {
      novel_run_ = 0;
      const std::size_t k = initialized_++;
      centroids_[k] = feature;
      ++counts_[k];
      return k;
    }
  }
  const std::size_t k = nearest(feature);
  auto& c = centroids_[k];
  require(c.taps == feature.taps, ErrorKind::invalid_feature, "ClusterBank: feature layout changed");
  for (std::size_t l = 0; l < c.layers.size(); ++l) {
    auto& cl = c.layers[l];
    const auto& fl = feature.layers[l];
    require(cl.channels() == fl.channels(), ErrorKind::invalid_feature, "ClusterBank: channel count changed");
    for (std::size_t i = 0; i < cl.channels(); ++i) {
      cl.means[i] = eta_ * cl.means[i] + (1.0 - eta_) * fl.means[i];
      cl.vars[i] = eta_ * cl.vars[i] + (1.0 - eta_) * fl.vars[i];
    }
  }
  ++counts_[k];
  return k;
}

namespace {

DomainFeature mean_feature(std::span<const DomainFeature> features, std::span<const std::size_t> members) {
  DomainFeature m = features[members.front()];
  for (auto& l : m.layers) {
    std::fill(l.means.begin(), l.means.end(), 0.0);
    std::fill(l.vars.begin(), l.vars.end(), 0.0);
  }
  for (std::size_t idx : members) {
    const auto& f = features[idx];
    for (std::size_t l = 0; l < m.layers.size(); ++l)
      for (std::size_t c = 0; c < m.layers[l].channels(); ++c) {
        m.layers[l].means[c] += f.layers[l].means[c];
        m.layers[l].vars[c] += f.layers[l].vars[c];
      }
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (auto& l : m.layers)
    for (std::size_t c = 0; c < l.channels(); ++c) {
      l.means[c] *= inv;
      l.vars[c] *= inv;
    }
  return m;
}

}  // namespace

KMeansResult offline_kmeans(std::span<const DomainFeature> features, std::size_t clusters, Metric metric,
                            std::uint64_t seed) {
  require(clusters >= 1, ErrorKind::invalid_config, "offline_kmeans: K must be >= 1");
  require(features.size() >= clusters, ErrorKind::invalid_config,
          "offline_kmeans: " + std::to_string(features.size()) + " features for K = " + std::to_string(clusters));
  const std::size_t n = features.size();
  std::mt19937_64 rng(seed);
  KMeansResult r;

  // k-means++ seeding with distance-proportional sampling.
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  r.centroids.push_back(features[first(rng)]);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  while (r.centroids.size() < clusters) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = feature_distance(features[i], r.centroids.back(), metric);
      best[i] = std::min(best[i], d * d);
      total += best[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng), acc = 0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += best[i];
        if (best[i] > 0 && acc >= target) {
          pick = i;
          break;
        }
      }
    } else {
      // All remaining points coincide with a centroid; take the next unused index.
      pick = r.centroids.size();
    }
    r.centroids.push_back(features[pick]);
  }

  r.labels.assign(n, clusters);
  for (r.iterations = 0; r.iterations < 100; ++r.iterations) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double dmin = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < clusters; ++k) {
        const double d = feature_distance(features[i], r.centroids[k], metric);
        if (d < dmin) {
          dmin = d;
          arg = k;
        }
      }
      if (r.labels[i] != arg) {
        r.labels[i] = arg;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<std::vector<std::size_t>> members(clusters);
    for (std::size_t i = 0; i < n; ++i) members[r.labels[i]].push_back(i);
    for (std::size_t k = 0; k < clusters; ++k)
      if (!members[k].empty()) r.centroids[k] = mean_feature(features, members[k]);
  }
  return r;
}

double ddr(const std::map<int, std::vector<DomainFeature>>& features_by_domain, Metric metric, std::size_t tap) {
  require(features_by_domain.size() >= 2, ErrorKind::invalid_config, "ddr: need at least two domains");
  std::vector<std::pair<int, DomainFeature>> pts;
  for (const auto& [domain, feats] : features_by_domain) {
    require(feats.size() >= 2, ErrorKind::invalid_config,
            "ddr: domain " + std::to_string(domain) + " has fewer than two samples");
    for (const auto& f : feats) pts.emplace_back(domain, f.layer(tap));
  }
  double cross = 0, within = 0;
  std::size_t n_cross = 0, n_within = 0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      const double d = feature_distance(pts[i].second, pts[j].second, metric);
      if (pts[i].first == pts[j].first) {
        within += d;
        ++n_within;
      } else {
        cross += d;
        ++n_cross;
      }
    }
  const double num = cross / static_cast<double>(n_cross);
  const double den = within / static_cast<double>(n_within);
  constexpr double kFloor = 1e-12;
  if (den < kFloor && num < kFloor) return 1.0;
  return num / std::max(den, kFloor);
}

}  // namespace cdtta
