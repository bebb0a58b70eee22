#include "cdtta/analysis.hpp"

#include <algorithm>
#include <set>
#include <utility>

#include "cdtta/adaptation.hpp"

namespace cdtta {

std::vector<std::vector<std::size_t>> domain_batches(const std::vector<int>& domains, std::size_t batch_size) {
  require(batch_size >= 1, ErrorKind::invalid_config, "batch_size must be >= 1");
  std::set<int> ids(domains.begin(), domains.end());
  std::vector<std::vector<std::size_t>> out;
  for (int d : ids) {
    std::vector<std::size_t> cur;
    for (std::size_t i = 0; i < domains.size(); ++i) {
      if (domains[i] != d) continue;
      cur.push_back(i);
      if (cur.size() == batch_size) out.push_back(std::exchange(cur, {}));
    }
    if (!cur.empty()) out.push_back(std::move(cur));
  }
  return out;
}

std::map<int, std::vector<DomainFeature>> collect_features(const SegNet<float>& net, const StreamData& data,
                                                           std::size_t batch_size) {
  static constexpr std::array<std::size_t, kNumTaps> kAll{0, 1, 2, 3};
  std::map<int, std::vector<DomainFeature>> out;
  for (const auto& idx : domain_batches(data.truth.domains, batch_size)) {
    const auto taps = net.forward_taps(gather_samples(data.stream.images, idx), 0, kNumTaps);
    auto feats = make_features(taps, kAll);
    auto& dst = out[data.truth.domains[idx.front()]];
    for (auto& f : feats) dst.push_back(std::move(f));
  }
  return out;
}

std::vector<DdrRow> ddr_grid(const std::map<int, std::vector<DomainFeature>>& features) {
  std::vector<DdrRow> rows;
  for (std::size_t t = 0; t < kNumTaps; ++t)
    for (Metric m : kAllMetrics) rows.push_back({t, m, ddr(features, m, t)});
  return rows;
}

SampleSignals sample_signals(const SegNet<float>& net, const StreamData& data, std::size_t batch_size,
                             const DenoiseConfig& denoise) {
  const std::size_t n = data.stream.size();
  SampleSignals s;
  s.similarity.assign(n, 0.0);
  s.mean_prob.assign(n, 0.0);
  s.entropy.assign(n, 0.0);
  s.accuracy.assign(n, 0.0);
  std::array<ChannelStats, kNumTaps> source;
  for (std::size_t t = 0; t < kNumTaps; ++t) source[t] = net.bn(t).source();
  for (const auto& idx : domain_batches(data.truth.domains, batch_size)) {
    const auto fw = net.forward_with_taps(gather_samples(data.stream.images, idx), 0);
    const auto w = denoise_weight(fw.taps, source, denoise);
    const auto mp = mean_max_probability(fw.probs);
    const auto ent = mean_entropy(fw.probs);
    const auto pred = argmax_labels(fw.probs);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto p = pred.sample(j);
      const auto g = data.truth.labels.sample(idx[j]);
      std::size_t hit = 0;
      for (std::size_t k = 0; k < p.size(); ++k) hit += p[k] == g[k];
      s.similarity[idx[j]] = w[j];
      s.mean_prob[idx[j]] = mp[j];
      s.entropy[idx[j]] = ent[j];
      s.accuracy[idx[j]] = static_cast<double>(hit) / static_cast<double>(p.size());
    }
  }
  return s;
}

}  // namespace cdtta
