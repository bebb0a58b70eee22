#pragma once

#include <map>
#include <string>
#include <vector>

#include "cdtta/clustering.hpp"
#include "cdtta/losses.hpp"
#include "cdtta/network.hpp"
#include "cdtta/synth_data.hpp"

namespace cdtta {

// Per-domain features of every sample at all four taps, extracted on branch 0 in
// batches that never mix domains.
std::map<int, std::vector<DomainFeature>> collect_features(const SegNet<float>& net, const StreamData& data,
                                                           std::size_t batch_size);

struct DdrRow {
  std::size_t tap = 0;
  Metric metric = Metric::bhattacharyya;
  double value = 0;
};

// One row per (tap, metric). Throws invalid_config for fewer than two domains.
std::vector<DdrRow> ddr_grid(const std::map<int, std::vector<DomainFeature>>& features);

// Per-sample quality signals of a branch-0 alpha-BN forward pass, in sample order.
struct SampleSignals {
  std::vector<double> similarity;  // w(x), unexponentiated
  std::vector<double> mean_prob;
  std::vector<double> entropy;
  std::vector<double> accuracy;    // pixel accuracy against ground truth
};

SampleSignals sample_signals(const SegNet<float>& net, const StreamData& data, std::size_t batch_size,
                             const DenoiseConfig& denoise);

// Batches of at most `batch_size` consecutive same-domain sample indices, domains ascending.
std::vector<std::vector<std::size_t>> domain_batches(const std::vector<int>& domains, std::size_t batch_size);

}  // namespace cdtta
