#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdtta/clustering.hpp"
#include "cdtta/losses.hpp"
#include "cdtta/network.hpp"
#include "cdtta/synth_data.hpp"
#include "json.hpp"

namespace cdtta {

enum class BranchMode { pseudo, oracle, compound };

std::string_view to_string(BranchMode m) noexcept;
BranchMode parse_branch_mode(std::string_view name);  // throws invalid_config

// Default novelty gate for the seeding phase of the online clusters, on the
// t0 Bhattacharyya scale. Negative disables gating.
inline constexpr double kDefaultSeedThreshold = 0.19;

struct AdaptConfig {
  double alpha = kDefaultAlpha;
  double eta = 0.9;
  double delta = 1.5;
  std::size_t clusters = 3;
  double learning_rate = 1e-2;
  std::size_t batch_size = 4;
  LossKind loss = LossKind::entropy;
  std::vector<std::size_t> clustering_layers{0};
  std::vector<std::size_t> denoise_layers{0, 1, 2, 3};
  Metric metric = Metric::bhattacharyya;
  double seed_threshold = kDefaultSeedThreshold;
  std::uint64_t seed = 0;
  BranchMode mode = BranchMode::pseudo;

  void validate() const;  // throws invalid_config naming the field
};

nlohmann::ordered_json to_json(const AdaptConfig& cfg);

// --- source pretraining ---

struct PretrainConfig {
  std::size_t epochs = 6;
  double learning_rate = 0.1;
  std::size_t batch_size = 8;
  double bn_momentum = 0.1;
  std::size_t classes = 5;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  SegNet<float> net;
  std::vector<double> epoch_loss;  // mean pixel cross-entropy per epoch
};

// Full-parameter SGD on pixel cross-entropy with batch-statistics BN; running statistics
// tracked with `bn_momentum` become the source statistics of the returned network.
// Throws invalid_config on an empty dataset.
PretrainResult pretrain(const Tensor& images, const LabelMap& labels, const PretrainConfig& cfg);

// --- test-time adaptation ---

struct StepRecord {
  std::size_t step = 0;
  std::vector<std::size_t> samples;
  std::vector<std::size_t> branches;
  std::vector<double> loss;
  std::vector<double> weight;  // unexponentiated similarity w
  std::vector<double> scale;   // clamp(w)^delta
  std::vector<double> entropy;
  std::vector<double> max_prob;
  std::vector<int> true_domains;  // filled by annotate(), never by the adaptation loop
};

struct StepOutput {
  StepRecord record;
  LabelMap predictions;  // from pre-update parameters
};

// Owns the adapted network and the cluster bank for one stream.
class Adapter {
 public:
  // Copies `source` into cfg.clusters branches with cfg.alpha.
  Adapter(const SegNet<float>& source, AdaptConfig cfg);

  // `oracle` holds the true domain of each sample and is read only in oracle mode.
  StepOutput step(const Tensor& batch, std::span<const std::size_t> sample_ids, std::span<const int> oracle = {});

  // Branch for inference on new data with the cluster bank frozen.
  std::size_t select_branch(const DomainFeature& feature) const;
  std::vector<DomainFeature> features(const Tensor& batch) const;

  const SegNet<float>& net() const noexcept { return net_; }
  const ClusterBank& bank() const noexcept { return bank_; }
  const AdaptConfig& config() const noexcept { return cfg_; }
  std::size_t steps() const noexcept { return step_; }

 private:
  SegNet<float> net_;
  ClusterBank bank_;
  AdaptConfig cfg_;
  std::array<ChannelStats, kNumTaps> source_stats_;
  std::size_t clustering_depth_ = 1;
  std::size_t last_branch_ = 0;
  std::size_t step_ = 0;
};

struct EvalResult {
  std::vector<std::string> domains;          // eval domain names, column order
  std::vector<std::vector<double>> matrix;   // [branch][domain] mIoU
  std::vector<double> selected;              // per-domain mIoU with the mode's branch choice
  double mean_selected = 0;
  std::vector<double> sample_accuracy;       // per eval sample, selected branch
};

struct AdaptReport {
  AdaptConfig config;
  std::vector<StepRecord> steps;
  std::vector<double> param_delta;           // sum |delta gamma| + |delta beta| per branch
  std::vector<std::uint64_t> cluster_counts;
  // Filled by annotate().
  std::map<int, double> stream_miou;
  double purity = 0;
  double true_agreement = 0;
  std::optional<EvalResult> eval;
};

struct RunResult {
  AdaptReport report;
  Adapter adapter;
  LabelMap predictions;  // stream predictions in stream order
};

// Iterates tta_step over the stream in order. `oracle` is consulted only in oracle mode and
// must then hold one domain id < clusters per sample.
RunResult run_stream(const SegNet<float>& source, const ImageStream& stream, const AdaptConfig& cfg,
                     std::span<const int> oracle = {});

// Single-branch alpha-BN entropy minimisation with unweighted mean loss.
struct BaselineResult {
  SegNet<float> net;
  std::vector<double> loss;  // per sample
  LabelMap predictions;
};
BaselineResult run_alpha_bn_baseline(const SegNet<float>& source, const ImageStream& stream, double alpha,
                                     double learning_rate, std::size_t batch_size);

// Per-domain evaluation. Samples are batched within their domain; in pseudo mode the
// branch comes from the frozen cluster bank, in oracle mode from the true domain, in
// compound mode it is 0.
EvalResult evaluate(const Adapter& adapter, const StreamData& eval, const std::vector<DomainSpec>& specs);

// Adds ground-truth derived fields to a report.
void annotate(AdaptReport& report, const GroundTruth& truth, const LabelMap& predictions, std::size_t classes);

nlohmann::ordered_json to_json(const AdaptReport& report);
void write_steps_csv(const AdaptReport& report, std::ostream& os);

// Pixel accuracy of each sample.
std::vector<double> sample_accuracy(const LabelMap& pred, const LabelMap& gt);

}  // namespace cdtta
