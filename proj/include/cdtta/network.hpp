#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "cdtta/batch_norm.hpp"
#include "cdtta/labels.hpp"
#include "cdtta/tensor.hpp"

namespace cdtta {

inline constexpr std::size_t kNumTaps = 4;
inline constexpr std::array<std::string_view, kNumTaps> kTapNames{"t0", "t1", "t2", "t3"};
inline constexpr int kOutputStride = 4;

// Throws invalid_config for names other than t0..t3.
std::size_t tap_index(std::string_view name);
std::vector<std::size_t> parse_tap_set(const std::vector<std::string>& names);

// Per tap, one ChannelStats per sample of the pre-normalization input.
using TapStats = std::array<std::vector<ChannelStats>, kNumTaps>;

struct NetConfig {
  std::size_t classes = 5;
  std::size_t branches = 1;
  double alpha = kDefaultAlpha;
  double epsilon = kBnEpsilon;
};

template <typename T>
struct ConvLayer {
  BasicTensor<T> weights;  // (out_c, in_c, k, k)
  std::vector<T> bias;
  int stride = 1;
  int padding = 0;
};

template <typename T>
struct ForwardTrace {
  std::size_t branch = 0;
  BasicTensor<T> input;
  std::array<BasicTensor<T>, kNumTaps> pre_bn;     // conv outputs feeding each BN
  std::array<BnContext<T>, kNumTaps> bn;
  std::array<BnTrainContext<T>, kNumTaps> bn_train;
  std::array<BasicTensor<T>, kNumTaps> post_relu;  // block outputs
  Shape head_shape{};
  bool training = false;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> probs;
  TapStats taps;
  ForwardTrace<T> trace;
};

template <typename T>
struct AffineGrads {
  std::size_t branch = 0;
  std::array<std::vector<T>, kNumTaps> gamma;
  std::array<std::vector<T>, kNumTaps> beta;
};

template <typename T>
struct FullGrads {
  std::array<ConvLayer<T>, kNumTaps + 1> conv;  // weight/bias gradients
  std::array<std::vector<T>, kNumTaps> gamma;
  std::array<std::vector<T>, kNumTaps> beta;
};

template <typename T>
struct TrainForward {
  BasicTensor<T> probs;
  std::array<ChannelStats, kNumTaps> batch_stats;
  ForwardTrace<T> trace;
};

// conv3x3(3->16,s1)+BN(t0)+ReLU, conv3x3(16->32,s2)+BN(t1)+ReLU, conv3x3(32->32,s1)+BN(t2)+ReLU,
// conv3x3(32->64,s2)+BN(t3)+ReLU, conv1x1(64->C), bilinear x4, channel softmax.
template <typename T>
class SegNet {
 public:
  static constexpr std::string_view kArchitecture =
      "cdtta-segnet/1 conv3x3(3>16,s1,p1)+bn:t0+relu conv3x3(16>32,s2,p1)+bn:t1+relu "
      "conv3x3(32>32,s1,p1)+bn:t2+relu conv3x3(32>64,s2,p1)+bn:t3+relu conv1x1(64>C) up4 softmax";

  SegNet() = default;
  SegNet(std::array<ConvLayer<T>, kNumTaps + 1> convs, std::array<BnBranchBank<T>, kNumTaps> banks);

  // He-initialized conv weights, zero biases, unit gamma, zero beta, source stats (0, 1).
  static SegNet create(const NetConfig& cfg, std::uint64_t seed);

  std::size_t classes() const noexcept { return convs_.back().weights.shape().n; }
  std::size_t branch_count() const noexcept { return banks_.front().branch_count(); }
  double alpha() const noexcept { return banks_.front().alpha(); }

  const ConvLayer<T>& conv(std::size_t i) const { return convs_.at(i); }
  ConvLayer<T>& conv_params(std::size_t i) { return convs_.at(i); }
  const BnBranchBank<T>& bn(std::size_t i) const { return banks_.at(i); }
  BnBranchBank<T>& bn_params(std::size_t i) { return banks_.at(i); }

  void set_alpha(double alpha);

  // Fresh bank of K copies of branch 0 per BN layer, same source statistics.
  SegNet with_branches(std::size_t branches, double alpha) const;

  ForwardResult<T> forward_with_taps(const BasicTensor<T>& batch, std::size_t branch) const;

  // Statistics-only pass through the first `depth` blocks (1..4).
  TapStats forward_taps(const BasicTensor<T>& batch, std::size_t branch, std::size_t depth) const;

  // Inference with source running statistics only.
  BasicTensor<T> forward_source(const BasicTensor<T>& batch, std::size_t branch = 0) const;

  // `logits_grad` is dL/dlogits at output resolution. Returns gamma/beta gradients for the
  // branch used by the forward pass; conv parameters are not touched.
  AffineGrads<T> backward_affine_only(const BasicTensor<T>& logits_grad, const ForwardTrace<T>& trace) const;

  // Source pretraining: batch statistics, branch 0.
  TrainForward<T> forward_train(const BasicTensor<T>& batch) const;
  FullGrads<T> backward_full(const BasicTensor<T>& logits_grad, const ForwardTrace<T>& trace) const;

  bool operator==(const SegNet& other) const;

 private:
  void check_input(const BasicTensor<T>& batch) const;

  std::array<ConvLayer<T>, kNumTaps + 1> convs_;
  std::array<BnBranchBank<T>, kNumTaps> banks_;
};

// Per-pixel argmax; ties go to the lowest class index.
template <typename T>
LabelMap argmax_labels(const BasicTensor<T>& probs);

template <typename T>
LabelMap predict(const SegNet<T>& net, const BasicTensor<T>& batch, std::size_t branch);

// --- checkpoint container ---
//
// "CDCK" | u32 format version | u32 manifest length | manifest JSON | CDT1 blocks in manifest order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const SegNet<T>& net, std::ostream& os);
template <typename T>
void save_checkpoint(const SegNet<T>& net, const std::string& path);

// Throws format errors on bad magic, version or architecture mismatch, and truncation.
template <typename T>
SegNet<T> load_checkpoint(std::istream& is);
template <typename T>
SegNet<T> load_checkpoint(const std::string& path);

}  // namespace cdtta
