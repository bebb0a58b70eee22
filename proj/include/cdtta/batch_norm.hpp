#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cdtta/tensor.hpp"

namespace cdtta {

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kDefaultAlpha = 0.9;

template <typename T>
struct AffineParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  bool operator==(const AffineParams&) const = default;
};

// Frozen source running statistics plus K independent affine branches.
//
// The source statistics are fixed at construction; only the branch affine
// vectors are mutable, and only through `branch_params`.
template <typename T>
class BnBranchBank {
 public:
  BnBranchBank();
  BnBranchBank(const BnBranchBank& other);
  BnBranchBank& operator=(const BnBranchBank& other);
  BnBranchBank(BnBranchBank&&) noexcept = default;
  BnBranchBank& operator=(BnBranchBank&&) noexcept = default;

  // K copies of the pretrained affine pair. Throws invalid_config for K < 1,
  // alpha outside [0, 1], epsilon <= 0, negative variances or length mismatch.
  static BnBranchBank init_branches(std::span<const T> gamma, std::span<const T> beta, const ChannelStats& running,
                                    std::size_t branches, double alpha, double epsilon = kBnEpsilon);

  // Restores a bank from stored branches (checkpoint loading).
  static BnBranchBank from_parts(ChannelStats source, std::vector<AffineParams<T>> branches, double alpha,
                                 double epsilon);

  std::size_t channels() const noexcept { return source_.means.size(); }
  std::size_t branch_count() const noexcept { return branches_.size(); }
  double alpha() const noexcept { return alpha_; }
  double epsilon() const noexcept { return epsilon_; }
  const ChannelStats& source() const noexcept { return source_; }

  void set_alpha(double alpha);

  const AffineParams<T>& branch(std::size_t k) const;
  AffineParams<T>& branch_params(std::size_t k);
  const std::vector<AffineParams<T>>& branches() const noexcept { return branches_; }

  // Stale-context bookkeeping used by bn_forward/bn_backward.
  std::uint64_t instance() const noexcept { return instance_; }
  std::uint64_t last_serial() const noexcept { return serial_; }
  std::uint64_t next_serial() const noexcept { return ++serial_; }

 private:
  ChannelStats source_;
  std::vector<AffineParams<T>> branches_;
  double alpha_ = kDefaultAlpha;
  double epsilon_ = kBnEpsilon;
  std::uint64_t instance_;
  mutable std::uint64_t serial_ = 0;
};

template <typename T>
struct BnContext {
  std::uint64_t instance = 0;
  std::uint64_t serial = 0;  // 0 = empty context
  std::size_t branch = 0;
  BasicTensor<T> normalized;  // x_hat under the mixed statistics
  std::vector<T> inv_std;
  std::vector<T> gamma;       // affine scale used by the forward pass
};

template <typename T>
struct BnForward {
  BasicTensor<T> output;
  ChannelStats target;  // raw per-batch statistics of the input
  BnContext<T> context;
};

template <typename T>
struct BnGrads {
  BasicTensor<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

// Normalizes with mu = alpha*mu_s + (1-alpha)*mu_t and the same mix of variances.
template <typename T>
BnForward<T> bn_forward(const BasicTensor<T>& input, const BnBranchBank<T>& bank, std::size_t branch);

// Gradients with the mixed statistics held constant. Throws stale_context if
// `ctx` does not come from the most recent bn_forward on this bank.
template <typename T>
BnGrads<T> bn_backward(const BasicTensor<T>& upstream, const BnContext<T>& ctx, const BnBranchBank<T>& bank,
                       bool want_input = true);

// Inference with the source running statistics alone.
template <typename T>
BasicTensor<T> bn_forward_source(const BasicTensor<T>& input, const BnBranchBank<T>& bank, std::size_t branch);

// --- Source pretraining: plain batch statistics, gradient through them. ---

template <typename T>
struct BnTrainContext {
  BasicTensor<T> normalized;
  std::vector<T> inv_std;
};

template <typename T>
struct BnTrainForward {
  BasicTensor<T> output;
  ChannelStats batch;
  BnTrainContext<T> context;
};

template <typename T>
BnTrainForward<T> bn_forward_train(const BasicTensor<T>& input, const AffineParams<T>& affine, double epsilon);

template <typename T>
BnGrads<T> bn_backward_train(const BasicTensor<T>& upstream, const BnTrainContext<T>& ctx,
                             const AffineParams<T>& affine);

// running <- (1 - momentum) * running + momentum * batch, applied to means and variances.
void update_running_stats(ChannelStats& running, const ChannelStats& batch, double momentum);

}  // namespace cdtta
