#include "cdtta/network.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

#include "cdtta/ops.hpp"
#include "cdtta/tensor_io.hpp"

namespace cdtta {

namespace {

constexpr std::array<std::size_t, kNumTaps> kInChannels{3, 16, 32, 32};
constexpr std::array<std::size_t, kNumTaps> kOutChannels{16, 32, 32, 64};
constexpr std::array<int, kNumTaps> kStrides{1, 2, 1, 2};

}  // namespace

std::size_t tap_index(std::string_view name) {
  for (std::size_t i = 0; i < kNumTaps; ++i)
    if (kTapNames[i] == name) return i;
  fail(ErrorKind::invalid_config, "unknown tap '" + std::string(name) + "' (expected t0..t3)");
}

std::vector<std::size_t> parse_tap_set(const std::vector<std::string>& names) {
  require(!names.empty(), ErrorKind::invalid_config, "tap set must not be empty");
  std::vector<std::size_t> out;
  for (const auto& n : names) out.push_back(tap_index(n));
  return out;
}

template <typename T>
SegNet<T>::SegNet(std::array<ConvLayer<T>, kNumTaps + 1> convs, std::array<BnBranchBank<T>, kNumTaps> banks)
    : convs_(std::move(convs)), banks_(std::move(banks)) {
  for (std::size_t i = 0; i < kNumTaps; ++i) {
    const Shape& w = convs_[i].weights.shape();
    require(w == Shape{kOutChannels[i], kInChannels[i], 3, 3} && convs_[i].stride == kStrides[i] &&
                convs_[i].padding == 1 && convs_[i].bias.size() == kOutChannels[i],
            ErrorKind::invalid_shape, "SegNet: conv block " + std::to_string(i) + " does not match the architecture");
    require(banks_[i].channels() == kOutChannels[i], ErrorKind::invalid_shape,
            "SegNet: BN layer " + std::to_string(i) + " channel count mismatch");
    require(banks_[i].branch_count() == banks_[0].branch_count() && banks_[i].alpha() == banks_[0].alpha(),
            ErrorKind::invalid_config, "SegNet: BN layers disagree on K or alpha");
  }
  const Shape& head = convs_[kNumTaps].weights.shape();
  require(head.c == kOutChannels.back() && head.h == 1 && head.w == 1 && head.n >= 2 &&
              convs_[kNumTaps].bias.size() == head.n,
          ErrorKind::invalid_shape, "SegNet: head must be a 1x1 conv from 64 channels to C >= 2 classes");
}

template <typename T>
SegNet<T> SegNet<T>::create(const NetConfig& cfg, std::uint64_t seed) {
  require(cfg.classes >= 2 && cfg.classes <= 255, ErrorKind::invalid_config, "SegNet: class count must be in [2, 255]");
  std::mt19937_64 rng(seed);
  auto he = [&rng](Shape s) {
    const double fan_in = static_cast<double>(s.c * s.h * s.w);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    BasicTensor<T> t(s);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
  };
  std::array<ConvLayer<T>, kNumTaps + 1> convs;
  std::array<BnBranchBank<T>, kNumTaps> banks;
  for (std::size_t i = 0; i < kNumTaps; ++i) {
    convs[i] = {he(Shape{kOutChannels[i], kInChannels[i], 3, 3}), std::vector<T>(kOutChannels[i], T{0}), kStrides[i], 1};
    const std::size_t c = kOutChannels[i];
    std::vector<T> gamma(c, T{1}), beta(c, T{0});
    ChannelStats src{std::vector<double>(c, 0.0), std::vector<double>(c, 1.0)};
    banks[i] = BnBranchBank<T>::init_branches(gamma, beta, src, cfg.branches, cfg.alpha, cfg.epsilon);
  }
  convs[kNumTaps] = {he(Shape{cfg.classes, kOutChannels.back(), 1, 1}), std::vector<T>(cfg.classes, T{0}), 1, 0};
  return SegNet(std::move(convs), std::move(banks));
}

template <typename T>
void SegNet<T>::set_alpha(double alpha) {
  for (auto& b : banks_) b.set_alpha(alpha);
}

template <typename T>
SegNet<T> SegNet<T>::with_branches(std::size_t branches, double alpha) const {
  std::array<BnBranchBank<T>, kNumTaps> banks;
  for (std::size_t i = 0; i < kNumTaps; ++i) {
    const auto& b0 = banks_[i].branch(0);
    banks[i] = BnBranchBank<T>::init_branches(b0.gamma, b0.beta, banks_[i].source(), branches, alpha,
                                              banks_[i].epsilon());
  }
  return SegNet(convs_, std::move(banks));
}

template <typename T>
void SegNet<T>::check_input(const BasicTensor<T>& batch) const {
  const Shape& s = batch.shape();
  require(s.c == 3, ErrorKind::invalid_shape, "SegNet: expected 3 input channels, got " + std::to_string(s.c));
  require(s.n >= 1 && s.h >= kOutputStride && s.w >= kOutputStride && s.h % kOutputStride == 0 &&
              s.w % kOutputStride == 0,
          ErrorKind::invalid_shape, "SegNet: input spatial dims must be positive multiples of 4, got " + s.str());
}

template <typename T>
ForwardResult<T> SegNet<T>::forward_with_taps(const BasicTensor<T>& batch, std::size_t branch) const {
  check_input(batch);
  banks_[0].branch(branch);
  ForwardResult<T> r;
  auto& tr = r.trace;
  tr.branch = branch;
  tr.input = batch;
  const BasicTensor<T>* x = &batch;
  for (std::size_t i = 0; i < kNumTaps; ++i) {
    tr.pre_bn[i] = conv2d<T>(*x, convs_[i].weights, convs_[i].bias, convs_[i].stride, convs_[i].padding);
    r.taps[i] = channel_statistics(tr.pre_bn[i], StatsScope::per_sample);
    auto bn = bn_forward(tr.pre_bn[i], banks_[i], branch);
    tr.bn[i] = std::move(bn.context);
    tr.post_relu[i] = relu(bn.output);
    x = &tr.post_relu[i];
  }
  const auto& head = convs_[kNumTaps];
  auto small = conv2d<T>(*x, head.weights, head.bias, head.stride, head.padding);
  tr.head_shape = small.shape();
  r.probs = softmax_channels(upsample_bilinear(small, kOutputStride));
  if (!r.probs.all_finite()) fail(ErrorKind::numeric, "SegNet: non-finite probabilities");
  return r;
}

template <typename T>
TapStats SegNet<T>::forward_taps(const BasicTensor<T>& batch, std::size_t branch, std::size_t depth) const {
  check_input(batch);
  require(depth >= 1 && depth <= kNumTaps, ErrorKind::invalid_config, "forward_taps: depth must be in [1, 4]");
  TapStats taps;
  BasicTensor<T> x = batch;
  for (std::size_t i = 0; i < depth; ++i) {
    auto pre = conv2d<T>(x, convs_[i].weights, convs_[i].bias, convs_[i].stride, convs_[i].padding);
    taps[i] = channel_statistics(pre, StatsScope::per_sample);
    if (i + 1 < depth) x = relu(bn_forward(pre, banks_[i], branch).output);
  }
  return taps;
}

template <typename T>
BasicTensor<T> SegNet<T>::forward_source(const BasicTensor<T>& batch, std::size_t branch) const {
  check_input(batch);
  BasicTensor<T> x = batch;
  for (std::size_t i = 0; i < kNumTaps; ++i) {
    auto pre = conv2d<T>(x, convs_[i].weights, convs_[i].bias, convs_[i].stride, convs_[i].padding);
    x = relu(bn_forward_source(pre, banks_[i], branch));
  }
  const auto& head = convs_[kNumTaps];
  return softmax_channels(upsample_bilinear(conv2d<T>(x, head.weights, head.bias, 1, 0), kOutputStride));
}

template <typename T>
AffineGrads<T> SegNet<T>::backward_affine_only(const BasicTensor<T>& logits_grad, const ForwardTrace<T>& tr) const {
  require(!tr.training, ErrorKind::stale_context, "backward_affine_only: trace comes from a training forward pass");
  for (const auto& ctx : tr.bn)
    require(ctx.serial != 0, ErrorKind::stale_context, "backward_affine_only: missing forward context");
  AffineGrads<T> g;
  g.branch = tr.branch;
  const auto& head = convs_[kNumTaps];
  BasicTensor<T> up = upsample_bilinear_backward(logits_grad, kOutputStride, tr.head_shape);
  up = conv2d_backward<T>(tr.post_relu[kNumTaps - 1], head.weights, 1, 0, up, {true, false}).input;
  for (std::size_t i = kNumTaps; i-- > 0;) {
    up = relu_backward(tr.post_relu[i], up);
    auto bg = bn_backward(up, tr.bn[i], banks_[i], i > 0);
    g.gamma[i] = std::move(bg.gamma);
    g.beta[i] = std::move(bg.beta);
    if (i == 0) break;
    up = conv2d_backward<T>(tr.post_relu[i - 1], convs_[i].weights, convs_[i].stride, convs_[i].padding, bg.input,
                            {true, false})
             .input;
  }
  return g;
}

template <typename T>
TrainForward<T> SegNet<T>::forward_train(const BasicTensor<T>& batch) const {
  check_input(batch);
  TrainForward<T> r;
  auto& tr = r.trace;
  tr.training = true;
  tr.input = batch;
  const BasicTensor<T>* x = &batch;
  for (std::size_t i = 0; i < kNumTaps; ++i) {
    tr.pre_bn[i] = conv2d<T>(*x, convs_[i].weights, convs_[i].bias, convs_[i].stride, convs_[i].padding);
    auto bn = bn_forward_train(tr.pre_bn[i], banks_[i].branch(0), banks_[i].epsilon());
    r.batch_stats[i] = std::move(bn.batch);
    tr.bn_train[i] = std::move(bn.context);
    tr.post_relu[i] = relu(bn.output);
    x = &tr.post_relu[i];
  }
  const auto& head = convs_[kNumTaps];
  auto small = conv2d<T>(*x, head.weights, head.bias, 1, 0);
  tr.head_shape = small.shape();
  r.probs = softmax_channels(upsample_bilinear(small, kOutputStride));
  if (!r.probs.all_finite()) fail(ErrorKind::numeric, "SegNet: non-finite probabilities during training");
  return r;
}

template <typename T>
FullGrads<T> SegNet<T>::backward_full(const BasicTensor<T>& logits_grad, const ForwardTrace<T>& tr) const {
  require(tr.training, ErrorKind::stale_context, "backward_full: trace does not come from forward_train");
  FullGrads<T> g;
  const auto& head = convs_[kNumTaps];
  BasicTensor<T> up = upsample_bilinear_backward(logits_grad, kOutputStride, tr.head_shape);
  auto hg = conv2d_backward<T>(tr.post_relu[kNumTaps - 1], head.weights, 1, 0, up);
  g.conv[kNumTaps].weights = std::move(hg.weights);
  g.conv[kNumTaps].bias = std::move(hg.bias);
  up = std::move(hg.input);
  for (std::size_t i = kNumTaps; i-- > 0;) {
    up = relu_backward(tr.post_relu[i], up);
    auto bg = bn_backward_train(up, tr.bn_train[i], banks_[i].branch(0));
    g.gamma[i] = std::move(bg.gamma);
    g.beta[i] = std::move(bg.beta);
    const BasicTensor<T>& in = i == 0 ? tr.input : tr.post_relu[i - 1];
    auto cg = conv2d_backward<T>(in, convs_[i].weights, convs_[i].stride, convs_[i].padding, bg.input,
                                 {i > 0, true});
    g.conv[i].weights = std::move(cg.weights);
    g.conv[i].bias = std::move(cg.bias);
    up = std::move(cg.input);
  }
  return g;
}

template <typename T>
bool SegNet<T>::operator==(const SegNet& other) const {
  for (std::size_t i = 0; i <= kNumTaps; ++i) {
    if (!(convs_[i].weights == other.convs_[i].weights) || convs_[i].bias != other.convs_[i].bias ||
        convs_[i].stride != other.convs_[i].stride || convs_[i].padding != other.convs_[i].padding)
      return false;
  }
  for (std::size_t i = 0; i < kNumTaps; ++i) {
    const auto& a = banks_[i];
    const auto& b = other.banks_[i];
    if (!(a.source() == b.source()) || a.branches() != b.branches() || a.alpha() != b.alpha() ||
        a.epsilon() != b.epsilon())
      return false;
  }
  return true;
}

template <typename T>
LabelMap argmax_labels(const BasicTensor<T>& probs) {
  const Shape s = probs.shape();
  LabelMap out{s.n, s.h, s.w, std::vector<std::uint8_t>(s.n * s.plane())};
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* p = probs.sample(n).data();
    auto dst = out.sample(n);
    for (std::size_t i = 0; i < s.plane(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < s.c; ++c)
        if (p[c * s.plane() + i] > p[best * s.plane() + i]) best = c;
      dst[i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

template <typename T>
LabelMap predict(const SegNet<T>& net, const BasicTensor<T>& batch, std::size_t branch) {
  return argmax_labels(net.forward_with_taps(batch, branch).probs);
}

// --- checkpoint ---

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'C', 'D', 'C', 'K'};

std::string block_name(std::string_view kind, std::size_t layer) { return std::string(kind) + std::to_string(layer); }

}  // namespace

template <typename T>
void save_checkpoint(const SegNet<T>& net, std::ostream& os) {
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["architecture"] = SegNet<T>::kArchitecture;
  manifest["precision"] = std::is_same_v<T, float> ? "single" : "double";
  manifest["classes"] = net.classes();
  manifest["branches"] = net.branch_count();
  manifest["alpha"] = net.alpha();
  manifest["epsilon"] = net.bn(0).epsilon();

  std::vector<std::string> names;
  std::ostringstream blocks;
  for (std::size_t i = 0; i <= kNumTaps; ++i) {
    names.push_back(block_name("conv", i) + ".weights");
    write_tensor(blocks, net.conv(i).weights);
    names.push_back(block_name("conv", i) + ".bias");
    write_vector<T>(blocks, net.conv(i).bias);
  }
  for (std::size_t i = 0; i < kNumTaps; ++i) {
    const auto& bank = net.bn(i);
    names.push_back(block_name("bn", i) + ".source_mean");
    write_vector<double>(blocks, bank.source().means);
    names.push_back(block_name("bn", i) + ".source_var");
    write_vector<double>(blocks, bank.source().vars);
    for (std::size_t k = 0; k < bank.branch_count(); ++k) {
      names.push_back(block_name("bn", i) + ".branch" + std::to_string(k) + ".gamma");
      write_vector<T>(blocks, bank.branch(k).gamma);
      names.push_back(block_name("bn", i) + ".branch" + std::to_string(k) + ".beta");
      write_vector<T>(blocks, bank.branch(k).beta);
    }
  }
  manifest["blocks"] = names;
  const std::string text = manifest.dump();
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  write_u32(os, kCheckpointVersion);
  write_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::string payload = blocks.str();
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) fail(ErrorKind::data, "save_checkpoint: write failed");
}

template <typename T>
void save_checkpoint(const SegNet<T>& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::data, "save_checkpoint: cannot open '" + path + "'");
  save_checkpoint(net, os);
}

template <typename T>
SegNet<T> load_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (is.gcount() != 4) fail(ErrorKind::format, "checkpoint: truncated header");
  if (magic != kCheckpointMagic) fail(ErrorKind::format, "checkpoint: bad magic");
  const std::uint32_t version = read_u32(is);
  if (version != kCheckpointVersion)
    fail(ErrorKind::format, "checkpoint: unsupported format version " + std::to_string(version));
  const std::uint32_t len = read_u32(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (static_cast<std::uint32_t>(is.gcount()) != len) fail(ErrorKind::format, "checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("checkpoint: malformed manifest: ") + e.what());
  }
  try {
    if (manifest.at("architecture").get<std::string>() != SegNet<T>::kArchitecture)
      fail(ErrorKind::format, "checkpoint: architecture descriptor mismatch");
    const auto classes = manifest.at("classes").get<std::size_t>();
    const auto branches = manifest.at("branches").get<std::size_t>();
    const auto alpha = manifest.at("alpha").get<double>();
    const auto epsilon = manifest.at("epsilon").get<double>();
    const auto names = manifest.at("blocks").get<std::vector<std::string>>();
    std::size_t next = 0;
    auto read_named = [&](const std::string& want) {
      if (next >= names.size() || names[next] != want) fail(ErrorKind::format, "checkpoint: expected block " + want);
      ++next;
      return read_cdt1(is);
    };
    std::array<ConvLayer<T>, kNumTaps + 1> convs;
    for (std::size_t i = 0; i <= kNumTaps; ++i) {
      convs[i].weights = block_to_tensor<T>(read_named(block_name("conv", i) + ".weights"));
      convs[i].bias = block_to_vector<T>(read_named(block_name("conv", i) + ".bias"));
      convs[i].stride = i < kNumTaps ? kStrides[i] : 1;
      convs[i].padding = i < kNumTaps ? 1 : 0;
    }
    require(convs[kNumTaps].weights.shape().n == classes, ErrorKind::format, "checkpoint: class count mismatch");
    std::array<BnBranchBank<T>, kNumTaps> banks;
    for (std::size_t i = 0; i < kNumTaps; ++i) {
      ChannelStats src;
      src.means = block_to_vector<double>(read_named(block_name("bn", i) + ".source_mean"));
      src.vars = block_to_vector<double>(read_named(block_name("bn", i) + ".source_var"));
      std::vector<AffineParams<T>> branch_params(branches);
      for (std::size_t k = 0; k < branches; ++k) {
        branch_params[k].gamma =
            block_to_vector<T>(read_named(block_name("bn", i) + ".branch" + std::to_string(k) + ".gamma"));
        branch_params[k].beta =
            block_to_vector<T>(read_named(block_name("bn", i) + ".branch" + std::to_string(k) + ".beta"));
      }
      banks[i] = BnBranchBank<T>::from_parts(std::move(src), std::move(branch_params), alpha, epsilon);
    }
    return SegNet<T>(std::move(convs), std::move(banks));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("checkpoint: malformed manifest: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::format) throw;
    fail(ErrorKind::format, std::string("checkpoint: inconsistent contents: ") + e.what());
  }
}

template <typename T>
SegNet<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::data, "load_checkpoint: cannot open '" + path + "'");
  return load_checkpoint<T>(is);
}

#define CDTTA_INSTANTIATE_NET(T)                                                    \
  template class SegNet<T>;                                                         \
  template LabelMap argmax_labels(const BasicTensor<T>&);                           \
  template LabelMap predict(const SegNet<T>&, const BasicTensor<T>&, std::size_t); \
  template void save_checkpoint(const SegNet<T>&, std::ostream&);                   \
  template void save_checkpoint(const SegNet<T>&, const std::string&);              \
  template SegNet<T> load_checkpoint<T>(std::istream&);                             \
  template SegNet<T> load_checkpoint<T>(const std::string&);

CDTTA_INSTANTIATE_NET(float)
CDTTA_INSTANTIATE_NET(double)

}  // namespace cdtta
