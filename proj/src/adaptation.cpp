#include "cdtta/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "cdtta/metrics.hpp"

namespace cdtta {

std::string_view to_string(BranchMode m) noexcept {
  switch (m) {
    case BranchMode::pseudo: return "pseudo";
    case BranchMode::oracle: return "oracle";
    case BranchMode::compound: return "compound";
  }
  return "unknown";
}

BranchMode parse_branch_mode(std::string_view name) {
  for (BranchMode m : {BranchMode::pseudo, BranchMode::oracle, BranchMode::compound})
    if (to_string(m) == name) return m;
  fail(ErrorKind::invalid_config,
       "unknown branch mode '" + std::string(name) + "' (expected pseudo, oracle or compound)");
}

void AdaptConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::invalid_config, msg); };
  check(alpha >= 0 && alpha <= 1, "alpha must lie in [0, 1]");
  check(eta >= 0 && eta <= 1, "eta must lie in [0, 1]");
  check(delta >= 0 && std::isfinite(delta), "delta must be a finite value >= 0");
  check(clusters >= 1 && clusters <= 64, "k must lie in [1, 64]");
  check(learning_rate >= 0 && std::isfinite(learning_rate), "lr must be a finite value >= 0");
  check(batch_size >= 1, "batch_size must be >= 1");
  check(!clustering_layers.empty(), "clustering_layers must not be empty");
  check(!denoise_layers.empty(), "denoise_layers must not be empty");
  for (auto t : clustering_layers) check(t < kNumTaps, "clustering_layers: tap index out of range");
  for (auto t : denoise_layers) check(t < kNumTaps, "denoise_layers: tap index out of range");
  check(std::isfinite(seed_threshold), "seed_threshold must be finite");
}

nlohmann::ordered_json to_json(const AdaptConfig& cfg) {
  auto taps = [](const std::vector<std::size_t>& v) {
    std::vector<std::string> out;
    for (auto t : v) out.emplace_back(kTapNames[t]);
    return out;
  };
  return {{"alpha", cfg.alpha},
          {"eta", cfg.eta},
          {"delta", cfg.delta},
          {"k", cfg.clusters},
          {"lr", cfg.learning_rate},
          {"batch_size", cfg.batch_size},
          {"loss", to_string(cfg.loss)},
          {"clustering_layers", taps(cfg.clustering_layers)},
          {"denoise_layers", taps(cfg.denoise_layers)},
          {"metric", to_string(cfg.metric)},
          {"seed_threshold", cfg.seed_threshold},
          {"seed", cfg.seed},
          {"branch_mode", to_string(cfg.mode)}};
}

// --- pretraining ---

namespace {

template <typename T>
void sgd(std::span<T> params, std::span<const T> grads, T lr) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

LabelMap gather_labels(const LabelMap& src, std::span<const std::size_t> idx) {
  LabelMap out{idx.size(), src.h, src.w, std::vector<std::uint8_t>(idx.size() * src.plane())};
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(src.sample(idx[i]).begin(), src.sample(idx[i]).end(), out.sample(i).begin());
  return out;
}

}  // namespace

PretrainResult pretrain(const Tensor& images, const LabelMap& labels, const PretrainConfig& cfg) {
  const std::size_t n = images.shape().n;
  require(n > 0, ErrorKind::invalid_config, "pretrain: empty dataset");
  require(labels.n == n && labels.h == images.shape().h && labels.w == images.shape().w, ErrorKind::invalid_shape,
          "pretrain: labels do not match images");
  require(cfg.epochs >= 1 && cfg.batch_size >= 1 && cfg.learning_rate > 0, ErrorKind::invalid_config,
          "pretrain: epochs, batch_size and lr must be positive");
  for (auto v : labels.data)
    require(v < cfg.classes, ErrorKind::data, "pretrain: label " + std::to_string(v) + " out of range");

  SegNet<float> net = SegNet<float>::create({cfg.classes, 1, 1.0, kBnEpsilon}, cfg.seed);
  std::array<ChannelStats, kNumTaps> running;
  for (std::size_t i = 0; i < kNumTaps; ++i) running[i] = net.bn(i).source();
  const float lr = static_cast<float>(cfg.learning_rate);

  PretrainResult out;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg.seed, 17, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    std::size_t pixels = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      std::span<const std::size_t> idx(order.data() + start, len);
      const Tensor batch = gather_samples(images, idx);
      const LabelMap y = gather_labels(labels, idx);
      auto fw = net.forward_train(batch);

      const Shape s = fw.probs.shape();
      const std::size_t plane = s.plane();
      Tensor grad(s);
      const double inv = 1.0 / static_cast<double>(len * plane);
      for (std::size_t b = 0; b < len; ++b) {
        const float* p = fw.probs.sample(b).data();
        float* g = grad.sample(b).data();
        const auto lab = y.sample(b);
        for (std::size_t i = 0; i < plane; ++i) {
          total -= std::log(std::max(static_cast<double>(p[lab[i] * plane + i]), 1e-12));
          for (std::size_t c = 0; c < s.c; ++c) {
            const double target = c == lab[i] ? 1.0 : 0.0;
            g[c * plane + i] = static_cast<float>((static_cast<double>(p[c * plane + i]) - target) * inv);
          }
        }
      }
      pixels += len * plane;

      const auto grads = net.backward_full(grad, fw.trace);
      for (std::size_t i = 0; i <= kNumTaps; ++i) {
        auto& layer = net.conv_params(i);
        sgd<float>(layer.weights.data(), grads.conv[i].weights.data(), lr);
        sgd<float>(layer.bias, grads.conv[i].bias, lr);
      }
      for (std::size_t i = 0; i < kNumTaps; ++i) {
        auto& affine = net.bn_params(i).branch_params(0);
        sgd<float>(affine.gamma, grads.gamma[i], lr);
        sgd<float>(affine.beta, grads.beta[i], lr);
        update_running_stats(running[i], fw.batch_stats[i], cfg.bn_momentum);
      }
    }
    const double mean = total / static_cast<double>(pixels);
    if (!std::isfinite(mean)) fail(ErrorKind::numeric, "pretrain: loss became non-finite");
    out.epoch_loss.push_back(mean);
  }

  std::array<ConvLayer<float>, kNumTaps + 1> convs;
  std::array<BnBranchBank<float>, kNumTaps> banks;
  for (std::size_t i = 0; i <= kNumTaps; ++i) convs[i] = net.conv(i);
  for (std::size_t i = 0; i < kNumTaps; ++i)
    banks[i] = BnBranchBank<float>::from_parts(running[i], net.bn(i).branches(), kDefaultAlpha, kBnEpsilon);
  out.net = SegNet<float>(std::move(convs), std::move(banks));
  return out;
}

// --- adaptation ---

Adapter::Adapter(const SegNet<float>& source, AdaptConfig cfg)
    : net_(source.with_branches(cfg.clusters, cfg.alpha)),
      bank_(cfg.clusters, cfg.eta, cfg.metric, cfg.seed_threshold),
      cfg_(std::move(cfg)) {
  cfg_.validate();
  for (std::size_t i = 0; i < kNumTaps; ++i) source_stats_[i] = net_.bn(i).source();
  clustering_depth_ = *std::max_element(cfg_.clustering_layers.begin(), cfg_.clustering_layers.end()) + 1;
}

std::vector<DomainFeature> Adapter::features(const Tensor& batch) const {
  return make_features(net_.forward_taps(batch, last_branch_, clustering_depth_), cfg_.clustering_layers);
}

std::size_t Adapter::select_branch(const DomainFeature& feature) const {
  return bank_.initialized() == 0 ? 0 : bank_.nearest(feature);
}

StepOutput Adapter::step(const Tensor& batch, std::span<const std::size_t> sample_ids, std::span<const int> oracle) {
  const std::size_t n = batch.shape().n;
  require(sample_ids.size() == n, ErrorKind::invalid_shape, "Adapter::step: one sample id per image required");

  StepOutput out;
  auto& rec = out.record;
  rec.step = step_++;
  rec.samples.assign(sample_ids.begin(), sample_ids.end());
  rec.branches.resize(n);
  switch (cfg_.mode) {
    case BranchMode::pseudo: {
      const auto feats = features(batch);
      for (std::size_t i = 0; i < n; ++i) rec.branches[i] = bank_.assign_and_update(feats[i]);
      break;
    }
    case BranchMode::oracle:
      require(oracle.size() == n, ErrorKind::invalid_config, "oracle mode needs the true domain of every sample");
      for (std::size_t i = 0; i < n; ++i) {
        require(oracle[i] >= 0 && static_cast<std::size_t>(oracle[i]) < cfg_.clusters, ErrorKind::invalid_config,
                "oracle mode: domain id " + std::to_string(oracle[i]) + " needs k > id");
        rec.branches[i] = static_cast<std::size_t>(oracle[i]);
      }
      break;
    case BranchMode::compound:
      std::fill(rec.branches.begin(), rec.branches.end(), 0);
      break;
  }

  rec.loss.resize(n);
  rec.weight.resize(n);
  rec.scale.resize(n);
  rec.entropy.resize(n);
  rec.max_prob.resize(n);
  out.predictions = LabelMap{n, batch.shape().h, batch.shape().w,
                             std::vector<std::uint8_t>(n * batch.shape().plane())};
  const DenoiseConfig dcfg{cfg_.delta, cfg_.denoise_layers};
  const float lr = static_cast<float>(cfg_.learning_rate);

  for (std::size_t k = 0; k < cfg_.clusters; ++k) {
    std::vector<std::size_t> group;
    for (std::size_t i = 0; i < n; ++i)
      if (rec.branches[i] == k) group.push_back(i);
    if (group.empty()) continue;
    const Tensor sub = gather_samples(batch, group);
    auto fw = net_.forward_with_taps(sub, k);
    auto loss = unsupervised_loss(cfg_.loss, fw.probs);
    const auto w = denoise_weight(fw.taps, source_stats_, dcfg);
    const auto obj = weighted_objective(loss.per_sample, w, cfg_.delta);
    const auto ent = mean_entropy(fw.probs);
    const auto mp = mean_max_probability(fw.probs);
    const auto pred = argmax_labels(fw.probs);
    for (std::size_t j = 0; j < group.size(); ++j) {
      const std::size_t i = group[j];
      rec.loss[i] = loss.per_sample[j];
      rec.weight[i] = w[j];
      rec.scale[i] = obj.scales[j];
      rec.entropy[i] = ent[j];
      rec.max_prob[i] = mp[j];
      std::copy(pred.sample(j).begin(), pred.sample(j).end(), out.predictions.sample(i).begin());
    }
    apply_sample_scales(loss.logits_grad, obj.scales);
    const auto g = net_.backward_affine_only(loss.logits_grad, fw.trace);
    for (std::size_t t = 0; t < kNumTaps; ++t) {
      for (float v : g.gamma[t])
        if (!std::isfinite(v)) fail(ErrorKind::numeric, "adaptation: non-finite gradient");
      auto& affine = net_.bn_params(t).branch_params(k);
      sgd<float>(affine.gamma, g.gamma[t], lr);
      sgd<float>(affine.beta, g.beta[t], lr);
    }
    last_branch_ = k;
  }
  return out;
}

namespace {

double affine_distance(const SegNet<float>& a, const SegNet<float>& b, std::size_t branch) {
  double d = 0;
  for (std::size_t t = 0; t < kNumTaps; ++t) {
    const auto& x = a.bn(t).branch(branch);
    const auto& y = b.bn(t).branch(branch);
    for (std::size_t c = 0; c < x.gamma.size(); ++c)
      d += std::abs(static_cast<double>(x.gamma[c]) - y.gamma[c]) + std::abs(static_cast<double>(x.beta[c]) - y.beta[c]);
  }
  return d;
}

}  // namespace

RunResult run_stream(const SegNet<float>& source, const ImageStream& stream, const AdaptConfig& cfg,
                     std::span<const int> oracle) {
  Adapter adapter(source, cfg);
  const SegNet<float> initial = adapter.net();
  const std::size_t n = stream.size();
  if (cfg.mode == BranchMode::oracle)
    require(oracle.size() == n, ErrorKind::invalid_config, "oracle mode needs one true domain per stream sample");
  const Shape s = stream.images.shape();
  LabelMap preds{n, s.h, s.w, std::vector<std::uint8_t>(n * s.plane())};
  AdaptReport report;
  report.config = cfg;
  std::vector<std::size_t> ids;
  for (std::size_t start = 0; start < n; start += cfg.batch_size) {
    const std::size_t len = std::min(cfg.batch_size, n - start);
    ids.resize(len);
    std::iota(ids.begin(), ids.end(), start);
    const Tensor batch = gather_samples(stream.images, ids);
    auto step = adapter.step(batch, ids,
                             cfg.mode == BranchMode::oracle ? oracle.subspan(start, len) : std::span<const int>{});
    std::copy(step.predictions.data.begin(), step.predictions.data.end(), preds.sample(start).begin());
    report.steps.push_back(std::move(step.record));
  }
  for (std::size_t k = 0; k < cfg.clusters; ++k) report.param_delta.push_back(affine_distance(initial, adapter.net(), k));
  report.cluster_counts = adapter.bank().counts();
  return {std::move(report), std::move(adapter), std::move(preds)};
}

BaselineResult run_alpha_bn_baseline(const SegNet<float>& source, const ImageStream& stream, double alpha,
                                     double learning_rate, std::size_t batch_size) {
  require(batch_size >= 1, ErrorKind::invalid_config, "baseline: batch_size must be >= 1");
  BaselineResult r{source.with_branches(1, alpha), {}, {}};
  const std::size_t n = stream.size();
  const Shape s = stream.images.shape();
  r.predictions = LabelMap{n, s.h, s.w, std::vector<std::uint8_t>(n * s.plane())};
  const float lr = static_cast<float>(learning_rate);
  std::vector<std::size_t> ids;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t len = std::min(batch_size, n - start);
    ids.resize(len);
    std::iota(ids.begin(), ids.end(), start);
    auto fw = r.net.forward_with_taps(gather_samples(stream.images, ids), 0);
    auto loss = entropy_loss(fw.probs);
    const auto pred = argmax_labels(fw.probs);
    std::copy(pred.data.begin(), pred.data.end(), r.predictions.sample(start).begin());
    r.loss.insert(r.loss.end(), loss.per_sample.begin(), loss.per_sample.end());
    for (std::size_t i = 0; i < len; ++i) {
      const float f = static_cast<float>(1.0 / static_cast<double>(len));
      for (auto& v : loss.logits_grad.sample(i)) v *= f;
    }
    const auto g = r.net.backward_affine_only(loss.logits_grad, fw.trace);
    for (std::size_t t = 0; t < kNumTaps; ++t) {
      auto& affine = r.net.bn_params(t).branch_params(0);
      sgd<float>(affine.gamma, g.gamma[t], lr);
      sgd<float>(affine.beta, g.beta[t], lr);
    }
  }
  return r;
}

std::vector<double> sample_accuracy(const LabelMap& pred, const LabelMap& gt) {
  require(pred.n == gt.n && pred.plane() == gt.plane(), ErrorKind::invalid_shape, "sample_accuracy: shape mismatch");
  std::vector<double> out(pred.n);
  for (std::size_t i = 0; i < pred.n; ++i) {
    const auto p = pred.sample(i), g = gt.sample(i);
    std::size_t hit = 0;
    for (std::size_t j = 0; j < p.size(); ++j) hit += p[j] == g[j];
    out[i] = pred.plane() == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.plane());
  }
  return out;
}

EvalResult evaluate(const Adapter& adapter, const StreamData& eval, const std::vector<DomainSpec>& specs) {
  const auto& cfg = adapter.config();
  const auto& net = adapter.net();
  const std::size_t classes = net.classes();
  const std::size_t branches = net.branch_count();
  std::vector<int> domain_ids;
  for (int d : eval.truth.domains)
    if (std::find(domain_ids.begin(), domain_ids.end(), d) == domain_ids.end()) domain_ids.push_back(d);
  std::sort(domain_ids.begin(), domain_ids.end());

  EvalResult r;
  r.sample_accuracy.assign(eval.stream.size(), 0.0);
  std::vector<std::vector<ConfusionMatrix>> cm(branches,
                                               std::vector<ConfusionMatrix>(domain_ids.size(), ConfusionMatrix(classes)));
  std::vector<ConfusionMatrix> chosen(domain_ids.size(), ConfusionMatrix(classes));
  for (std::size_t d = 0; d < domain_ids.size(); ++d) {
    const int dom = domain_ids[d];
    r.domains.push_back(dom >= 0 && static_cast<std::size_t>(dom) < specs.size() ? specs[dom].name
                                                                                 : std::to_string(dom));
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < eval.truth.domains.size(); ++i)
      if (eval.truth.domains[i] == dom) members.push_back(i);
    for (std::size_t start = 0; start < members.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, members.size() - start);
      std::span<const std::size_t> idx(members.data() + start, len);
      const Tensor batch = gather_samples(eval.stream.images, idx);
      std::vector<std::size_t> pick(len, 0);
      if (cfg.mode == BranchMode::pseudo) {
        const auto feats = adapter.features(batch);
        for (std::size_t i = 0; i < len; ++i) pick[i] = adapter.select_branch(feats[i]);
      } else if (cfg.mode == BranchMode::oracle) {
        require(dom >= 0 && static_cast<std::size_t>(dom) < branches, ErrorKind::invalid_config,
                "evaluate: oracle mode has no branch for domain " + std::to_string(dom));
        std::fill(pick.begin(), pick.end(), static_cast<std::size_t>(dom));
      }
      for (std::size_t k = 0; k < branches; ++k) {
        const LabelMap pred = predict(net, batch, k);
        for (std::size_t i = 0; i < len; ++i) cm[k][d].update(pred.sample(i), eval.truth.labels.sample(idx[i]));
      }
      // Selected-branch predictions, with per-branch batches so the target statistics
      // come only from samples routed to the same branch.
      for (std::size_t k = 0; k < branches; ++k) {
        std::vector<std::size_t> group, global;
        for (std::size_t i = 0; i < len; ++i)
          if (pick[i] == k) {
            group.push_back(i);
            global.push_back(idx[i]);
          }
        if (group.empty()) continue;
        const LabelMap pred = predict(net, gather_samples(batch, group), k);
        for (std::size_t j = 0; j < group.size(); ++j) {
          const auto gt = eval.truth.labels.sample(global[j]);
          chosen[d].update(pred.sample(j), gt);
          std::size_t hit = 0;
          for (std::size_t p = 0; p < gt.size(); ++p) hit += pred.sample(j)[p] == gt[p];
          r.sample_accuracy[global[j]] = static_cast<double>(hit) / static_cast<double>(gt.size());
        }
      }
    }
  }
  r.matrix.assign(branches, std::vector<double>(domain_ids.size(), 0.0));
  for (std::size_t k = 0; k < branches; ++k)
    for (std::size_t d = 0; d < domain_ids.size(); ++d) r.matrix[k][d] = miou(cm[k][d]).miou;
  for (std::size_t d = 0; d < domain_ids.size(); ++d) r.selected.push_back(miou(chosen[d]).miou);
  r.mean_selected = r.selected.empty()
                        ? 0.0
                        : std::accumulate(r.selected.begin(), r.selected.end(), 0.0) / static_cast<double>(r.selected.size());
  return r;
}

void annotate(AdaptReport& report, const GroundTruth& truth, const LabelMap& predictions, std::size_t classes) {
  std::vector<std::size_t> pseudo, actual;
  for (auto& rec : report.steps) {
    rec.true_domains.clear();
    for (std::size_t j = 0; j < rec.samples.size(); ++j) {
      const int d = truth.domains.at(rec.samples[j]);
      rec.true_domains.push_back(d);
      pseudo.push_back(rec.branches[j]);
      actual.push_back(static_cast<std::size_t>(d));
    }
  }
  std::map<int, ConfusionMatrix> per_domain;
  for (std::size_t i = 0; i < predictions.n; ++i) {
    auto [it, _] = per_domain.try_emplace(truth.domains[i], classes);
    it->second.update(predictions.sample(i), truth.labels.sample(i));
  }
  report.stream_miou.clear();
  for (const auto& [d, cm] : per_domain) report.stream_miou[d] = miou(cm).miou;
  report.purity = purity(pseudo, actual);
  report.true_agreement = label_agreement(pseudo, actual);
}

nlohmann::ordered_json to_json(const AdaptReport& report) {
  nlohmann::ordered_json j;
  j["config"] = to_json(report.config);
  j["steps"] = report.steps.size();
  std::size_t samples = 0;
  double entropy = 0, loss = 0;
  for (const auto& r : report.steps) {
    samples += r.samples.size();
    for (double v : r.entropy) entropy += v;
    for (double v : r.loss) loss += v;
  }
  j["samples"] = samples;
  j["mean_loss"] = samples ? loss / static_cast<double>(samples) : 0.0;
  j["mean_entropy"] = samples ? entropy / static_cast<double>(samples) : 0.0;
  j["param_delta"] = report.param_delta;
  j["cluster_counts"] = report.cluster_counts;
  nlohmann::ordered_json stream = nlohmann::ordered_json::object();
  for (const auto& [d, v] : report.stream_miou) stream[std::to_string(d)] = v;
  j["stream_miou"] = stream;
  j["purity"] = report.purity;
  j["true_domain_agreement"] = report.true_agreement;
  if (report.eval) {
    const auto& e = *report.eval;
    j["eval"] = {{"domains", e.domains},
                 {"matrix", e.matrix},
                 {"selected", e.selected},
                 {"mean_selected", e.mean_selected}};
  }
  return j;
}

void write_steps_csv(const AdaptReport& report, std::ostream& os) {
  os << "step,sample,true_domain,pseudo_label,loss,weight,scale,entropy,max_prob\n";
  os.precision(17);
  for (const auto& r : report.steps)
    for (std::size_t j = 0; j < r.samples.size(); ++j) {
      os << r.step << ',' << r.samples[j] << ',';
      if (j < r.true_domains.size()) os << r.true_domains[j];
      os << ',' << r.branches[j] << ',' << r.loss[j] << ',' << r.weight[j] << ',' << r.scale[j] << ','
         << r.entropy[j] << ',' << r.max_prob[j] << '\n';
    }
}

}  // namespace cdtta
