#include "cdtta/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "cdtta/adaptation.hpp"
#include "cdtta/analysis.hpp"
#include "cdtta/digest.hpp"
#include "cdtta/metrics.hpp"
#include "json.hpp"

#ifndef CDTTA_VERSION
#define CDTTA_VERSION "unknown"
#endif

namespace cdtta::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_config:
    case ErrorKind::invalid_branch:
      return kExitConfig;
    case ErrorKind::numeric:
      return kExitNumeric;
    case ErrorKind::stale_context:
      return 1;
    default:
      return kExitData;
  }
}

namespace {

// --- parameters: defaults <- config file <- flags ---

struct Param {
  std::string key;
  std::string flag;
  std::string help;
  json value;  // default; its JSON type fixes the accepted type
};

std::vector<Param> data_params() {
  return {
      {"data.seed", "--seed", "generator seed", 0u},
      {"data.height", "--height", "image height", 64u},
      {"data.width", "--width", "image width", 64u},
      {"data.classes", "--classes", "number of classes", 5u},
      {"data.domains", "--domains", "stream domains (comma separated)", json::array({"day", "night", "rain"})},
      {"data.stream_length", "--stream-length", "stream samples", 6000u},
      {"data.segment_length", "--segment-length", "samples per stream segment", 40u},
      {"data.order", "--order", "segment order: cyclic or random", "cyclic"},
      {"data.eval_per_domain", "--eval-per-domain", "held-out samples per domain", 100u},
      {"data.source_train", "--source-train", "source training samples", 400u},
      {"data.source_val", "--source-val", "source validation samples", 200u},
  };
}

std::vector<Param> pretrain_params() {
  return {
      {"pretrain.epochs", "--epochs", "training epochs", 6u},
      {"pretrain.lr", "--lr", "SGD learning rate", 0.1},
      {"pretrain.batch_size", "--batch-size", "mini-batch size", 8u},
      {"pretrain.bn_momentum", "--bn-momentum", "running statistics momentum", 0.1},
      {"pretrain.seed", "--seed", "initialisation and shuffling seed", 0u},
  };
}

std::vector<Param> adapt_params() {
  const AdaptConfig d;
  return {
      {"adapt.loss", "--loss", "entropy, max_squares or pseudo_label", "entropy"},
      {"adapt.alpha", "--alpha", "source/target statistics mix", d.alpha},
      {"adapt.eta", "--eta", "centroid EMA momentum", d.eta},
      {"adapt.delta", "--delta", "denoising exponent", d.delta},
      {"adapt.k", "--k", "number of branches / clusters", d.clusters},
      {"adapt.lr", "--lr", "affine SGD learning rate", d.learning_rate},
      {"adapt.batch_size", "--batch-size", "stream batch size", d.batch_size},
      {"adapt.branch_mode", "--branch-mode", "pseudo, oracle or compound", "pseudo"},
      {"adapt.metric", "--metric", "bhattacharyya, euclidean, wasserstein2 or stats_divergence", "bhattacharyya"},
      {"adapt.clustering_layers", "--clustering-layers", "taps used for clustering", json::array({"t0"})},
      {"adapt.denoise_layers", "--denoise-layers", "taps used for the denoising weight",
       json::array({"t0", "t1", "t2", "t3"})},
      {"adapt.seed_threshold", "--seed-threshold", "novelty gate for seeding clusters (< 0: first K)",
       d.seed_threshold},
      {"adapt.stream_limit", "--stream-limit", "use only the first N stream samples (0 = all)", 0u},
      {"adapt.seed", "--seed", "run seed", 0u},
  };
}

std::vector<Param> analyze_params() {
  return {
      {"analyze.alpha", "--alpha", "statistics mix for the analysis forward pass", kDefaultAlpha},
      {"analyze.batch_size", "--batch-size", "batch size (batches never mix domains)", 4u},
      {"analyze.split", "--split", "dataset split to analyse", "eval"},
      {"analyze.denoise_layers", "--denoise-layers", "taps for the similarity signal",
       json::array({"t0", "t1", "t2", "t3"})},
      {"analyze.seed", "--seed", "offline k-means seed", 0u},
  };
}

std::set<std::string> all_keys() {
  std::set<std::string> keys;
  for (const auto& list : {data_params(), pretrain_params(), adapt_params(), analyze_params()})
    for (const auto& p : list) keys.insert(p.key);
  return keys;
}

json read_config_file(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), ErrorKind::invalid_config, "cannot read config file '" + path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    fail(ErrorKind::invalid_config, "config file '" + path + "': " + e.what());
  }
  require(j.is_object(), ErrorKind::invalid_config, "config file '" + path + "' must hold a JSON object");
  const auto known = all_keys();
  for (const auto& [k, v] : j.items())
    require(known.count(k) || k.rfind("domain.", 0) == 0, ErrorKind::invalid_config,
            "config file: unknown key '" + k + "'");
  return j;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(',', start);
    const auto item = s.substr(start, pos == std::string::npos ? std::string::npos : pos - start);
    if (!item.empty()) out.push_back(item);
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

json coerce(const Param& p, const json& v) {
  const auto bad = [&]() -> json {
    fail(ErrorKind::invalid_config, p.key + ": expected " + std::string(p.value.type_name()) + ", got " + v.dump());
  };
  if (p.value.is_number_unsigned()) {
    if (v.is_number_unsigned()) return v;
    if (v.is_number_integer() && v.get<long long>() >= 0) return v.get<unsigned long long>();
    return bad();
  }
  if (p.value.is_number()) return v.is_number() ? json(v.get<double>()) : bad();
  if (p.value.is_string()) return v.is_string() ? v : bad();
  if (p.value.is_array()) {
    if (!v.is_array()) return bad();
    for (const auto& e : v)
      if (!e.is_string()) return bad();
    return v;
  }
  return bad();
}

json parse_flag(const Param& p, const std::string& text) {
  try {
    if (p.value.is_number_unsigned()) {
      require(!text.empty() && text.find_first_not_of("0123456789") == std::string::npos, ErrorKind::invalid_config,
              p.key + ": expected a non-negative integer, got '" + text + "'");
      return std::stoull(text);
    }
    if (p.value.is_number()) {
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      require(used == text.size(), ErrorKind::invalid_config, p.key + ": expected a number, got '" + text + "'");
      return v;
    }
  } catch (const std::logic_error&) {
    fail(ErrorKind::invalid_config, p.key + ": cannot parse '" + text + "'");
  }
  if (p.value.is_array()) return split_list(text);
  return text;
}

// Effective configuration for one command.
class Settings {
 public:
  Settings(std::vector<Param> params, CLI::App* app) : params_(std::move(params)) {
    for (const auto& p : params_) app->add_option(p.flag, raw_[p.key], p.help + " [" + p.key + "]");
  }

  void resolve(const json& file, CLI::App* app) {
    for (const auto& p : params_) {
      json v = p.value;
      if (file.contains(p.key)) v = coerce(p, file.at(p.key));
      if (app->count(p.flag) > 0) v = parse_flag(p, raw_.at(p.key));
      values_[p.key] = v;
    }
  }

  const json& at(const std::string& key) const { return values_.at(key); }
  std::uint64_t uint(const std::string& key) const { return at(key).get<std::uint64_t>(); }
  double num(const std::string& key) const { return at(key).get<double>(); }
  std::string str(const std::string& key) const { return at(key).get<std::string>(); }
  std::vector<std::string> list(const std::string& key) const { return at(key).get<std::vector<std::string>>(); }
  const json& effective() const { return values_; }

 private:
  std::vector<Param> params_;
  std::map<std::string, std::string> raw_;
  json values_ = json::object();
};

// Re-raises with the offending key prefixed.
template <typename F>
auto keyed(const std::string& key, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    fail(e.kind(), key + ": " + e.what());
  }
}

void prepare_output_dir(const std::string& dir, bool force) {
  if (fs::exists(dir)) {
    require(force, ErrorKind::invalid_config, "output path '" + dir + "' exists (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
  require(os.good(), ErrorKind::data, "failed writing '" + p.string() + "'");
}

json report_header(const std::string& command, const Settings& s) {
  return {{"tool", "cdtta"}, {"version", CDTTA_VERSION}, {"command", command}, {"config", s.effective()}};
}

std::vector<DomainSpec> domain_specs(const json& file) {
  auto specs = builtin_domains();
  for (const auto& [key, value] : file.items()) {
    if (key.rfind("domain.", 0) != 0) continue;
    const auto dot = key.find('.', 7);
    require(dot != std::string::npos && dot > 7, ErrorKind::invalid_config,
            key + ": expected domain.<name>.<field>");
    const std::string name = key.substr(7, dot - 7);
    const std::string field = key.substr(dot + 1);
    auto it = std::find_if(specs.begin(), specs.end(), [&](const DomainSpec& d) { return d.name == name; });
    if (it == specs.end()) {
      specs.push_back(DomainSpec{name});
      it = specs.end() - 1;
    }
    auto number = [&]() {
      require(value.is_number(), ErrorKind::invalid_config, key + ": expected a number");
      return value.get<double>();
    };
    if (field == "brightness_gain") {
      it->brightness_gain = number();
    } else if (field == "contrast") {
      it->contrast = number();
    } else if (field == "noise_std") {
      it->noise_std = number();
    } else if (field == "tint") {
      require(value.is_array() && value.size() == 3 && value[0].is_number() && value[1].is_number() &&
                  value[2].is_number(),
              ErrorKind::invalid_config, key + ": expected an array of three numbers");
      it->tint = value.get<std::array<double, 3>>();
    } else {
      fail(ErrorKind::invalid_config,
           key + ": unknown field '" + field + "' (expected brightness_gain, contrast, noise_std or tint)");
    }
  }
  for (const auto& s : specs) keyed("domain." + s.name, [&] { validate(s); });
  return specs;
}

// --- commands ---

struct Common {
  std::string config;
  std::string out;
  bool force = false;
};

int cmd_gen_data(const Settings& s, const json& file, const Common& c, std::ostream& out) {
  const auto all = domain_specs(file);
  DatasetConfig dc;
  dc.seed = s.uint("data.seed");
  dc.scene = SceneConfig{s.uint("data.height"), s.uint("data.width"), s.uint("data.classes")};
  dc.stream_domains.clear();
  for (const auto& n : s.list("data.domains")) {
    auto it = std::find_if(all.begin(), all.end(), [&](const DomainSpec& d) { return d.name == n; });
    require(it != all.end(), ErrorKind::invalid_config, "data.domains: unknown domain '" + n + "'");
    dc.stream_domains.push_back(*it);
  }
  const std::string order = s.str("data.order");
  require(order == "cyclic" || order == "random", ErrorKind::invalid_config,
          "data.order: expected cyclic or random, got '" + order + "'");
  dc.random_order = order == "random";
  dc.stream_length = s.uint("data.stream_length");
  dc.segment_length = s.uint("data.segment_length");
  dc.eval_per_domain = s.uint("data.eval_per_domain");
  dc.source_train = s.uint("data.source_train");
  dc.source_val = s.uint("data.source_val");
  const Dataset ds = keyed("data", [&] { return make_dataset(dc); });
  write_dataset(ds, c.out, c.force);
  json summary = report_header("gen-data", s);
  for (const auto& sp : ds.splits) summary["splits"][sp.name] = sp.data.manifest.size();
  out << summary.dump(2) << "\n" << "digest " << directory_digest(c.out) << "\n";
  return kExitOk;
}

int cmd_pretrain(const Settings& s, const Common& c, const std::string& data, std::ostream& out) {
  const Dataset ds = read_dataset(data);
  const auto& train = ds.split("source_train").data;
  const auto& val = ds.split("source_val").data;
  PretrainConfig pc;
  pc.epochs = s.uint("pretrain.epochs");
  pc.learning_rate = s.num("pretrain.lr");
  pc.batch_size = s.uint("pretrain.batch_size");
  pc.bn_momentum = s.num("pretrain.bn_momentum");
  pc.seed = s.uint("pretrain.seed");
  pc.classes = ds.scene.classes;
  require(pc.bn_momentum > 0 && pc.bn_momentum <= 1, ErrorKind::invalid_config,
          "pretrain.bn_momentum: must lie in (0, 1]");
  prepare_output_dir(c.out, c.force);
  const auto res = pretrain(train.stream.images, train.truth.labels, pc);

  ConfusionMatrix cm(ds.scene.classes);
  for (std::size_t start = 0; start < val.stream.size(); start += pc.batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(start + pc.batch_size, val.stream.size()); ++i) idx.push_back(i);
    const auto pred = argmax_labels(res.net.forward_source(gather_samples(val.stream.images, idx)));
    for (std::size_t j = 0; j < idx.size(); ++j) cm.update(pred.sample(j), val.truth.labels.sample(idx[j]));
  }
  const double val_miou = val.stream.size() ? miou(cm).miou : 0.0;

  const fs::path dir(c.out);
  save_checkpoint(res.net, (dir / "source.ckpt").string());
  std::ostringstream curve;
  curve.precision(17);
  curve << "epoch,train_loss\n";
  for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) curve << e + 1 << ',' << res.epoch_loss[e] << '\n';
  write_text(dir / "curve.csv", curve.str());
  json summary = report_header("pretrain", s);
  summary["dataset_manifest_sha256"] = file_digest((fs::path(data) / "manifest.json").string());
  summary["epoch_loss"] = res.epoch_loss;
  summary["source_val_miou"] = val_miou;
  summary["checkpoint_sha256"] = file_digest((dir / "source.ckpt").string());
  write_text(dir / "pretrain.json", summary.dump(2) + "\n");
  out << "source validation mIoU " << val_miou << "\n";
  return kExitOk;
}

AdaptConfig adapt_config(const Settings& s) {
  AdaptConfig cfg;
  cfg.loss = keyed("adapt.loss", [&] { return parse_loss(s.str("adapt.loss")); });
  cfg.alpha = s.num("adapt.alpha");
  cfg.eta = s.num("adapt.eta");
  cfg.delta = s.num("adapt.delta");
  cfg.clusters = s.uint("adapt.k");
  cfg.learning_rate = s.num("adapt.lr");
  cfg.batch_size = s.uint("adapt.batch_size");
  cfg.mode = keyed("adapt.branch_mode", [&] { return parse_branch_mode(s.str("adapt.branch_mode")); });
  cfg.metric = keyed("adapt.metric", [&] { return parse_metric(s.str("adapt.metric")); });
  cfg.clustering_layers =
      keyed("adapt.clustering_layers", [&] { return parse_tap_set(s.list("adapt.clustering_layers")); });
  cfg.denoise_layers = keyed("adapt.denoise_layers", [&] { return parse_tap_set(s.list("adapt.denoise_layers")); });
  cfg.seed_threshold = s.num("adapt.seed_threshold");
  cfg.seed = s.uint("adapt.seed");
  keyed("adapt", [&] { cfg.validate(); });
  return cfg;
}

json bank_to_json(const ClusterBank& bank) {
  json j{{"clusters", bank.clusters()},
         {"initialized", bank.initialized()},
         {"eta", bank.eta()},
         {"metric", to_string(bank.metric())},
         {"seed_threshold", bank.seed_threshold()},
         {"counts", bank.counts()},
         {"centroids", json::array()}};
  for (std::size_t k = 0; k < bank.initialized(); ++k) {
    json c{{"taps", json::array()}, {"layers", json::array()}};
    const auto& f = bank.centroids()[k];
    for (std::size_t l = 0; l < f.layers.size(); ++l) {
      c["taps"].push_back(kTapNames[f.taps[l]]);
      c["layers"].push_back({{"means", f.layers[l].means}, {"vars", f.layers[l].vars}});
    }
    j["centroids"].push_back(std::move(c));
  }
  return j;
}

int cmd_adapt(const Settings& s, const Common& c, const std::string& data, const std::string& checkpoint,
              std::ostream& out) {
  const AdaptConfig cfg = adapt_config(s);
  const Dataset ds = read_dataset(data);
  const SegNet<float> source = load_checkpoint<float>(checkpoint);
  require(source.classes() == ds.scene.classes, ErrorKind::data, "checkpoint and dataset disagree on class count");
  prepare_output_dir(c.out, c.force);

  // The adaptation path sees images only; labels and domains stay in `truth`.
  const auto& split = ds.split("stream").data;
  ImageStream stream = split.stream;
  GroundTruth truth = split.truth;
  if (const std::size_t limit = s.uint("adapt.stream_limit"); limit > 0 && limit < stream.size()) {
    std::vector<std::size_t> idx(limit);
    std::iota(idx.begin(), idx.end(), 0);
    stream.images = gather_samples(stream.images, idx);
    truth.labels.n = limit;
    truth.labels.data.resize(limit * truth.labels.plane());
    truth.domains.resize(limit);
  }
  std::vector<int> oracle;
  if (cfg.mode == BranchMode::oracle) oracle = truth.domains;
  auto run = run_stream(source, stream, cfg, oracle);

  annotate(run.report, truth, run.predictions, ds.scene.classes);
  run.report.eval = evaluate(run.adapter, ds.split("eval").data, ds.domains);

  const fs::path dir(c.out);
  save_checkpoint(run.adapter.net(), (dir / "adapted.ckpt").string());
  json report = report_header("adapt", s);
  report["dataset_manifest_sha256"] = file_digest((fs::path(data) / "manifest.json").string());
  report["checkpoint_sha256"] = file_digest(checkpoint);
  report["domains"] = json::array();
  for (const auto& d : ds.domains) report["domains"].push_back(d.name);
  report["result"] = to_json(run.report);
  report["adapted_checkpoint_sha256"] = file_digest((dir / "adapted.ckpt").string());
  write_text(dir / "report.json", report.dump(2) + "\n");
  std::ostringstream csv;
  write_steps_csv(run.report, csv);
  write_text(dir / "steps.csv", csv.str());
  write_text(dir / "cluster_bank.json", bank_to_json(run.adapter.bank()).dump(2) + "\n");
  out << "steps " << run.report.steps.size() << " eval mean mIoU " << run.report.eval->mean_selected << "\n";
  return kExitOk;
}

int cmd_analyze(const Settings& s, const Common& c, const std::string& data, const std::string& checkpoint,
                std::ostream& out) {
  const double alpha = s.num("analyze.alpha");
  require(alpha >= 0 && alpha <= 1, ErrorKind::invalid_config, "analyze.alpha: must lie in [0, 1]");
  const std::size_t batch = s.uint("analyze.batch_size");
  require(batch >= 1, ErrorKind::invalid_config, "analyze.batch_size: must be >= 1");
  const auto denoise_layers =
      keyed("analyze.denoise_layers", [&] { return parse_tap_set(s.list("analyze.denoise_layers")); });
  const Dataset ds = read_dataset(data);
  const auto& split = ds.split(s.str("analyze.split")).data;
  const SegNet<float> net = load_checkpoint<float>(checkpoint).with_branches(1, alpha);
  prepare_output_dir(c.out, c.force);
  const fs::path dir(c.out);

  const auto features = collect_features(net, split, batch);
  const auto grid = ddr_grid(features);
  std::ostringstream ddr_csv;
  ddr_csv.precision(17);
  ddr_csv << "layer,metric,value\n";
  json summary = report_header("analyze", s);
  summary["dataset_manifest_sha256"] = file_digest((fs::path(data) / "manifest.json").string());
  summary["checkpoint_sha256"] = file_digest(checkpoint);
  for (const auto& r : grid) {
    ddr_csv << kTapNames[r.tap] << ',' << to_string(r.metric) << ',' << r.value << '\n';
    summary["ddr"].push_back({{"layer", kTapNames[r.tap]}, {"metric", to_string(r.metric)}, {"value", r.value}});
  }
  write_text(dir / "ddr.csv", ddr_csv.str());

  const auto sig = sample_signals(net, split, batch, DenoiseConfig{1.0, denoise_layers});
  std::ostringstream corr;
  corr.precision(17);
  corr << "signal,pearson\n";
  for (const auto& [name, xs] : {std::pair<std::string, const std::vector<double>*>{"similarity", &sig.similarity},
                                 {"mean_prob", &sig.mean_prob},
                                 {"entropy", &sig.entropy}}) {
    const double r = keyed("correlation(" + name + ")", [&] { return pearson(*xs, sig.accuracy); });
    corr << name << ',' << r << '\n';
    summary["correlation"][name] = r;
  }
  write_text(dir / "correlation.csv", corr.str());

  // Offline k-means purity at t0 against the true domains, for reference.
  std::vector<DomainFeature> pts;
  std::vector<std::size_t> truth;
  for (const auto& [d, feats] : features)
    for (const auto& f : feats) {
      pts.push_back(f.layer(0));
      truth.push_back(static_cast<std::size_t>(d));
    }
  const auto km = offline_kmeans(pts, features.size(), Metric::bhattacharyya, s.uint("analyze.seed"));
  summary["kmeans_t0_purity"] = purity(km.labels, truth);

  // pseudo_domain is the offline k-means label above; points were gathered in domain_batches order.
  std::ostringstream fcsv;
  fcsv.precision(9);
  fcsv << "sample_id,true_domain,pseudo_domain,layer,channel,mean,var\n";
  std::size_t point = 0;
  for (const auto& idx : domain_batches(split.truth.domains, batch)) {
    const auto taps = net.forward_taps(gather_samples(split.stream.images, idx), 0, kNumTaps);
    for (std::size_t j = 0; j < idx.size(); ++j, ++point)
      for (std::size_t t = 0; t < kNumTaps; ++t)
        for (std::size_t ch = 0; ch < taps[t][j].channels(); ++ch)
          fcsv << idx[j] << ',' << split.truth.domains[idx[j]] << ',' << km.labels[point] << ',' << kTapNames[t]
               << ',' << ch << ',' << taps[t][j].means[ch] << ',' << taps[t][j].vars[ch] << '\n';
  }
  write_text(dir / "features.csv", fcsv.str());
  write_text(dir / "analysis.json", summary.dump(2) + "\n");
  out << "ddr rows " << grid.size() << " similarity/accuracy r " << summary["correlation"]["similarity"] << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Compound-domain test-time adaptation toolkit", "cdtta"};
  app.require_subcommand(1);
  app.set_version_flag("--version", CDTTA_VERSION);

  Common common;
  std::string data, checkpoint;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config file with flat dotted keys");
    sub->add_option("--out", common.out, "output directory")->required();
    sub->add_flag("--force", common.force, "overwrite an existing output");
  };
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic compound-domain dataset");
  add_common(gen);
  Settings gen_s(data_params(), gen);

  auto* pre = app.add_subcommand("pretrain", "train the source model");
  add_common(pre);
  pre->add_option("--data", data, "dataset directory")->required();
  Settings pre_s(pretrain_params(), pre);

  auto* adapt = app.add_subcommand("adapt", "run test-time adaptation over the stream split");
  add_common(adapt);
  adapt->add_option("--data", data, "dataset directory")->required();
  adapt->add_option("--checkpoint", checkpoint, "source checkpoint")->required();
  Settings adapt_s(adapt_params(), adapt);

  auto* analyze = app.add_subcommand("analyze", "DDR grid, correlation table and feature dump");
  add_common(analyze);
  analyze->add_option("--data", data, "dataset directory")->required();
  analyze->add_option("--checkpoint", checkpoint, "checkpoint to analyse")->required();
  Settings analyze_s(analyze_params(), analyze);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << CDTTA_VERSION << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitConfig;
  }

  const auto start = std::chrono::steady_clock::now();
  try {
    const json file = common.config.empty() ? json::object() : read_config_file(common.config);
    int code = kExitOk;
    if (*gen) {
      gen_s.resolve(file, gen);
      code = cmd_gen_data(gen_s, file, common, out);
    } else if (*pre) {
      pre_s.resolve(file, pre);
      code = cmd_pretrain(pre_s, common, data, out);
    } else if (*adapt) {
      adapt_s.resolve(file, adapt);
      code = cmd_adapt(adapt_s, common, data, checkpoint, out);
    } else {
      analyze_s.resolve(file, analyze);
      code = cmd_analyze(analyze_s, common, data, checkpoint, out);
    }
    err << "elapsed " << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s\n";
    return code;
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace cdtta::cli
