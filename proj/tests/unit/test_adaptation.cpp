#include <numeric>
#include <sstream>

#include "cdtta/adaptation.hpp"
#include "doctest.h"
#include "error_kind.hpp"
#include "fixture.hpp"

using namespace cdtta;
using cdtta::testing::catch_error;
using cdtta::testing::small_dataset;
using cdtta::testing::small_source;

namespace {

std::string bytes_of(const SegNet<float>& net) {
  std::ostringstream os;
  save_checkpoint(net, os);
  return os.str();
}

// Serialised affine parameters of one branch across all taps.
std::string branch_bytes(const SegNet<float>& net, std::size_t k) {
  std::string out;
  for (std::size_t t = 0; t < kNumTaps; ++t) {
    const auto& p = net.bn(t).branch(k);
    out.append(reinterpret_cast<const char*>(p.gamma.data()), p.gamma.size() * sizeof(float));
    out.append(reinterpret_cast<const char*>(p.beta.data()), p.beta.size() * sizeof(float));
  }
  return out;
}

StreamData make_stream(const std::vector<Segment>& schedule, std::uint64_t seed) {
  return build_stream(small_dataset().domains, schedule, seed);
}

}  // namespace

TEST_SUITE("adaptation") {
  TEST_CASE("config defaults and validation") {
    const AdaptConfig cfg;
    CHECK(cfg.alpha == 0.9);
    CHECK(cfg.eta == 0.9);
    CHECK(cfg.delta == 1.5);
    CHECK(cfg.clusters == 3);
    CHECK(cfg.mode == BranchMode::pseudo);
    CHECK(cfg.clustering_layers == std::vector<std::size_t>{0});
    cfg.validate();

    const auto bad = [](auto mutate, const char* field) {
      AdaptConfig c;
      mutate(c);
      const auto caught = catch_error([&] { c.validate(); });
      CHECK(caught.kind == ErrorKind::invalid_config);
      CHECK(caught.message.find(field) != std::string::npos);
    };
    bad([](AdaptConfig& c) { c.alpha = 1.5; }, "alpha");
    bad([](AdaptConfig& c) { c.eta = -0.1; }, "eta");
    bad([](AdaptConfig& c) { c.delta = -1; }, "delta");
    bad([](AdaptConfig& c) { c.clusters = 0; }, "k");
    bad([](AdaptConfig& c) { c.learning_rate = -1; }, "lr");
    bad([](AdaptConfig& c) { c.batch_size = 0; }, "batch_size");
    bad([](AdaptConfig& c) { c.clustering_layers = {}; }, "clustering_layers");
    bad([](AdaptConfig& c) { c.denoise_layers = {5}; }, "denoise_layers");

    for (BranchMode m : {BranchMode::pseudo, BranchMode::oracle, BranchMode::compound})
      CHECK(parse_branch_mode(to_string(m)) == m);
    CHECK(catch_error([] { parse_branch_mode("mixed"); }).kind == ErrorKind::invalid_config);
  }

  TEST_CASE("pretraining lowers the loss, is deterministic and rejects empty data") {
    DatasetConfig dc;
    dc.scene = SceneConfig{32, 32, 5};
    dc.stream_length = 0;
    dc.eval_per_domain = 0;
    dc.source_train = 16;
    dc.source_val = 0;
    const auto ds = make_dataset(dc);
    const auto& train = ds.split("source_train").data;
    PretrainConfig pc;
    pc.epochs = 3;
    const auto a = pretrain(train.stream.images, train.truth.labels, pc);
    CHECK(a.epoch_loss.size() == 3);
    CHECK(a.epoch_loss.back() < a.epoch_loss.front());
    const auto b = pretrain(train.stream.images, train.truth.labels, pc);
    CHECK(bytes_of(a.net) == bytes_of(b.net));
    CHECK(catch_error([&] { pretrain(Tensor({0, 3, 32, 32}), LabelMap{0, 32, 32, {}}, pc); }).kind ==
          ErrorKind::invalid_config);
  }

  TEST_CASE("zero learning rate leaves every branch untouched") {
    const auto s = make_stream({{"day", 8}, {"night", 8}}, 1);
    AdaptConfig cfg;
    cfg.learning_rate = 0;
    const auto r = run_stream(small_source(), s.stream, cfg);
    for (double d : r.report.param_delta) CHECK(d == 0.0);
    CHECK(r.report.steps.size() == 4);
  }

  TEST_CASE("a single branch without denoising reproduces the alpha-BN baseline") {
    const auto s = make_stream({{"rain", 6}, {"day", 6}}, 2);
    AdaptConfig cfg;
    cfg.clusters = 1;
    cfg.delta = 0;
    cfg.mode = BranchMode::compound;
    const auto r = run_stream(small_source(), s.stream, cfg);
    const auto base = run_alpha_bn_baseline(small_source(), s.stream, cfg.alpha, cfg.learning_rate, cfg.batch_size);
    CHECK(bytes_of(r.adapter.net()) == bytes_of(base.net));
    CHECK(r.predictions == base.predictions);
  }

  TEST_CASE("an empty stream runs zero steps") {
    const ImageStream empty{Tensor({0, 3, 64, 64})};
    const auto r = run_stream(small_source(), empty, AdaptConfig{});
    CHECK(r.report.steps.empty());
    CHECK(r.predictions.n == 0);
    for (double d : r.report.param_delta) CHECK(d == 0.0);
  }

  TEST_CASE("identical config and seed give byte-identical reports") {
    const auto s = make_stream({{"night", 8}, {"rain", 8}}, 3);
    const auto a = run_stream(small_source(), s.stream, AdaptConfig{});
    const auto b = run_stream(small_source(), s.stream, AdaptConfig{});
    CHECK(to_json(a.report).dump() == to_json(b.report).dump());
    CHECK(bytes_of(a.adapter.net()) == bytes_of(b.adapter.net()));
  }

  TEST_CASE("property: each step changes only the branches it assigned") {
    const auto s = make_stream({{"day", 12}, {"night", 12}, {"rain", 12}}, 4);
    Adapter adapter(small_source(), AdaptConfig{});
    for (std::size_t start = 0; start < s.stream.size(); start += 4) {
      std::vector<std::size_t> ids(4);
      std::iota(ids.begin(), ids.end(), start);
      std::array<std::string, 3> before;
      for (std::size_t k = 0; k < 3; ++k) before[k] = branch_bytes(adapter.net(), k);
      const auto out = adapter.step(gather_samples(s.stream.images, ids), ids);
      for (std::size_t k = 0; k < 3; ++k) {
        const bool used = std::ranges::find(out.record.branches, k) != out.record.branches.end();
        if (!used) CHECK(branch_bytes(adapter.net(), k) == before[k]);
      }
    }
  }

  TEST_CASE("predictions come from the parameters before the update") {
    const auto s = make_stream({{"rain", 4}}, 5);
    AdaptConfig cfg;
    cfg.mode = BranchMode::compound;
    Adapter adapter(small_source(), cfg);
    const std::vector<std::size_t> ids{0, 1, 2, 3};
    const auto expect = predict(adapter.net(), s.stream.images, 0);
    const auto before = branch_bytes(adapter.net(), 0);
    const auto out = adapter.step(s.stream.images, ids);
    CHECK(out.predictions == expect);
    CHECK(branch_bytes(adapter.net(), 0) != before);
  }

  TEST_CASE("oracle mode: a branch with no samples keeps zero parameter change") {
    const auto s = make_stream({{"day", 8}, {"rain", 8}}, 6);  // domain ids 0 and 2
    AdaptConfig cfg;
    cfg.mode = BranchMode::oracle;
    cfg.clusters = 4;
    const auto r = run_stream(small_source(), s.stream, cfg, s.truth.domains);
    CHECK(r.report.param_delta[0] > 0.0);
    CHECK(r.report.param_delta[1] == 0.0);
    CHECK(r.report.param_delta[2] > 0.0);
    CHECK(r.report.param_delta[3] == 0.0);
    cfg.clusters = 2;
    CHECK(catch_error([&] { run_stream(small_source(), s.stream, cfg, s.truth.domains); }).kind ==
          ErrorKind::invalid_config);
    CHECK(catch_error([&] { run_stream(small_source(), s.stream, cfg); }).kind == ErrorKind::invalid_config);
  }

  TEST_CASE("the adaptation path never needs ground truth") {
    // Pseudo mode takes images only; annotate() is the sole consumer of labels and domains.
    const auto s = make_stream({{"day", 8}, {"night", 8}}, 7);
    auto r = run_stream(small_source(), s.stream, AdaptConfig{});
    for (const auto& step : r.report.steps) CHECK(step.true_domains.empty());
    const auto before = to_json(r.report)["steps"].dump();
    annotate(r.report, s.truth, r.predictions, 5);
    CHECK(r.report.steps.front().true_domains.size() == r.report.steps.front().samples.size());
    CHECK(r.report.purity > 0.0);
    CHECK(!before.empty());
  }

  TEST_CASE("knowledge accumulates on a revisited domain") {
    const auto s = make_stream({{"night", 40}, {"day", 40}, {"rain", 40}, {"night", 40}}, 8);
    AdaptConfig cfg;
    cfg.learning_rate = 0.05;
    const auto r = run_stream(small_source(), s.stream, cfg);
    double first = 0, second = 0;
    for (const auto& step : r.report.steps)
      for (std::size_t j = 0; j < step.samples.size(); ++j) {
        if (step.samples[j] < 40) first += step.loss[j];
        if (step.samples[j] >= 120) second += step.loss[j];
      }
    MESSAGE("first visit " << first / 40 << ", second visit " << second / 40);
    CHECK(second < first);
  }

  TEST_CASE("evaluation matrix shapes and untrained-branch symmetry") {
    const auto& ds = small_dataset();
    const auto& eval = ds.split("eval").data;
    AdaptConfig cfg;
    cfg.learning_rate = 0;
    const Adapter untrained(small_source(), cfg);
    const auto e = evaluate(untrained, eval, ds.domains);
    CHECK(e.domains == std::vector<std::string>{"day", "night", "rain"});
    REQUIRE(e.matrix.size() == 3);
    CHECK(e.matrix[1] == e.matrix[0]);
    CHECK(e.matrix[2] == e.matrix[0]);
    CHECK(e.sample_accuracy.size() == eval.stream.size());

    const auto one = build_stream(ds.domains, {{"rain", 6}}, 9);
    const auto e1 = evaluate(untrained, one, ds.domains);
    CHECK(e1.domains == std::vector<std::string>{"rain"});
    for (const auto& row : e1.matrix) CHECK(row.size() == 1);
  }
}
