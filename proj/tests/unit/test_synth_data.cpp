#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cdtta/analysis.hpp"
#include "cdtta/synth_data.hpp"
#include "doctest.h"
#include "error_kind.hpp"
#include "fixture.hpp"

using namespace cdtta;
using cdtta::testing::catch_error;
namespace fs = std::filesystem;

namespace {

std::vector<double> channel_means(const Tensor& img) {
  std::vector<double> m(3, 0.0);
  const std::size_t plane = img.shape().plane();
  for (std::size_t c = 0; c < 3; ++c) {
    for (float v : img.plane(0, c)) m[c] += v;
    m[c] /= static_cast<double>(plane);
  }
  return m;
}

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("cdtta_unit_" + name);
  fs::remove_all(p);
  return p;
}

DatasetConfig tiny_config() {
  DatasetConfig cfg;
  cfg.scene = SceneConfig{32, 32, 5};
  cfg.stream_length = 30;
  cfg.segment_length = 10;
  cfg.eval_per_domain = 4;
  cfg.source_train = 6;
  cfg.source_val = 3;
  return cfg;
}

}  // namespace

TEST_SUITE("synth_data") {
  TEST_CASE("scenes are deterministic and fully labeled") {
    const auto a = generate_scene(7, 64, 64, 5);
    const auto b = generate_scene(7, 64, 64, 5);
    CHECK(a.image == b.image);
    CHECK(a.label == b.label);
    CHECK(a.label.data.size() == 64 * 64);
    for (auto v : a.label.data) CHECK(v < 5);
    for (float v : a.image.data()) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(generate_scene(8, 64, 64, 5).image != a.image);
    CHECK(catch_error([] { generate_scene(0, 16, 64, 5); }).kind == ErrorKind::invalid_config);
    CHECK(catch_error([] { generate_scene(0, 64, 64, 1); }).kind == ErrorKind::invalid_config);
  }

  TEST_CASE("every class appears in at least 90% of default scenes") {
    std::array<int, 5> seen{};
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      std::array<bool, 5> present{};
      for (auto v : generate_scene(seed, 64, 64, 5).label.data) present[v] = true;
      for (std::size_t c = 0; c < 5; ++c) seen[c] += present[c];
    }
    for (int s : seen) CHECK(s >= 900);
  }

  TEST_CASE("identity spec leaves the image unchanged") {
    const auto s = generate_scene(3, 32, 32, 5);
    const auto out = apply_domain(s, builtin_domain("source"), 4, 11);
    CHECK(out.image == s.image);
    CHECK(out.label == s.label);
    CHECK(out.true_domain == 4);
  }

  TEST_CASE("a dark noisy spec lowers every channel mean by at least 30% and keeps labels") {
    const DomainSpec dark{"dark", 0.3, 1.0, 0.05, {0, 0, 0}};
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto s = generate_scene(seed, 64, 64, 5);
      const auto out = apply_domain(s, dark, 1, seed);
      const auto before = channel_means(s.image), after = channel_means(out.image);
      for (std::size_t c = 0; c < 3; ++c) CHECK(after[c] <= 0.7 * before[c]);
      CHECK(out.label == s.label);
    }
  }

  TEST_CASE("property: domain transforms never touch labels and keep pixels in [0, 1]") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 2), t(-0.5, 0.5), nz(0, 0.3);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const DomainSpec spec{"random", u(rng), u(rng), nz(rng), {t(rng), t(rng), t(rng)}};
      const auto s = generate_scene(seed, 32, 32, 4);
      const auto out = apply_domain(s, spec, 0, seed);
      CHECK(out.label == s.label);
      for (float v : out.image.data()) CHECK((v >= 0.0f && v <= 1.0f));
    }
  }

  TEST_CASE("spec validation names the offending field") {
    DomainSpec bad = builtin_domain("night");
    bad.noise_std = -0.1;
    const auto c = catch_error([&] { validate(bad); });
    CHECK(c.kind == ErrorKind::invalid_config);
    CHECK(c.message.find("noise_std") != std::string::npos);
    bad = builtin_domain("night");
    bad.contrast = std::nan("");
    CHECK(catch_error([&] { validate(bad); }).message.find("contrast") != std::string::npos);
    CHECK(catch_error([] { builtin_domain("fog"); }).kind == ErrorKind::invalid_config);
  }

  TEST_CASE("build_stream follows the schedule and records a manifest") {
    const auto specs = builtin_domains();
    const auto s = build_stream(specs, {{"day", 10}, {"night", 10}}, 3, SceneConfig{32, 32, 5});
    CHECK(s.stream.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
      CHECK(s.truth.domains[i] == (i < 10 ? 1 : 2));
      CHECK(s.manifest[i].index == i);
      CHECK(s.manifest[i].true_domain == s.truth.domains[i]);
    }
    const auto again = build_stream(specs, {{"day", 10}, {"night", 10}}, 3, SceneConfig{32, 32, 5});
    CHECK(again.manifest == s.manifest);
    CHECK(again.stream.images == s.stream.images);
    const auto undeclared = catch_error([&] { build_stream(specs, {{"fog", 1}}, 3); });
    CHECK(undeclared.kind == ErrorKind::invalid_config);
    CHECK(undeclared.message.find("fog") != std::string::npos);
  }

  TEST_CASE("schedules") {
    const std::vector<std::string> d{"a", "b", "c"};
    const auto cyc = cyclic_schedule(d, 4, 10);
    REQUIRE(cyc.size() == 3);
    CHECK(cyc[0].domain == "a");
    CHECK(cyc[1].domain == "b");
    CHECK(cyc[2].domain == "c");
    CHECK(cyc[2].length == 2);
    CHECK(catch_error([&] { cyclic_schedule(d, 0, 10); }).kind == ErrorKind::invalid_config);

    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto r = random_schedule(d, 5, 100, seed);
      std::size_t total = 0;
      for (std::size_t i = 0; i < r.size(); ++i) {
        total += r[i].length;
        if (i > 0) CHECK(r[i].domain != r[i - 1].domain);
      }
      CHECK(total == 100);
      CHECK(random_schedule(d, 5, 100, seed).size() == r.size());
    }
  }

  TEST_CASE("make_dataset builds every split and validates its recipe") {
    const auto ds = make_dataset(tiny_config());
    CHECK(ds.split("source_train").data.stream.size() == 6);
    CHECK(ds.split("source_val").data.stream.size() == 3);
    CHECK(ds.split("stream").data.stream.size() == 30);
    CHECK(ds.split("eval").data.stream.size() == 12);
    CHECK(ds.domains.back().name == "source");
    CHECK(catch_error([&] { ds.split("test"); }).kind == ErrorKind::data);

    auto bad = tiny_config();
    bad.scene.height = 34;
    CHECK(catch_error([&] { make_dataset(bad); }).kind == ErrorKind::invalid_config);
    bad = tiny_config();
    bad.stream_domains = {builtin_domain("day"), builtin_domain("day")};
    CHECK(catch_error([&] { make_dataset(bad); }).kind == ErrorKind::invalid_config);
    bad = tiny_config();
    bad.segment_length = 0;
    CHECK(catch_error([&] { make_dataset(bad); }).message.find("segment_length") != std::string::npos);
  }

  TEST_CASE("dataset directories round trip and report missing or corrupt files") {
    const auto ds = make_dataset(tiny_config());
    const auto dir = scratch_dir("roundtrip");
    write_dataset(ds, dir.string(), false);
    const auto back = read_dataset(dir.string());
    CHECK(back.domains == ds.domains);
    CHECK(back.seed == ds.seed);
    REQUIRE(back.splits.size() == ds.splits.size());
    for (std::size_t i = 0; i < ds.splits.size(); ++i) {
      CHECK(back.splits[i].name == ds.splits[i].name);
      CHECK(back.splits[i].data.stream.images == ds.splits[i].data.stream.images);
      CHECK(back.splits[i].data.truth.labels == ds.splits[i].data.truth.labels);
      CHECK(back.splits[i].data.manifest == ds.splits[i].data.manifest);
    }
    CHECK(catch_error([&] { write_dataset(ds, dir.string(), false); }).kind == ErrorKind::invalid_config);
    write_dataset(ds, dir.string(), true);

    CHECK(catch_error([] { read_dataset("/nonexistent/cdtta"); }).kind == ErrorKind::data);
    fs::resize_file(dir / "stream.labels.u8", 100);
    CHECK(catch_error([&] { read_dataset(dir.string()); }).kind == ErrorKind::format);
    std::ofstream(dir / "manifest.json") << "{not json";
    CHECK(catch_error([&] { read_dataset(dir.string()); }).kind == ErrorKind::format);
    fs::remove_all(dir);
  }

  TEST_CASE("default domains are separable but not trivially so at t0") {
    const auto& ds = cdtta::testing::small_dataset();
    const auto features = collect_features(cdtta::testing::small_source(), ds.split("stream").data, 8);
    CHECK(features.size() == 3);
    const double r = ddr(features, Metric::bhattacharyya, 0);
    MESSAGE("DDR(t0, bhattacharyya) = " << r);
    CHECK(r > 2.0);
    CHECK(r < 10.0);
  }
}
