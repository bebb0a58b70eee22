#include "cdtta/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cdtta/tensor_io.hpp"
#include "json.hpp"

namespace cdtta {

namespace fs = std::filesystem;

void validate(const DomainSpec& spec) {
  auto finite = [&](double v, const char* field) {
    require(std::isfinite(v), ErrorKind::invalid_config,
            "domain '" + spec.name + "': field " + field + " must be finite");
  };
  require(!spec.name.empty(), ErrorKind::invalid_config, "domain spec: field name must not be empty");
  finite(spec.brightness_gain, "brightness_gain");
  finite(spec.contrast, "contrast");
  finite(spec.noise_std, "noise_std");
  for (double t : spec.tint) finite(t, "tint");
  require(spec.brightness_gain >= 0, ErrorKind::invalid_config,
          "domain '" + spec.name + "': field brightness_gain must be >= 0");
  require(spec.noise_std >= 0, ErrorKind::invalid_config, "domain '" + spec.name + "': field noise_std must be >= 0");
}

std::vector<DomainSpec> builtin_domains() {
  return {
      {"source", 1.0, 1.0, 0.0, {0.0, 0.0, 0.0}},
      {"day", 1.2, 0.9, 0.02, {0.10, 0.05, -0.08}},
      {"night", 0.5, 0.75, 0.04, {0.08, 0.02, -0.06}},
      {"rain", 0.8, 0.6, 0.05, {-0.10, -0.02, 0.12}},
  };
}

DomainSpec builtin_domain(std::string_view name) {
  for (auto& d : builtin_domains())
    if (d.name == name) return d;
  fail(ErrorKind::invalid_config,
       "unknown domain '" + std::string(name) + "' (built-in domains: source, day, night, rain)");
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t index) noexcept {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1) + 0xBF58476D1CE4E5B9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

constexpr double kIllumJitter = 0.34;

std::array<double, 3> class_colour(std::size_t c) {
  static constexpr std::array<std::array<double, 3>, 8> kPalette{{
      {0.40, 0.55, 0.40},
      {0.85, 0.20, 0.20},
      {0.20, 0.30, 0.85},
      {0.90, 0.85, 0.25},
      {0.12, 0.12, 0.12},
      {0.95, 0.95, 0.95},
      {0.60, 0.20, 0.80},
      {0.20, 0.80, 0.80},
  }};
  if (c < kPalette.size()) return kPalette[c];
  std::mt19937_64 rng(derive_seed(0xC0102, 0, c));
  std::uniform_real_distribution<double> u(0.05, 0.95);
  return {u(rng), u(rng), u(rng)};
}

}  // namespace

LabeledSample generate_scene(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t classes) {
  require(h >= kMinSceneSide && w >= kMinSceneSide, ErrorKind::invalid_config,
          "generate_scene: image sides must be >= " + std::to_string(kMinSceneSide));
  require(classes >= 2 && classes <= 255, ErrorKind::invalid_config, "generate_scene: classes must lie in [2, 255]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double H = static_cast<double>(h), W = static_cast<double>(w);

  LabeledSample s;
  s.label = LabelMap{1, h, w, std::vector<std::uint8_t>(h * w, 0)};
  auto& lab = s.label.data;
  for (std::size_t c = 1; c < classes; ++c) {
    const int kind = static_cast<int>(u01(rng) * 3.0);
    if (kind == 2) {
      const bool horizontal = u01(rng) < 0.5;
      const double side = horizontal ? H : W;
      const double thick = side * (0.10 + 0.10 * u01(rng));
      const double start = (side - thick) * u01(rng);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double v = (horizontal ? static_cast<double>(y) : static_cast<double>(x)) + 0.5;
          if (v >= start && v < start + thick) lab[y * w + x] = static_cast<std::uint8_t>(c);
        }
      continue;
    }
    const double sh = H * (0.20 + 0.25 * u01(rng));
    const double sw = W * (0.20 + 0.25 * u01(rng));
    const double y0 = (H - sh) * u01(rng);
    const double x0 = (W - sw) * u01(rng);
    const double cy = y0 + sh / 2, cx = x0 + sw / 2;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
        bool inside;
        if (kind == 0) {
          inside = py >= y0 && py < y0 + sh && px >= x0 && px < x0 + sw;
        } else {
          const double dy = (py - cy) / (sh / 2), dx = (px - cx) / (sw / 2);
          inside = dy * dy + dx * dx <= 1.0;
        }
        if (inside) lab[y * w + x] = static_cast<std::uint8_t>(c);
      }
  }

  // Scene-wide illumination plus per-class colour jitter.
  const double illum = 1.0 + kIllumJitter * (2.0 * u01(rng) - 1.0);
  std::vector<std::array<double, 3>> colours(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    colours[c] = class_colour(c);
    for (auto& v : colours[c]) v = std::clamp(illum * (v + 0.16 * (u01(rng) - 0.5)), 0.0, 1.0);
  }
  std::normal_distribution<double> texture(0.0, 0.03);
  s.image = Tensor(Shape{1, 3, h, w});
  for (std::size_t ch = 0; ch < 3; ++ch) {
    auto plane = s.image.plane(0, ch);
    for (std::size_t i = 0; i < h * w; ++i)
      plane[i] = static_cast<float>(std::clamp(colours[lab[i]][ch] + texture(rng), 0.0, 1.0));
  }
  return s;
}

LabeledSample apply_domain(const LabeledSample& sample, const DomainSpec& spec, int domain_id, std::uint64_t seed) {
  validate(spec);
  LabeledSample out = sample;
  out.true_domain = domain_id;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const Shape s = out.image.shape();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t ch = 0; ch < s.c; ++ch) {
      const double tint = ch < 3 ? spec.tint[ch] : 0.0;
      for (auto& px : out.image.plane(n, ch)) {
        double v = std::clamp(spec.contrast * (static_cast<double>(px) - 0.5) + 0.5, 0.0, 1.0);
        v = v * spec.brightness_gain + tint;
        if (spec.noise_std > 0) v += spec.noise_std * noise(rng);
        px = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return out;
}

std::vector<Segment> cyclic_schedule(const std::vector<std::string>& domains, std::size_t segment_length,
                                     std::size_t total) {
  require(!domains.empty(), ErrorKind::invalid_config, "cyclic_schedule: no domains");
  require(segment_length >= 1, ErrorKind::invalid_config, "cyclic_schedule: segment_length must be >= 1");
  std::vector<Segment> out;
  for (std::size_t done = 0, i = 0; done < total; ++i) {
    const std::size_t len = std::min(segment_length, total - done);
    out.push_back({domains[i % domains.size()], len});
    done += len;
  }
  return out;
}

std::vector<Segment> random_schedule(const std::vector<std::string>& domains, std::size_t segment_length,
                                     std::size_t total, std::uint64_t seed) {
  auto out = cyclic_schedule(domains, segment_length, total);
  if (domains.size() < 2) return out;
  std::mt19937_64 rng(seed);
  std::size_t prev = domains.size();
  for (auto& seg : out) {
    std::uniform_int_distribution<std::size_t> pick(0, domains.size() - (prev < domains.size() ? 2 : 1));
    std::size_t k = pick(rng);
    if (prev < domains.size() && k >= prev) ++k;
    seg.domain = domains[k];
    prev = k;
  }
  return out;
}

StreamData build_stream(const std::vector<DomainSpec>& specs, const std::vector<Segment>& schedule,
                        std::uint64_t seed, const SceneConfig& scene) {
  for (const auto& s : specs) validate(s);
  std::vector<int> ids;
  std::size_t total = 0;
  for (const auto& seg : schedule) {
    auto it = std::find_if(specs.begin(), specs.end(), [&](const DomainSpec& d) { return d.name == seg.domain; });
    require(it != specs.end(), ErrorKind::invalid_config,
            "schedule references undeclared domain '" + seg.domain + "'");
    ids.push_back(static_cast<int>(it - specs.begin()));
    total += seg.length;
  }
  const std::size_t h = scene.height, w = scene.width;
  StreamData out;
  out.stream.images = Tensor(Shape{total, 3, h, w});
  out.truth.labels = LabelMap{total, h, w, std::vector<std::uint8_t>(total * h * w)};
  out.truth.domains.reserve(total);
  out.manifest.reserve(total);
  std::size_t i = 0;
  for (std::size_t k = 0; k < schedule.size(); ++k)
    for (std::size_t j = 0; j < schedule[k].length; ++j, ++i) {
      const std::uint64_t scene_seed = derive_seed(seed, 1, i);
      const auto sample = apply_domain(generate_scene(scene_seed, h, w, scene.classes), specs[ids[k]], ids[k],
                                       derive_seed(seed, 2, i));
      std::copy(sample.image.data().begin(), sample.image.data().end(), out.stream.images.sample(i).begin());
      std::copy(sample.label.data.begin(), sample.label.data.end(), out.truth.labels.sample(i).begin());
      out.truth.domains.push_back(ids[k]);
      out.manifest.push_back({i, ids[k], scene_seed});
    }
  return out;
}

const DatasetSplit& Dataset::split(std::string_view name) const {
  for (const auto& s : splits)
    if (s.name == name) return s;
  fail(ErrorKind::data, "dataset has no split '" + std::string(name) + "'");
}

namespace {

using json = nlohmann::ordered_json;

json spec_to_json(const DomainSpec& d) {
  return {{"name", d.name},
          {"brightness_gain", d.brightness_gain},
          {"contrast", d.contrast},
          {"noise_std", d.noise_std},
          {"tint", d.tint}};
}

DomainSpec spec_from_json(const json& j) {
  DomainSpec d;
  d.name = j.at("name").get<std::string>();
  d.brightness_gain = j.at("brightness_gain").get<double>();
  d.contrast = j.at("contrast").get<double>();
  d.noise_std = j.at("noise_std").get<double>();
  d.tint = j.at("tint").get<std::array<double, 3>>();
  return d;
}

}  // namespace

Dataset make_dataset(const DatasetConfig& cfg) {
  const auto& sc = cfg.scene;
  require(sc.height >= kMinSceneSide && sc.width >= kMinSceneSide && sc.height % 4 == 0 && sc.width % 4 == 0,
          ErrorKind::invalid_config, "scene height/width: must be multiples of 4 and >= 32");
  require(sc.classes >= 2 && sc.classes <= 255, ErrorKind::invalid_config, "scene classes: must lie in [2, 255]");
  require(!cfg.stream_domains.empty(), ErrorKind::invalid_config, "stream_domains: at least one domain required");
  require(cfg.segment_length >= 1, ErrorKind::invalid_config, "segment_length: must be >= 1");
  std::vector<std::string> names;
  std::vector<DomainSpec> specs;
  for (const auto& d : cfg.stream_domains) {
    require(std::find(names.begin(), names.end(), d.name) == names.end(), ErrorKind::invalid_config,
            "stream_domains: domain '" + d.name + "' listed twice");
    names.push_back(d.name);
    specs.push_back(d);
  }
  if (std::find(names.begin(), names.end(), "source") == names.end()) specs.push_back(builtin_domain("source"));

  const auto schedule = cfg.random_order
                            ? random_schedule(names, cfg.segment_length, cfg.stream_length,
                                              derive_seed(cfg.seed, 105, 0))
                            : cyclic_schedule(names, cfg.segment_length, cfg.stream_length);
  std::vector<Segment> eval_schedule;
  for (const auto& n : names) eval_schedule.push_back({n, cfg.eval_per_domain});

  Dataset ds;
  ds.scene = sc;
  ds.domains = specs;
  ds.seed = cfg.seed;
  ds.splits.push_back(
      {"source_train", build_stream(specs, {{"source", cfg.source_train}}, derive_seed(cfg.seed, 101, 0), sc)});
  ds.splits.push_back(
      {"source_val", build_stream(specs, {{"source", cfg.source_val}}, derive_seed(cfg.seed, 102, 0), sc)});
  ds.splits.push_back({"stream", build_stream(specs, schedule, derive_seed(cfg.seed, 103, 0), sc)});
  ds.splits.push_back({"eval", build_stream(specs, eval_schedule, derive_seed(cfg.seed, 104, 0), sc)});
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& dir, bool force) {
  if (fs::exists(dir)) {
    require(force, ErrorKind::invalid_config, "output path '" + dir + "' exists (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  json m;
  m["format"] = "cdtta-dataset/1";
  m["seed"] = ds.seed;
  m["height"] = ds.scene.height;
  m["width"] = ds.scene.width;
  m["classes"] = ds.scene.classes;
  m["domains"] = json::array();
  for (const auto& d : ds.domains) m["domains"].push_back(spec_to_json(d));
  m["splits"] = json::array();
  for (const auto& sp : ds.splits) {
    json js{{"name", sp.name}, {"count", sp.data.manifest.size()}, {"samples", json::array()}};
    for (const auto& e : sp.data.manifest)
      js["samples"].push_back({{"index", e.index}, {"true_domain", e.true_domain}, {"seed", e.seed}});
    m["splits"].push_back(std::move(js));

    std::ofstream img(fs::path(dir) / (sp.name + ".images.cdt"), std::ios::binary);
    const Shape s = sp.data.stream.images.shape();
    const std::array<std::uint32_t, 3> dims{static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
                                            static_cast<std::uint32_t>(s.w)};
    for (std::size_t i = 0; i < s.n; ++i)
      write_cdt1<float>(img, dims, sp.data.stream.images.sample(i));
    std::ofstream lab(fs::path(dir) / (sp.name + ".labels.u8"), std::ios::binary);
    lab.write(reinterpret_cast<const char*>(sp.data.truth.labels.data.data()),
              static_cast<std::streamsize>(sp.data.truth.labels.data.size()));
    require(img.good() && lab.good(), ErrorKind::data, "failed writing split '" + sp.name + "' to " + dir);
  }
  std::ofstream(fs::path(dir) / "manifest.json") << m.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream mf(root / "manifest.json");
  require(mf.good(), ErrorKind::data, "no dataset manifest at '" + (root / "manifest.json").string() + "'");
  json m;
  try {
    m = json::parse(mf);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("dataset manifest: ") + e.what());
  }
  Dataset ds;
  try {
    require(m.at("format") == "cdtta-dataset/1", ErrorKind::format, "dataset manifest: unsupported format");
    ds.seed = m.at("seed").get<std::uint64_t>();
    ds.scene = {m.at("height").get<std::size_t>(), m.at("width").get<std::size_t>(),
                m.at("classes").get<std::size_t>()};
    for (const auto& d : m.at("domains")) ds.domains.push_back(spec_from_json(d));
    for (const auto& js : m.at("splits")) {
      DatasetSplit sp;
      sp.name = js.at("name").get<std::string>();
      const std::size_t n = js.at("count").get<std::size_t>();
      const std::size_t h = ds.scene.height, w = ds.scene.width;
      for (const auto& e : js.at("samples"))
        sp.data.manifest.push_back(
            {e.at("index").get<std::size_t>(), e.at("true_domain").get<int>(), e.at("seed").get<std::uint64_t>()});
      require(sp.data.manifest.size() == n, ErrorKind::format, "split '" + sp.name + "': sample count mismatch");
      for (const auto& e : sp.data.manifest) sp.data.truth.domains.push_back(e.true_domain);

      std::ifstream img(root / (sp.name + ".images.cdt"), std::ios::binary);
      require(img.good(), ErrorKind::data, "split '" + sp.name + "': image file missing");
      sp.data.stream.images = Tensor(Shape{n, 3, h, w});
      for (std::size_t i = 0; i < n; ++i) {
        const auto block = read_cdt1(img);
        require(block.dims == std::vector<std::uint32_t>{3, static_cast<std::uint32_t>(h),
                                                          static_cast<std::uint32_t>(w)},
                ErrorKind::format, "split '" + sp.name + "': image block has wrong dimensions");
        auto dst = sp.data.stream.images.sample(i);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<float>(block.values[k]);
      }
      std::ifstream lab(root / (sp.name + ".labels.u8"), std::ios::binary);
      require(lab.good(), ErrorKind::data, "split '" + sp.name + "': label file missing");
      sp.data.truth.labels = LabelMap{n, h, w, std::vector<std::uint8_t>(n * h * w)};
      lab.read(reinterpret_cast<char*>(sp.data.truth.labels.data.data()),
               static_cast<std::streamsize>(sp.data.truth.labels.data.size()));
      require(static_cast<std::size_t>(lab.gcount()) == n * h * w, ErrorKind::format,
              "split '" + sp.name + "': label file truncated");
      for (auto v : sp.data.truth.labels.data)
        require(v < ds.scene.classes, ErrorKind::data, "split '" + sp.name + "': label out of range");
      ds.splits.push_back(std::move(sp));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("dataset manifest: ") + e.what());
  }
  return ds;
}

}  // namespace cdtta
