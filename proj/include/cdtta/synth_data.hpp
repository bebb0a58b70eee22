#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cdtta/labels.hpp"
#include "cdtta/tensor.hpp"

namespace cdtta {

// Photometric domain transform:
//   x <- clamp(clamp(contrast * (x - 0.5) + 0.5) * gain + tint[c] + N(0, noise_std^2))
struct DomainSpec {
  std::string name;
  double brightness_gain = 1.0;
  double contrast = 1.0;
  double noise_std = 0.0;
  std::array<double, 3> tint{0.0, 0.0, 0.0};

  bool operator==(const DomainSpec&) const = default;
};

// Throws invalid_config naming the offending field.
void validate(const DomainSpec& spec);

// Built-in specs: "source" (identity), "day", "night", "rain".
std::vector<DomainSpec> builtin_domains();
DomainSpec builtin_domain(std::string_view name);  // throws invalid_config

// A single image with its labels. Evaluation code owns `true_domain`.
struct LabeledSample {
  Tensor image;  // (1, 3, h, w) in [0, 1]
  LabelMap label;
  int true_domain = -1;
};

inline constexpr std::size_t kMinSceneSide = 32;

// Background (class 0) with one rectangle, ellipse or stripe per class 1..C-1, painted
// in class order, each with a jittered class colour and mild texture.
LabeledSample generate_scene(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t classes);

LabeledSample apply_domain(const LabeledSample& sample, const DomainSpec& spec, int domain_id, std::uint64_t seed);

struct Segment {
  std::string domain;
  std::size_t length = 0;
};

struct ManifestEntry {
  std::size_t index = 0;
  int true_domain = -1;
  std::uint64_t seed = 0;
  bool operator==(const ManifestEntry&) const = default;
};

// What the adaptation path is allowed to see.
struct ImageStream {
  Tensor images;  // (N, 3, h, w)
  std::size_t size() const noexcept { return images.shape().n; }
};

// Labels and domain ids, for scoring only.
struct GroundTruth {
  LabelMap labels;
  std::vector<int> domains;
};

struct StreamData {
  ImageStream stream;
  GroundTruth truth;
  std::vector<ManifestEntry> manifest;
};

struct SceneConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t classes = 5;
};

// Domain ids are indices into `specs`. Throws invalid_config for an undeclared domain.
StreamData build_stream(const std::vector<DomainSpec>& specs, const std::vector<Segment>& schedule,
                        std::uint64_t seed, const SceneConfig& scene = {});

// Segments of `segment_length` cycling through `domains` until `total` samples are covered
// (the last segment may be shorter).
std::vector<Segment> cyclic_schedule(const std::vector<std::string>& domains, std::size_t segment_length,
                                     std::size_t total);

// Same segmentation, with each segment's domain drawn uniformly from `domains` and no
// immediate repeats.
std::vector<Segment> random_schedule(const std::vector<std::string>& domains, std::size_t segment_length,
                                     std::size_t total, std::uint64_t seed);

// Mixes a base seed with a stream tag and an index (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t index) noexcept;

// --- dataset directory ---
//
// manifest.json, plus per split <name>.images.cdt (one CDT1 block per sample) and
// <name>.labels.u8 (raw h*w bytes per sample).
struct DatasetSplit {
  std::string name;
  StreamData data;
};

struct Dataset {
  SceneConfig scene;
  std::vector<DomainSpec> domains;
  std::uint64_t seed = 0;
  std::vector<DatasetSplit> splits;

  const DatasetSplit& split(std::string_view name) const;  // throws data
};

// Recipe for a full dataset: source_train and source_val from the identity domain, a
// segmented stream over `stream_domains`, and an eval split of `eval_per_domain` samples
// per stream domain. Domain ids index `stream_domains` followed by "source".
struct DatasetConfig {
  std::uint64_t seed = 0;
  SceneConfig scene;
  std::vector<DomainSpec> stream_domains{builtin_domain("day"), builtin_domain("night"), builtin_domain("rain")};
  std::size_t stream_length = 6000;
  std::size_t segment_length = 40;
  bool random_order = false;
  std::size_t eval_per_domain = 100;
  std::size_t source_train = 400;
  std::size_t source_val = 200;
};

// Throws invalid_config for out-of-range settings, naming the field.
Dataset make_dataset(const DatasetConfig& cfg);

// Throws invalid_config if `dir` exists and `force` is false.
void write_dataset(const Dataset& ds, const std::string& dir, bool force);
// Throws data on a missing directory or file, format on corrupt contents.
Dataset read_dataset(const std::string& dir);

}  // namespace cdtta
