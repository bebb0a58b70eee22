#pragma once

#include "cdtta/adaptation.hpp"
#include "cdtta/synth_data.hpp"

namespace cdtta::testing {

// Default-domain dataset at 64x64 with a short stream, built once per process.
inline const Dataset& small_dataset() {
  static const Dataset ds = [] {
    DatasetConfig cfg;
    cfg.stream_length = 240;
    cfg.eval_per_domain = 20;
    cfg.source_train = 120;
    cfg.source_val = 0;
    return make_dataset(cfg);
  }();
  return ds;
}

// A briefly pretrained source model: enough for stable low-level taps and a loss that
// responds to adaptation, far cheaper than the full recipe.
inline const SegNet<float>& small_source() {
  static const SegNet<float> net = [] {
    const auto& train = small_dataset().split("source_train").data;
    PretrainConfig cfg;
    cfg.epochs = 2;
    return pretrain(train.stream.images, train.truth.labels, cfg).net;
  }();
  return net;
}

}  // namespace cdtta::testing
