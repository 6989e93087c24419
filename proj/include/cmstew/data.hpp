// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "cmstew/models.hpp"
#include "cmstew/tensor.hpp"

namespace cmstew {

// One windowed clip: a few seconds of aligned per-segment features for
// every modality plus one label per segment.
struct SegmentClip {
  std::string clip_id;
  int segments = 0;
  std::map<std::string, Tensor> features;  // modality -> [N x d_m]
  std::vector<float> labels;               // [N]
};

// segment: one label per row, metrics over every row.
// clip: one label per clip expanded over its rows for the loss; metrics
// read one prediction per clip (its final segment).
enum class LabelGranularity { segment, clip };

struct Dataset {
  Task task = Task::classification;
  LabelGranularity granularity = LabelGranularity::segment;
  std::map<std::string, int> modalities;  // name -> feature width
  std::vector<SegmentClip> train, dev, test;

  std::vector<SegmentClip>& split(const std::string& name);
  const std::vector<SegmentClip>& split(const std::string& name) const;
};

// Headerless CSV, one row per segment, values printed with %.9g so f32
// round-trips exactly.
Tensor read_matrix_csv(const std::string& path);
void write_matrix_csv(const std::string& path, const Tensor& m);

// Manifest JSON: {task, label_granularity?, modalities:{name:dim},
// splits:{train|dev|test:[{clip_id, features:{name:path}, labels:path}]}}.
// Paths resolve relative to the manifest's directory; clips come back
// sorted by clip_id.
Dataset load_dataset(const std::string& manifest_path);
void write_dataset(const Dataset& ds, const std::string& out_dir);

// Annotator-delay compensation: labels move earlier by shift_seconds and
// the tail repeats the final label.
std::vector<float> shift_labels(const std::vector<float>& labels, double shift_seconds,
                                double frame_seconds);

// Cuts one long recording into full windows (count = floor((T-win)/hop)+1).
// Clip ids are base_id plus a zero-padded window index.
std::vector<SegmentClip> window_clips(const Tensor& recording,
                                      const std::vector<float>& labels,
                                      const std::string& modality,
                                      const std::string& base_id,
                                      double win_seconds = 3.0, double hop_seconds = 1.0,
                                      double frame_seconds = 0.04);

struct FeatureStats {
  std::vector<float> mean, stdev;  // stdev floored at 1e-8
};

// Train-split statistics; dev/test are standardized with these same values.
std::map<std::string, FeatureStats> compute_feature_stats(const Dataset& ds);
void standardize(Dataset& ds, const std::map<std::string, FeatureStats>& stats);

// Two-modality generator where the weak modality sees a noisy subset of
// the latent state, giving a controllable strong-over-weak gap.
struct SyntheticSpec {
  int latent_dim = 8;
  int clip_len = 40;
  int train_clips = 200;
  int dev_clips = 50;
  int test_clips = 50;
  int strong_dim = 16;
  int weak_dim = 12;
  int weak_visible = 5;  // latent dims the weak modality mixes from
  double sigma_strong = 0.25;
  double sigma_weak = 1.0;
  std::string label_rule = "sign";  // sign | tanh
  std::uint64_t seed = 0;

  void validate() const;
};

Dataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace cmstew
