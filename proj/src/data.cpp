// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#include "cmstew/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cmstew/rng.hpp"

namespace cmstew {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<SegmentClip>& Dataset::split(const std::string& name) {
  if (name == "train") return train;
  if (name == "dev") return dev;
  if (name == "test") return test;
  throw ConfigError(cat("unknown split \"", name, "\""));
}

const std::vector<SegmentClip>& Dataset::split(const std::string& name) const {
  return const_cast<Dataset*>(this)->split(name);
}

Tensor read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(cat("cannot open ", path));
  std::vector<float> values;
  int cols = -1, row = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row;
    int c = 0;
    const char* p = line.c_str();
    while (true) {
      char* end = nullptr;
      const float v = std::strtof(p, &end);
      if (end == p)
        throw IoError(cat(path, " row ", row, ": non-numeric cell \"", p, "\""));
      values.push_back(v);
      ++c;
      p = end;
      while (*p == ' ' || *p == '\t') ++p;
      if (*p == ',') {
        ++p;
        continue;
      }
      if (*p == '\0') break;
      throw IoError(cat(path, " row ", row, ": unexpected character \"", *p, "\""));
    }
    if (cols == -1) cols = c;
    if (c != cols)
      throw IoError(cat(path, " row ", row, ": expected ", cols, " columns, got ", c));
  }
  if (row == 0) throw IoError(cat(path, ": empty file"));
  Tensor m({row, cols});
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

void write_matrix_csv(const std::string& path, const Tensor& m) {
  check_arg(m.rank() == 2, "write_matrix_csv: rank-2 tensor required");
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(cat("cannot open ", path, " for writing"));
  char buf[40];
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(m.at(i, j)));
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError(cat("write failed for ", path));
}

namespace {

std::vector<float> read_labels_csv(const std::string& path) {
  Tensor m = read_matrix_csv(path);
  if (m.cols() != 1)
    throw IoError(cat(path, ": labels must be a single column, got ", m.cols()));
  std::vector<float> out(static_cast<std::size_t>(m.rows()));
  for (int i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = m[i];
  return out;
}

LabelGranularity granularity_from_name(const std::string& s) {
  if (s == "segment") return LabelGranularity::segment;
  if (s == "clip") return LabelGranularity::clip;
  throw ConfigError(cat("unknown label_granularity \"", s, "\""));
}

SegmentClip load_clip(const json& entry, const fs::path& base,
                      const std::map<std::string, int>& modalities,
                      LabelGranularity granularity) {
  SegmentClip clip;
  clip.clip_id = entry.at("clip_id").get<std::string>();
  const json& feats = entry.at("features");
  int segments = -1;
  for (const auto& [name, dim] : modalities) {
    if (!feats.contains(name))
      throw ConfigError(cat("clip ", clip.clip_id, ": modality \"", name, "\" missing"));
    const std::string rel = feats.at(name).get<std::string>();
    Tensor m = read_matrix_csv((base / rel).string());
    if (m.cols() != dim)
      throw IoError(cat("clip ", clip.clip_id, " modality ", name, ": width ", m.cols(),
                        ", manifest declares ", dim));
    if (segments == -1) segments = m.rows();
    if (m.rows() != segments)
      throw IoError(cat("clip ", clip.clip_id, ": modality ", name, " has ", m.rows(),
                        " segments, others have ", segments));
    clip.features.emplace(name, std::move(m));
  }
  clip.segments = segments;
  const std::string lrel = entry.at("labels").get<std::string>();
  std::vector<float> labels = read_labels_csv((base / lrel).string());
  if (granularity == LabelGranularity::clip) {
    if (labels.size() != 1)
      throw IoError(cat("clip ", clip.clip_id, ": clip-level labels need one row, got ",
                        labels.size()));
    clip.labels.assign(static_cast<std::size_t>(segments), labels[0]);
  } else {
    if (static_cast<int>(labels.size()) != segments)
      throw IoError(cat("clip ", clip.clip_id, ": ", labels.size(), " labels for ",
                        segments, " segments"));
    clip.labels = std::move(labels);
  }
  return clip;
}

}  // namespace

Dataset load_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError(cat("cannot open manifest ", manifest_path));
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(cat("manifest ", manifest_path, ": ", e.what()));
  }

  Dataset ds;
  try {
    ds.task = task_from_name(m.at("task").get<std::string>());
    if (m.contains("label_granularity"))
      ds.granularity = granularity_from_name(m.at("label_granularity").get<std::string>());
    for (const auto& [name, dim] : m.at("modalities").items()) {
      const int d = dim.get<int>();
      if (d <= 0) throw ConfigError(cat("modality \"", name, "\": width must be positive"));
      ds.modalities.emplace(name, d);
    }
    if (ds.modalities.empty()) throw ConfigError("manifest declares no modalities");

    const fs::path base = fs::path(manifest_path).parent_path();
    std::set<std::string> seen_ids;
    const json& splits = m.at("splits");
    for (const std::string split_name : {"train", "dev", "test"}) {
      if (!splits.contains(split_name)) continue;
      auto& out = ds.split(split_name);
      for (const json& entry : splits.at(split_name)) {
        SegmentClip clip = load_clip(entry, base, ds.modalities, ds.granularity);
        if (!seen_ids.insert(clip.clip_id).second)
          throw ConfigError(cat("clip_id \"", clip.clip_id, "\" appears twice"));
        out.push_back(std::move(clip));
      }
      std::sort(out.begin(), out.end(), [](const SegmentClip& a, const SegmentClip& b) {
        return a.clip_id < b.clip_id;
      });
    }
  } catch (const json::exception& e) {
    throw IoError(cat("manifest ", manifest_path, ": ", e.what()));
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& out_dir) {
  const fs::path dir(out_dir);
  fs::create_directories(dir / "clips");

  json m;
  m["task"] = task_name(ds.task);
  m["label_granularity"] =
      ds.granularity == LabelGranularity::clip ? "clip" : "segment";
  json mods = json::object();
  for (const auto& [name, dim] : ds.modalities) mods[name] = dim;
  m["modalities"] = mods;

  json splits = json::object();
  for (const std::string split_name : {"train", "dev", "test"}) {
    json list = json::array();
    for (const SegmentClip& clip : ds.split(split_name)) {
      json entry;
      entry["clip_id"] = clip.clip_id;
      json feats = json::object();
      for (const auto& [name, matrix] : clip.features) {
        const std::string rel = cat("clips/", clip.clip_id, "_", name, ".csv");
        write_matrix_csv((dir / rel).string(), matrix);
        feats[name] = rel;
      }
      entry["features"] = feats;
      const std::string lrel = cat("clips/", clip.clip_id, "_labels.csv");
      Tensor lab({clip.segments, 1});
      for (int i = 0; i < clip.segments; ++i) lab[i] = clip.labels[static_cast<std::size_t>(i)];
      if (ds.granularity == LabelGranularity::clip) {
        Tensor one({1, 1});
        one[0] = clip.labels.empty() ? 0.0f : clip.labels[0];
        write_matrix_csv((dir / lrel).string(), one);
      } else {
        write_matrix_csv((dir / lrel).string(), lab);
      }
      entry["labels"] = lrel;
      list.push_back(entry);
    }
    splits[split_name] = list;
  }
  m["splits"] = splits;

  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError(cat("cannot write manifest in ", out_dir));
  out << m.dump(2) << '\n';
  if (!out) throw IoError(cat("manifest write failed in ", out_dir));
}

std::vector<float> shift_labels(const std::vector<float>& labels, double shift_seconds,
                                double frame_seconds) {
  check_arg(frame_seconds > 0, "shift_labels: frame_seconds must be positive");
  check_arg(shift_seconds >= 0, "shift_labels: negative shift");
  const double ratio = shift_seconds / frame_seconds;
  const auto k = static_cast<std::int64_t>(std::llround(ratio));
  check_arg(std::abs(ratio - static_cast<double>(k)) <= 1e-9,
            cat("shift_labels: shift ", shift_seconds, "s is not a whole number of ",
                frame_seconds, "s frames"));
  const auto T = static_cast<std::int64_t>(labels.size());
  check_arg(k < T, cat("shift_labels: shift of ", k, " frames >= length ", T));
  std::vector<float> out(labels.size());
  for (std::int64_t t = 0; t < T; ++t)
    out[static_cast<std::size_t>(t)] =
        labels[static_cast<std::size_t>(std::min(t + k, T - 1))];
  return out;
}

std::vector<SegmentClip> window_clips(const Tensor& recording,
                                      const std::vector<float>& labels,
                                      const std::string& modality,
                                      const std::string& base_id, double win_seconds,
                                      double hop_seconds, double frame_seconds) {
  check_arg(recording.rank() == 2, "window_clips: rank-2 recording required");
  check_arg(recording.rows() == static_cast<int>(labels.size()),
            cat("window_clips: ", recording.rows(), " frames vs ", labels.size(),
                " labels"));
  check_arg(frame_seconds > 0 && win_seconds > 0 && hop_seconds > 0,
            "window_clips: durations must be positive");
  const int win = static_cast<int>(std::llround(win_seconds / frame_seconds));
  const int hop = static_cast<int>(std::llround(hop_seconds / frame_seconds));
  const int T = recording.rows();
  check_arg(win <= T, cat("window_clips: window of ", win, " frames > recording of ",
                          T, " frames"));

  const int count = (T - win) / hop + 1;
  std::vector<SegmentClip> out;
  out.reserve(static_cast<std::size_t>(count));
  const int d = recording.cols();
  for (int w = 0; w < count; ++w) {
    const int start = w * hop;
    SegmentClip clip;
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "_w%04d", w);
    clip.clip_id = base_id + suffix;
    clip.segments = win;
    Tensor feat({win, d});
    for (int i = 0; i < win; ++i)
      for (int j = 0; j < d; ++j) feat.at(i, j) = recording.at(start + i, j);
    clip.features.emplace(modality, std::move(feat));
    clip.labels.assign(labels.begin() + start, labels.begin() + start + win);
    out.push_back(std::move(clip));
  }
  return out;
}

std::map<std::string, FeatureStats> compute_feature_stats(const Dataset& ds) {
  check_arg(!ds.train.empty(), "feature stats: train split is empty");
  std::map<std::string, FeatureStats> out;
  for (const auto& [name, dim] : ds.modalities) {
    std::vector<double> sum(static_cast<std::size_t>(dim), 0.0);
    std::vector<double> sumsq(static_cast<std::size_t>(dim), 0.0);
    std::int64_t rows = 0;
    for (const SegmentClip& clip : ds.train) {
      const Tensor& m = clip.features.at(name);
      for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < dim; ++j) {
          const double v = m.at(i, j);
          sum[static_cast<std::size_t>(j)] += v;
          sumsq[static_cast<std::size_t>(j)] += v * v;
        }
      }
      rows += m.rows();
    }
    FeatureStats st;
    st.mean.resize(static_cast<std::size_t>(dim));
    st.stdev.resize(static_cast<std::size_t>(dim));
    for (int j = 0; j < dim; ++j) {
      const double mu = sum[static_cast<std::size_t>(j)] / static_cast<double>(rows);
      const double var =
          std::max(0.0, sumsq[static_cast<std::size_t>(j)] / static_cast<double>(rows) -
                            mu * mu);
      st.mean[static_cast<std::size_t>(j)] = static_cast<float>(mu);
      st.stdev[static_cast<std::size_t>(j)] =
          static_cast<float>(std::max(std::sqrt(var), 1e-8));
    }
    out.emplace(name, std::move(st));
  }
  return out;
}

void standardize(Dataset& ds, const std::map<std::string, FeatureStats>& stats) {
  for (auto* split : {&ds.train, &ds.dev, &ds.test}) {
    for (SegmentClip& clip : *split) {
      for (auto& [name, m] : clip.features) {
        const FeatureStats& st = stats.at(name);
        check_arg(static_cast<int>(st.mean.size()) == m.cols(),
                  cat("standardize: stats width ", st.mean.size(), " vs ", m.cols()));
        for (int i = 0; i < m.rows(); ++i)
          for (int j = 0; j < m.cols(); ++j)
            m.at(i, j) = (m.at(i, j) - st.mean[static_cast<std::size_t>(j)]) /
                         st.stdev[static_cast<std::size_t>(j)];
      }
    }
  }
}

void SyntheticSpec::validate() const {
  if (latent_dim < 1) throw ConfigError("synthetic: latent_dim must be positive");
  if (weak_visible < 1 || weak_visible >= latent_dim)
    throw ConfigError(cat("synthetic: weak_visible must be in [1, latent_dim), got ",
                          weak_visible));
  if (clip_len < 2) throw ConfigError("synthetic: clip_len must be at least 2");
  if (train_clips < 1 || dev_clips < 1)
    throw ConfigError("synthetic: train and dev splits need at least one clip");
  if (test_clips < 0) throw ConfigError("synthetic: negative test_clips");
  if (strong_dim < 1 || weak_dim < 1)
    throw ConfigError("synthetic: feature widths must be positive");
  if (sigma_strong < 0 || sigma_weak < 0)
    throw ConfigError("synthetic: negative noise scale");
  if (label_rule != "sign" && label_rule != "tanh")
    throw ConfigError(cat("synthetic: unknown label rule \"", label_rule, "\""));
}

namespace {

// Entries N(0, 1/k_eff) keep feature variance near 1 regardless of width.
Tensor mixing_matrix(int k_eff, int out_dim, Rng& rng) {
  Tensor a({k_eff, out_dim});
  const double scale = 1.0 / std::sqrt(static_cast<double>(k_eff));
  for (std::int64_t i = 0; i < a.size(); ++i)
    a[i] = static_cast<float>(scale * rng.normal());
  return a;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::uint64_t base = mix_seed(spec.seed, fnv1a64("synthetic"));

  Rng mat_rng(mix_seed(base, fnv1a64("mixing")));
  const Tensor a_s = mixing_matrix(spec.latent_dim, spec.strong_dim, mat_rng);
  const Tensor a_w = mixing_matrix(spec.weak_visible, spec.weak_dim, mat_rng);

  // Fixed unit projection defining the label signal.
  Rng lab_rng(mix_seed(base, fnv1a64("label-projection")));
  std::vector<double> c(static_cast<std::size_t>(spec.latent_dim));
  double norm = 0;
  for (auto& v : c) {
    v = lab_rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (auto& v : c) v /= norm;

  Dataset ds;
  ds.task = spec.label_rule == "sign" ? Task::classification : Task::regression;
  ds.granularity = LabelGranularity::segment;
  ds.modalities = {{"strong", spec.strong_dim}, {"weak", spec.weak_dim}};

  const double ar = 0.9;
  const double innovation = std::sqrt(1.0 - ar * ar);  // unit stationary variance
  struct SplitPlan {
    const char* name;
    int clips;
  };
  for (const SplitPlan plan : {SplitPlan{"train", spec.train_clips},
                               SplitPlan{"dev", spec.dev_clips},
                               SplitPlan{"test", spec.test_clips}}) {
    auto& split = ds.split(plan.name);
    const std::uint64_t split_seed = mix_seed(base, fnv1a64(plan.name));
    for (int ci = 0; ci < plan.clips; ++ci) {
      Rng rng(mix_seed(split_seed, static_cast<std::uint64_t>(ci)));
      SegmentClip clip;
      char id[48];
      std::snprintf(id, sizeof id, "%s_%04d", plan.name, ci);
      clip.clip_id = id;
      clip.segments = spec.clip_len;

      std::vector<double> z(static_cast<std::size_t>(spec.latent_dim));
      for (auto& v : z) v = rng.normal();
      Tensor xs({spec.clip_len, spec.strong_dim});
      Tensor xw({spec.clip_len, spec.weak_dim});
      clip.labels.resize(static_cast<std::size_t>(spec.clip_len));
      for (int t = 0; t < spec.clip_len; ++t) {
        if (t > 0) {
          for (auto& v : z) v = ar * v + innovation * rng.normal();
        }
        for (int j = 0; j < spec.strong_dim; ++j) {
          double s = 0;
          for (int i = 0; i < spec.latent_dim; ++i)
            s += z[static_cast<std::size_t>(i)] * a_s.at(i, j);
          xs.at(t, j) = static_cast<float>(s + spec.sigma_strong * rng.normal());
        }
        for (int j = 0; j < spec.weak_dim; ++j) {
          double s = 0;
          for (int i = 0; i < spec.weak_visible; ++i)
            s += z[static_cast<std::size_t>(i)] * a_w.at(i, j);
          xw.at(t, j) = static_cast<float>(s + spec.sigma_weak * rng.normal());
        }
        double proj = 0;
        for (int i = 0; i < spec.latent_dim; ++i)
          proj += c[static_cast<std::size_t>(i)] * z[static_cast<std::size_t>(i)];
        clip.labels[static_cast<std::size_t>(t)] =
            spec.label_rule == "sign" ? (proj >= 0 ? 1.0f : 0.0f)
                                      : static_cast<float>(std::tanh(proj));
      }
      clip.features.emplace("strong", std::move(xs));
      clip.features.emplace("weak", std::move(xw));
      split.push_back(std::move(clip));
    }
  }
  return ds;
}

}  // namespace cmstew
