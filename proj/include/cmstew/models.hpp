// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "cmstew/layers.hpp"

namespace cmstew {

enum class Task { classification, regression };

inline std::string task_name(Task t) {
  return t == Task::classification ? "classification" : "regression";
}

inline Task task_from_name(const std::string& s) {
  if (s == "classification") return Task::classification;
  if (s == "regression") return Task::regression;
  throw ConfigError(cat("unknown task \"", s, "\""));
}

// Architecture knobs for one tower.  gru_hidden == 0 means "match the
// input width", the default sizing rule.
struct EncoderConfig {
  int input_dim = 0;
  int gru_layers = 2;
  int gru_hidden = 0;
  int latent_dim = 100;
  int transformer_layers = 2;
  int heads = 2;
  int ffn_hidden = 400;
  int classifier_hidden = 300;

  int effective_gru_hidden() const { return gru_hidden > 0 ? gru_hidden : input_dim; }

  void validate() const {
    if (input_dim <= 0) throw ConfigError("encoder: input_dim must be positive");
    if (gru_layers != 1 && gru_layers != 2)
      throw ConfigError(cat("encoder: gru_layers must be 1 or 2, got ", gru_layers));
    if (latent_dim <= 0) throw ConfigError("encoder: latent_dim must be positive");
    if (latent_dim % 2 != 0)
      throw ConfigError(cat("encoder: latent_dim must be even, got ", latent_dim));
    if (transformer_layers < 0)
      throw ConfigError("encoder: transformer_layers must be >= 0");
    if (heads < 1 || latent_dim % heads != 0)
      throw ConfigError(cat("encoder: latent_dim ", latent_dim,
                            " not divisible by heads ", heads));
    if (ffn_hidden <= 0) throw ConfigError("encoder: ffn_hidden must be positive");
    if (classifier_hidden <= 0)
      throw ConfigError("encoder: classifier_hidden must be positive");
  }
};

struct DecoderConfig {
  int gru_layers = 1;
  int gru_hidden = 250;
  int output_dim = 0;  // width of the reconstructed features

  void validate() const {
    if (gru_layers != 1 && gru_layers != 2)
      throw ConfigError(cat("decoder: gru_layers must be 1 or 2, got ", gru_layers));
    if (gru_hidden <= 0) throw ConfigError("decoder: gru_hidden must be positive");
    if (output_dim <= 0) throw ConfigError("decoder: output_dim must be positive");
  }
};

// Dropout behavior for one forward pass.  Seeds are derived per site from
// `seed`, so mask draws never depend on evaluation order elsewhere.
struct DropoutPlan {
  double rate = 0.0;
  std::uint64_t seed = 0;
  bool train = false;
};

// Per-feature standardization folded into the model as frozen parameters
// so checkpoints carry everything needed at inference time.
template <typename S>
struct InputNormT {
  ParameterT<S> mean, stdev;

  InputNormT() = default;
  explicit InputNormT(int dim)
      : mean("norm.mean", TensorT<S>({dim})),
        stdev("norm.std", TensorT<S>::full({dim}, S(1))) {
    mean.trainable = false;
    stdev.trainable = false;
  }

  TensorT<S> apply(const TensorT<S>& x) const {
    const int n = x.cols();
    check_arg(n == mean.value.dim(0),
              cat("standardize: width ", n, " vs stats ", mean.value.dim(0)));
    TensorT<S> out(x.shape());
    for (int i = 0; i < x.rows(); ++i) {
      for (int j = 0; j < n; ++j)
        out.at(i, j) = (x.at(i, j) - mean.value[j]) / stdev.value[j];
    }
    return out;
  }

  void collect(std::vector<ParameterT<S>*>& out) {
    out.push_back(&mean);
    out.push_back(&stdev);
  }
};

// BiGRU -> shared dense projection -> sinusoidal positions -> transformer
// stack.  Output is one latent row per segment.
template <typename S>
struct EncoderT {
  EncoderConfig cfg;
  BiGruT<S> gru;
  DenseT<S> proj;
  std::vector<TransformerLayerT<S>> tf;

  EncoderT() = default;
  EncoderT(const EncoderConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    gru = BiGruT<S>("enc.gru", cfg.input_dim, cfg.effective_gru_hidden(),
                    cfg.gru_layers, seed);
    proj = DenseT<S>("enc.proj", 2 * cfg.effective_gru_hidden(), cfg.latent_dim, seed);
    for (int l = 0; l < cfg.transformer_layers; ++l)
      tf.emplace_back(cat("enc.tf", l), cfg.latent_dim, cfg.heads, cfg.ffn_hidden, seed);
  }

  Var<S> forward(Tape<S>& t, Var<S> x, const ClipSpans& spans, const DropoutPlan& dp) {
    Var<S> h = gru.forward(t, x, spans, dp.rate,
                           mix_seed(dp.seed, fnv1a64("enc.gru")), dp.train);
    Var<S> z = proj.forward(t, h);
    z = ops::add(z, t.constant(sinusoidal_positions<S>(spans, cfg.latent_dim)));
    for (std::size_t l = 0; l < tf.size(); ++l) {
      z = tf[l].forward(t, z, spans, dp.rate,
                        mix_seed(dp.seed, fnv1a64(cat("enc.tf", l))), dp.train);
    }
    return z;
  }

  void collect(std::vector<ParameterT<S>*>& out) {
    gru.collect(out);
    proj.collect(out);
    for (auto& layer : tf) layer.collect(out);
  }
};

// Two dense layers with dropout between; sigmoid for classification,
// tanh for regression targets in [-1, 1].  The 0.3 rate is part of the
// head's definition and does not follow the configured dropout.
inline constexpr double kClassifierDropout = 0.3;

template <typename S>
struct ClassifierT {
  Task task = Task::classification;
  DenseT<S> fc1, fc2;

  ClassifierT() = default;
  ClassifierT(Task tk, int in, int hidden, std::uint64_t seed)
      : task(tk),
        fc1("cls.fc1", in, hidden, seed),
        fc2("cls.fc2", hidden, 1, seed) {}

  Var<S> forward(Tape<S>& t, Var<S> z, const DropoutPlan& dp) {
    Var<S> h = ops::relu(fc1.forward(t, z));
    h = ops::dropout(h, kClassifierDropout, mix_seed(dp.seed, fnv1a64("cls.drop")),
                     dp.train);
    Var<S> o = fc2.forward(t, h);
    return task == Task::classification ? ops::sigmoid(o) : ops::tanh_act(o);
  }

  void collect(std::vector<ParameterT<S>*>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }
};

// Maps weak latents back to the strong feature space; linear output since
// targets are standardized.
template <typename S>
struct DecoderT {
  DecoderConfig cfg;
  BiGruT<S> gru;
  DenseT<S> out;

  DecoderT() = default;
  DecoderT(const DecoderConfig& c, int latent_dim, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    gru = BiGruT<S>("dec.gru", latent_dim, cfg.gru_hidden, cfg.gru_layers, seed);
    out = DenseT<S>("dec.out", 2 * cfg.gru_hidden, cfg.output_dim, seed);
  }

  Var<S> forward(Tape<S>& t, Var<S> z, const ClipSpans& spans, const DropoutPlan& dp) {
    Var<S> h = gru.forward(t, z, spans, dp.rate,
                           mix_seed(dp.seed, fnv1a64("dec.gru")), dp.train);
    return out.forward(t, h);
  }

  void collect(std::vector<ParameterT<S>*>& out_params) {
    gru.collect(out_params);
    out.collect(out_params);
  }
};

// Stage-1 tower: encoder plus classifier on one modality.
template <typename S>
struct SourceModelT {
  Task task = Task::classification;
  InputNormT<S> norm;
  EncoderT<S> enc;
  ClassifierT<S> cls;

  SourceModelT() = default;
  SourceModelT(Task tk, const EncoderConfig& c, std::uint64_t seed)
      : task(tk),
        norm(c.input_dim),
        enc(c, seed),
        cls(tk, c.latent_dim, c.classifier_hidden, seed) {}

  Var<S> latent(Tape<S>& t, const TensorT<S>& features, const ClipSpans& spans,
                const DropoutPlan& dp) {
    return enc.forward(t, t.constant(norm.apply(features)), spans, dp);
  }

  Var<S> predict(Tape<S>& t, Var<S> z, const DropoutPlan& dp) {
    return cls.forward(t, z, dp);
  }

  // Fixed parameter order; the checkpoint layout and the optimizer both
  // walk this list.
  std::vector<ParameterT<S>*> parameters() {
    std::vector<ParameterT<S>*> out;
    norm.collect(out);
    enc.collect(out);
    cls.collect(out);
    return out;
  }

  void freeze() {
    for (auto* p : parameters()) p->trainable = false;
  }
};

// Stage-2 tower: weak-modality encoder and classifier plus the decoder
// that reconstructs standardized strong features.  The decoder is absent
// entirely when the translation loss is ablated, not just unused.
template <typename S>
struct WeakModelT {
  Task task = Task::classification;
  InputNormT<S> norm;
  EncoderT<S> enc;
  std::optional<DecoderT<S>> dec;
  ClassifierT<S> cls;

  WeakModelT() = default;
  WeakModelT(Task tk, const EncoderConfig& c, std::uint64_t seed)
      : task(tk),
        norm(c.input_dim),
        enc(c, seed),
        cls(tk, c.latent_dim, c.classifier_hidden, seed) {}
  WeakModelT(Task tk, const EncoderConfig& c, const DecoderConfig& d, std::uint64_t seed)
      : WeakModelT(tk, c, seed) {
    dec.emplace(d, c.latent_dim, seed);
  }

  bool has_decoder() const { return dec.has_value(); }

  Var<S> latent(Tape<S>& t, const TensorT<S>& features, const ClipSpans& spans,
                const DropoutPlan& dp) {
    return enc.forward(t, t.constant(norm.apply(features)), spans, dp);
  }

  Var<S> predict(Tape<S>& t, Var<S> z, const DropoutPlan& dp) {
    return cls.forward(t, z, dp);
  }

  Var<S> reconstruct(Tape<S>& t, Var<S> z, const ClipSpans& spans,
                     const DropoutPlan& dp) {
    check_arg(dec.has_value(), "weak model: no decoder configured");
    return dec->forward(t, z, spans, dp);
  }

  // Decoder parameters come last so the encoder/classifier payload is a
  // byte-comparable prefix shared with the stage-1 layout.
  std::vector<ParameterT<S>*> parameters() {
    std::vector<ParameterT<S>*> out;
    norm.collect(out);
    enc.collect(out);
    cls.collect(out);
    if (dec) dec->collect(out);
    return out;
  }
};

template <typename S>
std::int64_t parameter_count(std::vector<ParameterT<S>*> params) {
  std::int64_t n = 0;
  for (const auto* p : params) n += p->value.size();
  return n;
}

enum class MetricKind { higher_better, lower_better };

// One modality's uni-modal dev score under a shared metric.
struct ModalityRecord {
  std::string name;
  int feature_dim = 0;
  double score = 0.0;
  MetricKind kind = MetricKind::higher_better;
};

// Orders modalities strongest first.  Ties fall back to lexicographic
// order by name and are reported through `warnings` when given.
inline std::vector<ModalityRecord> rank_modalities(
    std::vector<ModalityRecord> records, std::vector<std::string>* warnings = nullptr) {
  if (records.size() < 2)
    throw ConfigError("rank_modalities: need at least 2 modalities");
  for (const ModalityRecord& r : records) {
    if (r.kind != records.front().kind)
      throw ConfigError("rank_modalities: mixed metric kinds are not comparable");
  }
  const bool higher = records.front().kind == MetricKind::higher_better;
  std::stable_sort(records.begin(), records.end(),
                   [higher](const ModalityRecord& a, const ModalityRecord& b) {
                     if (a.score != b.score)
                       return higher ? a.score > b.score : a.score < b.score;
                     return a.name < b.name;
                   });
  if (warnings) {
    for (std::size_t i = 1; i < records.size(); ++i) {
      if (records[i].score == records[i - 1].score)
        warnings->push_back(cat("rank_modalities: tie between \"", records[i - 1].name,
                                "\" and \"", records[i].name,
                                "\" broken lexicographically"));
    }
  }
  return records;
}

}  // namespace cmstew
