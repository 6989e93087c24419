// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cmstew/data.hpp"
#include "cmstew/objectives.hpp"

namespace cmstew {

enum class Ablation { none, no_lfa, no_decoder };

inline std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::no_lfa: return "no_lfa";
    case Ablation::no_decoder: return "no_decoder";
    default: return "none";
  }
}

inline Ablation ablation_from_name(const std::string& s) {
  if (s == "none") return Ablation::none;
  if (s == "no_lfa") return Ablation::no_lfa;
  if (s == "no_decoder") return Ablation::no_decoder;
  throw ConfigError(cat("unknown ablation \"", s, "\""));
}

struct TrainConfig {
  Task task = Task::classification;
  double lr = 1e-4;
  int batch_size = 32;
  int max_epochs = 100;
  int patience = 20;
  double alpha = 1.0;
  double beta = 1.0;
  DccaOptions dcca;
  double dropout_rate = 0.3;
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::none;
  bool mask_zero_rows = false;  // exclude all-zero strong rows from the translation loss

  // Ablations pin the corresponding weight to zero whatever the config says.
  double effective_alpha() const { return ablation == Ablation::no_lfa ? 0.0 : alpha; }
  double effective_beta() const { return ablation == Ablation::no_decoder ? 0.0 : beta; }

  void validate() const {
    if (lr <= 0) throw ConfigError("train: lr must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be at least 1");
    if (patience < 1) throw ConfigError("train: patience must be at least 1");
    if (dropout_rate < 0 || dropout_rate >= 1)
      throw ConfigError(cat("train: dropout_rate must be in [0,1), got ", dropout_rate));
  }
};

// Bias-corrected Adam over an externally owned parameter list.  Gradients
// are consumed from Parameter::grad and cleared by the caller.
template <typename S>
class AdamT {
 public:
  AdamT(std::vector<ParameterT<S>*> params, double lr, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto* p : params_) {
      slots_.push_back({TensorT<S>(p->value.shape()), TensorT<S>(p->value.shape())});
    }
  }

  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      ParameterT<S>* p = params_[k];
      if (!p->trainable) continue;
      auto& [m, v] = slots_[k];
      for (std::int64_t i = 0; i < p->value.size(); ++i) {
        const double g = static_cast<double>(p->grad[i]);
        if (!std::isfinite(g))
          throw DivergenceError(cat("non-finite gradient in parameter \"", p->name, "\""));
        const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * g;
        const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * g * g;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        const double update = lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
        p->value[i] = static_cast<S>(static_cast<double>(p->value[i]) - update);
      }
    }
  }

  void zero_grads() {
    for (auto* p : params_) p->zero_grad();
  }

  std::int64_t step_count() const { return step_; }

 private:
  struct Slot {
    TensorT<S> m, v;
  };
  std::vector<ParameterT<S>*> params_;
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
};

using Adam = AdamT<float>;

// Loss components and metrics for one split at one epoch.  Absent pieces
// stay unset and serialize as null.
struct SplitReport {
  double loss_p = 0.0;
  std::optional<double> loss_a, loss_t;
  double loss_total = 0.0;
  std::optional<double> acc, f1, ccc_v;
};

struct EpochReport {
  int epoch = 0;
  SplitReport train, dev;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochReport> history;
  int best_epoch = -1;
  double best_metric = 0.0;
};

// Receives one finished JSON line (no newline) per split per epoch.
using MetricsSink = std::function<void(const std::string&)>;

std::string metrics_line(const std::string& run_id, const std::string& stage,
                         const EpochReport& report, const std::string& split);

using SourceModel = SourceModelT<float>;
using WeakModel = WeakModelT<float>;

// Copies per-modality statistics into the model's frozen normalizer.
template <typename S, typename Model>
void set_input_norm(Model& model, const FeatureStats& stats) {
  check_arg(static_cast<int>(stats.mean.size()) == model.norm.mean.value.dim(0),
            "set_input_norm: stats width mismatch");
  for (std::size_t i = 0; i < stats.mean.size(); ++i) {
    model.norm.mean.value[static_cast<std::int64_t>(i)] = static_cast<S>(stats.mean[i]);
    model.norm.stdev.value[static_cast<std::int64_t>(i)] = static_cast<S>(stats.stdev[i]);
  }
}

struct EvalMetrics {
  double loss_p = 0.0;
  std::optional<double> acc, f1, ccc_v;
  // Higher-is-better scalar used for model selection.
  double selection() const { return acc ? *acc : *ccc_v; }
};

namespace detail {

// Rows used for metric computation: every segment, or each clip's final
// segment when labels are per-clip.
inline bool metric_row(LabelGranularity g, int row, int clip_rows) {
  return g == LabelGranularity::segment || row == clip_rows - 1;
}

}  // namespace detail

// Deterministic eval-mode pass, one clip per tape.  Classification reports
// accuracy and weighted F1; regression reports one CCC over the
// concatenated predictions.
template <typename Model>
EvalMetrics evaluate_model(Model& model, const std::vector<SegmentClip>& clips,
                           const std::string& modality, LabelGranularity granularity) {
  if (clips.empty()) throw ConfigError("evaluate: empty split");
  const DropoutPlan eval_plan{0.0, 0, false};
  std::vector<double> preds, labels;
  double loss_sum = 0.0;
  std::int64_t loss_rows = 0;
  for (const SegmentClip& clip : clips) {
    Tape<float> tape;
    ClipSpans spans = ClipSpans::uniform(1, clip.segments);
    Var<float> z = model.latent(tape, clip.features.at(modality), spans, eval_plan);
    Var<float> yhat = model.predict(tape, z, eval_plan);
    TensorT<float> target({clip.segments, 1});
    for (int i = 0; i < clip.segments; ++i)
      target[i] = clip.labels[static_cast<std::size_t>(i)];
    Var<float> lp = prediction_loss(model.task, yhat, std::move(target));
    loss_sum += static_cast<double>(lp.val()[0]) * clip.segments;
    loss_rows += clip.segments;
    for (int i = 0; i < clip.segments; ++i) {
      if (!detail::metric_row(granularity, i, clip.segments)) continue;
      preds.push_back(static_cast<double>(yhat.val()[i]));
      labels.push_back(static_cast<double>(clip.labels[static_cast<std::size_t>(i)]));
    }
  }
  EvalMetrics out;
  out.loss_p = loss_sum / static_cast<double>(loss_rows);
  if (model.task == Task::classification) {
    out.acc = binary_accuracy(preds, labels);
    out.f1 = weighted_f1(preds, labels);
  } else {
    out.ccc_v = ccc(preds, labels);
  }
  return out;
}

// Stage 1: uni-modal encoder-classifier on one modality, early-stopped on
// the dev selection metric; the model is left at (and frozen to) its best
// epoch.
TrainResult train_source(SourceModel& model, const Dataset& ds,
                         const std::string& modality, const TrainConfig& cfg,
                         const std::string& run_id = "run",
                         const MetricsSink& sink = nullptr);

// Stage 2: weak tower trained against the frozen source with
// L = Lp + alpha*La + beta*Lt.  The source provides latent alignment
// targets and the standardized strong features the decoder reconstructs.
TrainResult train_weak(WeakModel& model, const SourceModel& source, const Dataset& ds,
                       const std::string& weak_modality,
                       const std::string& strong_modality, const TrainConfig& cfg,
                       const std::string& run_id = "run",
                       const MetricsSink& sink = nullptr);

}  // namespace cmstew
