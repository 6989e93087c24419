// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#include "cmstew/training.hpp"

#include <chrono>
#include <cstdio>
#include <limits>

#include <json.hpp>

namespace cmstew {

namespace {

using Clock = std::chrono::steady_clock;

struct Batch {
  TensorT<float> x;        // [rows x d_modality]
  TensorT<float> strong;   // [rows x d_strong], only for weak training
  TensorT<float> labels;   // [rows x 1]
  ClipSpans spans;
};

Batch assemble_batch(const std::vector<SegmentClip>& clips, const std::vector<int>& order,
                     std::size_t from, std::size_t to, const std::string& modality,
                     const std::string* strong_modality) {
  Batch b;
  b.spans.offsets.push_back(0);
  std::int64_t rows = 0;
  for (std::size_t i = from; i < to; ++i) {
    rows += clips[static_cast<std::size_t>(order[i])].segments;
    b.spans.offsets.push_back(rows);
  }
  const int d = clips[static_cast<std::size_t>(order[from])].features.at(modality).cols();
  b.x = TensorT<float>({static_cast<int>(rows), d});
  b.labels = TensorT<float>({static_cast<int>(rows), 1});
  int ds = 0;
  if (strong_modality) {
    ds = clips[static_cast<std::size_t>(order[from])].features.at(*strong_modality).cols();
    b.strong = TensorT<float>({static_cast<int>(rows), ds});
  }
  std::int64_t row = 0;
  for (std::size_t i = from; i < to; ++i) {
    const SegmentClip& clip = clips[static_cast<std::size_t>(order[i])];
    const Tensor& f = clip.features.at(modality);
    for (int r = 0; r < clip.segments; ++r, ++row) {
      for (int j = 0; j < d; ++j) b.x.at(static_cast<int>(row), j) = f.at(r, j);
      b.labels[row] = clip.labels[static_cast<std::size_t>(r)];
      if (strong_modality) {
        const Tensor& s = clip.features.at(*strong_modality);
        for (int j = 0; j < ds; ++j) b.strong.at(static_cast<int>(row), j) = s.at(r, j);
      }
    }
  }
  return b;
}

// Weighted-by-rows epoch aggregates for the train split.
struct EpochAccum {
  double lp = 0, la = 0, lt = 0, total = 0;
  std::int64_t rows = 0;
  bool any_la = false, any_lt = false;
  std::vector<double> preds, labels;

  void add_losses(double lpv, std::optional<double> lav, std::optional<double> ltv,
                  double totalv, std::int64_t n) {
    lp += lpv * static_cast<double>(n);
    if (lav) {
      la += *lav * static_cast<double>(n);
      any_la = true;
    }
    if (ltv) {
      lt += *ltv * static_cast<double>(n);
      any_lt = true;
    }
    total += totalv * static_cast<double>(n);
    rows += n;
  }

  SplitReport finish(Task task, bool report_la, bool report_lt) const {
    SplitReport r;
    const double n = static_cast<double>(rows);
    r.loss_p = lp / n;
    if (report_la) r.loss_a = la / n;  // skipped batches count as zero
    if (report_lt) r.loss_t = lt / n;
    r.loss_total = total / n;
    if (task == Task::classification) {
      r.acc = binary_accuracy(preds, labels);
      r.f1 = weighted_f1(preds, labels);
    } else {
      r.ccc_v = ccc(preds, labels);
    }
    return r;
  }
};

void collect_train_metrics(EpochAccum& acc, const TensorT<float>& preds,
                           const TensorT<float>& labels, const ClipSpans& spans,
                           LabelGranularity granularity) {
  for (int c = 0; c < spans.clips(); ++c) {
    for (std::int64_t r = spans.begin(c); r < spans.end(c); ++r) {
      const int local = static_cast<int>(r - spans.begin(c));
      if (!detail::metric_row(granularity, local, static_cast<int>(spans.len(c))))
        continue;
      acc.preds.push_back(static_cast<double>(preds[r]));
      acc.labels.push_back(static_cast<double>(labels[r]));
    }
  }
}

std::vector<int> epoch_order(std::size_t clips, std::uint64_t seed, int epoch) {
  std::vector<int> order(clips);
  for (std::size_t i = 0; i < clips; ++i) order[i] = static_cast<int>(i);
  Rng rng(mix_seed(mix_seed(seed, fnv1a64("shuffle")), static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

std::uint64_t batch_dropout_seed(std::uint64_t seed, int epoch, std::size_t batch) {
  return mix_seed(mix_seed(mix_seed(seed, fnv1a64("dropout")), static_cast<std::uint64_t>(epoch)),
                  static_cast<std::uint64_t>(batch));
}

// Divergence reports carry the epoch they happened in.
template <typename F>
auto at_epoch(int epoch, F&& f) {
  try {
    return f();
  } catch (const DivergenceError& e) {
    throw DivergenceError(cat("epoch ", epoch, ": ", e.what()));
  }
}

// Shared early-stopping scaffold: runs one epoch via `run_train_epoch`,
// evaluates dev, snapshots on improvement, restores the best weights.
template <typename Model, typename RunEpoch>
TrainResult run_stages(Model& model, const Dataset& ds, const std::string& eval_modality,
                       const TrainConfig& cfg, const std::string& run_id,
                       const std::string& stage, const MetricsSink& sink,
                       RunEpoch run_train_epoch) {
  if (ds.train.empty()) throw ConfigError("train: empty train split");
  if (ds.dev.empty()) throw ConfigError("train: empty dev split");

  auto params = model.parameters();
  std::vector<TensorT<float>> best_values;
  auto snapshot = [&] {
    best_values.clear();
    for (const auto* p : params) best_values.push_back(p->value);
  };
  auto restore = [&] {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  };
  snapshot();  // epoch -1 fallback in case nothing ever improves

  TrainResult result;
  double best = -std::numeric_limits<double>::infinity();
  int stale = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = Clock::now();
    EpochReport report;
    report.epoch = epoch;
    report.train = run_train_epoch(epoch);

    EvalMetrics dev = evaluate_model(model, ds.dev, eval_modality, ds.granularity);
    report.dev.loss_p = dev.loss_p;
    report.dev.loss_total = dev.loss_p;
    report.dev.acc = dev.acc;
    report.dev.f1 = dev.f1;
    report.dev.ccc_v = dev.ccc_v;
    report.seconds = std::chrono::duration<double>(Clock::now() - t0).count();

    if (sink) {
      sink(metrics_line(run_id, stage, report, "train"));
      sink(metrics_line(run_id, stage, report, "dev"));
    }
    result.history.push_back(report);

    const double sel = dev.selection();
    if (sel > best) {
      best = sel;
      result.best_epoch = epoch;
      result.best_metric = sel;
      snapshot();
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  restore();
  return result;
}

}  // namespace

std::string metrics_line(const std::string& run_id, const std::string& stage,
                         const EpochReport& report, const std::string& split) {
  const SplitReport& s = split == "train" ? report.train : report.dev;
  nlohmann::ordered_json j;
  j["run_id"] = run_id;
  j["stage"] = stage;
  j["epoch"] = report.epoch;
  j["split"] = split;
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  j["loss_p"] = s.loss_p;
  j["loss_a"] = opt(s.loss_a);
  j["loss_t"] = opt(s.loss_t);
  j["loss_total"] = s.loss_total;
  j["acc"] = opt(s.acc);
  j["f1"] = opt(s.f1);
  j["ccc"] = opt(s.ccc_v);
  j["seconds"] = report.seconds;
  return j.dump();
}

TrainResult train_source(SourceModel& model, const Dataset& ds, const std::string& modality,
                         const TrainConfig& cfg, const std::string& run_id,
                         const MetricsSink& sink) {
  cfg.validate();
  if (!ds.modalities.count(modality))
    throw ConfigError(cat("train: modality \"", modality, "\" not in dataset"));
  if (ds.modalities.at(modality) != model.enc.cfg.input_dim)
    throw ConfigError(cat("train: modality width ", ds.modalities.at(modality),
                          " vs encoder input ", model.enc.cfg.input_dim));
  if (model.task != cfg.task) throw ConfigError("train: model/config task mismatch");

  Adam adam(model.parameters(), cfg.lr);
  TrainResult result = run_stages(
      model, ds, modality, cfg, run_id, "source", sink, [&](int epoch) {
        const std::vector<int> order = epoch_order(ds.train.size(), cfg.seed, epoch);
        EpochAccum acc;
        const auto bs = static_cast<std::size_t>(cfg.batch_size);
        for (std::size_t from = 0, bi = 0; from < order.size(); from += bs, ++bi) {
          const std::size_t to = std::min(order.size(), from + bs);
          Batch b = assemble_batch(ds.train, order, from, to, modality, nullptr);
          const DropoutPlan plan{cfg.dropout_rate, batch_dropout_seed(cfg.seed, epoch, bi),
                                 true};
          Tape<float> tape;
          Var<float> z = model.latent(tape, b.x, b.spans, plan);
          Var<float> yhat = model.predict(tape, z, plan);
          const std::int64_t rows = b.spans.total();
          Var<float> lp = prediction_loss(model.task, yhat, TensorT<float>(b.labels));
          const double total = at_epoch(epoch, [&] {
            return total_loss_value(static_cast<double>(lp.val()[0]), std::nullopt,
                                    std::nullopt, 0.0, 0.0);
          });
          collect_train_metrics(acc, yhat.val(), b.labels, b.spans, ds.granularity);
          acc.add_losses(total, std::nullopt, std::nullopt, total, rows);
          adam.zero_grads();
          tape.backward(lp);
          at_epoch(epoch, [&] { adam.step(); });
        }
        return acc.finish(model.task, false, false);
      });
  model.freeze();
  return result;
}

TrainResult train_weak(WeakModel& model, const SourceModel& source, const Dataset& ds,
                       const std::string& weak_modality, const std::string& strong_modality,
                       const TrainConfig& cfg, const std::string& run_id,
                       const MetricsSink& sink) {
  cfg.validate();
  for (const std::string* m : {&weak_modality, &strong_modality}) {
    if (!ds.modalities.count(*m))
      throw ConfigError(cat("train: modality \"", *m, "\" not in dataset"));
  }
  if (ds.modalities.at(weak_modality) != model.enc.cfg.input_dim)
    throw ConfigError(cat("train: weak modality width ", ds.modalities.at(weak_modality),
                          " vs encoder input ", model.enc.cfg.input_dim));
  if (model.enc.cfg.latent_dim != source.enc.cfg.latent_dim)
    throw ConfigError(cat("train: latent width ", model.enc.cfg.latent_dim,
                          " vs source latent ", source.enc.cfg.latent_dim));
  if (model.task != cfg.task) throw ConfigError("train: model/config task mismatch");

  const double alpha = cfg.effective_alpha();
  const double beta = cfg.effective_beta();
  if (beta != 0.0) {
    if (!model.has_decoder())
      throw ConfigError("train: translation loss enabled but the model has no decoder");
    if (model.dec->cfg.output_dim != ds.modalities.at(strong_modality))
      throw ConfigError(cat("train: decoder width ", model.dec->cfg.output_dim,
                            " vs strong modality ", ds.modalities.at(strong_modality)));
  }
  const DropoutPlan eval_plan{0.0, 0, false};

  Adam adam(model.parameters(), cfg.lr);
  return run_stages(
      model, ds, weak_modality, cfg, run_id, "weak", sink, [&](int epoch) {
        const std::vector<int> order = epoch_order(ds.train.size(), cfg.seed, epoch);
        EpochAccum acc;
        int dcca_skips = 0;
        const auto bs = static_cast<std::size_t>(cfg.batch_size);
        for (std::size_t from = 0, bi = 0; from < order.size(); from += bs, ++bi) {
          const std::size_t to = std::min(order.size(), from + bs);
          Batch b = assemble_batch(ds.train, order, from, to, weak_modality,
                                   &strong_modality);
          const std::int64_t rows = b.spans.total();
          const DropoutPlan plan{cfg.dropout_rate, batch_dropout_seed(cfg.seed, epoch, bi),
                                 true};
          Tape<float> tape;
          Var<float> zw = model.latent(tape, b.x, b.spans, plan);
          Var<float> yhat = model.predict(tape, zw, plan);
          Var<float> lp = prediction_loss(model.task, yhat, TensorT<float>(b.labels));

          std::optional<Var<float>> la;
          if (alpha != 0.0) {
            if (rows < model.enc.cfg.latent_dim + 1) {
              ++dcca_skips;  // covariance would be rank-deficient
            } else {
              // The source latent is a constant target on this tape.
              Tape<float> source_tape;
              Var<float> zs = const_cast<SourceModel&>(source).latent(
                  source_tape, b.strong, b.spans, eval_plan);
              la = alignment_loss(tape.constant(zs.val()), zw, cfg.dcca);
            }
          }
          std::optional<Var<float>> lt;
          if (beta != 0.0) {
            TensorT<float> target = source.norm.apply(b.strong);
            Var<float> recon = model.reconstruct(tape, zw, b.spans, plan);
            if (cfg.mask_zero_rows) {
              std::vector<unsigned char> keep(static_cast<std::size_t>(rows), 1);
              std::int64_t kept = 0;
              for (std::int64_t r = 0; r < rows; ++r) {
                bool all_zero = true;
                for (int j = 0; j < b.strong.cols() && all_zero; ++j)
                  all_zero = b.strong.at(static_cast<int>(r), j) == 0.0f;
                keep[static_cast<std::size_t>(r)] = all_zero ? 0 : 1;
                kept += keep[static_cast<std::size_t>(r)];
              }
              if (kept > 0)
                lt = ops::mae_loss_masked(recon, std::move(target), std::move(keep));
            } else {
              lt = translation_loss(recon, std::move(target));
            }
          }

          const auto opt_val = [](const std::optional<Var<float>>& v) {
            return v ? std::optional<double>(static_cast<double>(v->val()[0]))
                     : std::nullopt;
          };
          const double total = at_epoch(epoch, [&] {
            return total_loss_value(static_cast<double>(lp.val()[0]), opt_val(la),
                                    opt_val(lt), alpha, beta);
          });
          collect_train_metrics(acc, yhat.val(), b.labels, b.spans, ds.granularity);
          acc.add_losses(static_cast<double>(lp.val()[0]), opt_val(la), opt_val(lt), total,
                         rows);

          Var<float> loss = total_loss(lp, la, lt, alpha, beta);
          adam.zero_grads();
          tape.backward(loss);
          at_epoch(epoch, [&] { adam.step(); });
        }
        if (dcca_skips > 0) {
          std::fprintf(stderr,
                       "[%s] epoch %d: alignment loss skipped for %d short batch(es)\n",
                       run_id.c_str(), epoch, dcca_skips);
        }
        return acc.finish(model.task, alpha != 0.0, beta != 0.0);
      });
}

}  // namespace cmstew
