// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#include "cmstew/training.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include <doctest.h>
#include <json.hpp>

#include "cmstew/checkpoint.hpp"
#include "fd_util.hpp"

using namespace cmstew;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("cmstew_train_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Payload bytes of a checkpoint file (between the marker and the checksum).
std::string payload_of(const std::string& bytes) {
  const std::string marker = "payload\n";
  const auto pos = bytes.find(marker);
  REQUIRE(pos != std::string::npos);
  const auto begin = pos + marker.size();
  REQUIRE(bytes.size() >= begin + 8);
  return bytes.substr(begin, bytes.size() - begin - 8);
}

SyntheticSpec tiny_spec(std::uint64_t seed, const std::string& rule = "sign") {
  SyntheticSpec spec;
  spec.latent_dim = 4;
  spec.clip_len = 6;
  spec.train_clips = 12;
  spec.dev_clips = 6;
  spec.test_clips = 6;
  spec.strong_dim = 5;
  spec.weak_dim = 4;
  spec.weak_visible = 2;
  spec.label_rule = rule;
  spec.seed = seed;
  return spec;
}

EncoderConfig tiny_encoder(int input_dim) {
  EncoderConfig c;
  c.input_dim = input_dim;
  c.gru_layers = 1;
  c.gru_hidden = 0;
  c.latent_dim = 8;
  c.transformer_layers = 1;
  c.heads = 2;
  c.ffn_hidden = 12;
  c.classifier_hidden = 8;
  return c;
}

TrainConfig tiny_config(Task task) {
  TrainConfig cfg;
  cfg.task = task;
  cfg.lr = 1e-3;
  cfg.batch_size = 4;
  cfg.max_epochs = 3;
  cfg.patience = 5;
  cfg.dropout_rate = 0.3;
  cfg.seed = 11;
  return cfg;
}

void prepare(Dataset& ds, const std::string& modality, auto& model) {
  set_input_norm<float>(model, compute_feature_stats(ds).at(modality));
}

bool same_split(const SplitReport& a, const SplitReport& b) {
  return a.loss_p == b.loss_p && a.loss_a == b.loss_a && a.loss_t == b.loss_t &&
         a.loss_total == b.loss_total && a.acc == b.acc && a.f1 == b.f1 &&
         a.ccc_v == b.ccc_v;
}

bool same_history(const TrainResult& a, const TrainResult& b) {
  if (a.history.size() != b.history.size()) return false;
  if (a.best_epoch != b.best_epoch || a.best_metric != b.best_metric) return false;
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    if (a.history[i].epoch != b.history[i].epoch) return false;
    if (!same_split(a.history[i].train, b.history[i].train)) return false;
    if (!same_split(a.history[i].dev, b.history[i].dev)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("adam matches a hand-stepped oracle on f(w) = w^2") {
  ParameterT<double> w("w", TensorT<double>({1}));
  w.value[0] = 1.0;
  AdamT<double> adam({&w}, 0.1);

  double ow = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = 2.0 * w.value[0];
    w.grad[0] = g;
    adam.step();
    w.zero_grad();

    const double og = 2.0 * ow;
    m = 0.9 * m + 0.1 * og;
    v = 0.999 * v + 0.001 * og * og;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    ow -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(std::abs(w.value[0] - ow) < 1e-8);
  }
  CHECK(adam.step_count() == 3);
}

TEST_CASE("adam first step has magnitude close to the learning rate") {
  ParameterT<double> w("w", TensorT<double>({2}));
  w.value[0] = 0.5;
  w.value[1] = -0.25;
  AdamT<double> adam({&w}, 0.05);
  w.grad[0] = 3.0;
  w.grad[1] = -1e-4;
  adam.step();
  CHECK(0.5 - w.value[0] == doctest::Approx(0.05).epsilon(1e-6));
  CHECK(w.value[1] - (-0.25) == doctest::Approx(0.05).epsilon(1e-3));
}

TEST_CASE("adam leaves parameters untouched when gradients are zero") {
  ParameterT<float> w("w", TensorT<float>({3}));
  w.value[0] = 1.0f;
  w.value[1] = -2.5f;
  w.value[2] = 0.125f;
  Adam adam({&w}, 0.1);
  for (int t = 0; t < 4; ++t) adam.step();
  CHECK(w.value[0] == 1.0f);
  CHECK(w.value[1] == -2.5f);
  CHECK(w.value[2] == 0.125f);
}

TEST_CASE("adam skips frozen parameters and reports non-finite gradients") {
  ParameterT<float> frozen("norm.mean", TensorT<float>({1}));
  frozen.trainable = false;
  frozen.value[0] = 2.0f;
  frozen.grad[0] = 5.0f;
  ParameterT<float> live("enc.proj.w", TensorT<float>({1}));
  live.value[0] = 1.0f;

  Adam adam({&frozen, &live}, 0.1);
  live.grad[0] = 1.0f;
  adam.step();
  CHECK(frozen.value[0] == 2.0f);
  CHECK(live.value[0] != 1.0f);

  live.grad[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(adam.step(), doctest::Contains("enc.proj.w"), DivergenceError);
}

TEST_CASE("one optimizer step at a tiny rate decreases the batch loss") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EncoderConfig ec = tiny_encoder(3);
    SourceModelT<float> model(Task::classification, ec, seed);
    Rng rng(mix_seed(seed, 99));
    TensorT<float> x({9, 3});
    for (std::int64_t i = 0; i < x.size(); ++i)
      x[i] = static_cast<float>(rng.uniform() * 2 - 1);
    TensorT<float> y({9, 1});
    for (std::int64_t i = 0; i < 9; ++i) y[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
    ClipSpans spans = ClipSpans::uniform(3, 3);
    const DropoutPlan plan{0.0, 0, false};

    auto loss_value = [&] {
      Tape<float> t;
      Var<float> z = model.latent(t, x, spans, plan);
      Var<float> yhat = model.predict(t, z, plan);
      return static_cast<double>(
          prediction_loss(Task::classification, yhat, TensorT<float>(y)).val()[0]);
    };

    const double before = loss_value();
    Adam adam(model.parameters(), 1e-6);
    {
      Tape<float> t;
      Var<float> z = model.latent(t, x, spans, plan);
      Var<float> yhat = model.predict(t, z, plan);
      Var<float> lp = prediction_loss(Task::classification, yhat, TensorT<float>(y));
      adam.zero_grads();
      t.backward(lp);
      adam.step();
    }
    CHECK(loss_value() < before);
  }
}

TEST_CASE("metrics lines carry a fixed key order and null for absent fields") {
  EpochReport r;
  r.epoch = 3;
  r.train.loss_p = 0.5;
  r.train.loss_a = 1.25;
  r.train.loss_total = 2.0;
  r.train.acc = 0.75;
  r.train.f1 = 0.7;
  r.dev.loss_p = 0.25;
  r.dev.loss_total = 0.25;
  r.dev.acc = 0.8;
  r.dev.f1 = 0.78;
  r.seconds = 1.5;

  const std::string line = metrics_line("r1", "weak", r, "train");
  CHECK(line.find('\n') == std::string::npos);
  auto j = nlohmann::ordered_json::parse(line);
  std::vector<std::string> keys;
  for (const auto& item : j.items()) keys.push_back(item.key());
  const std::vector<std::string> want = {"run_id", "stage",  "epoch", "split",
                                         "loss_p", "loss_a", "loss_t", "loss_total",
                                         "acc",    "f1",     "ccc",   "seconds"};
  CHECK(keys == want);
  CHECK(j["run_id"] == "r1");
  CHECK(j["stage"] == "weak");
  CHECK(j["epoch"] == 3);
  CHECK(j["split"] == "train");
  CHECK(j["loss_p"] == 0.5);
  CHECK(j["loss_a"] == 1.25);
  CHECK(j["loss_t"].is_null());
  CHECK(j["ccc"].is_null());
  CHECK(j["seconds"] == 1.5);

  auto d = nlohmann::ordered_json::parse(metrics_line("r1", "weak", r, "dev"));
  CHECK(d["split"] == "dev");
  CHECK(d["loss_p"] == 0.25);
  CHECK(d["loss_a"].is_null());
  CHECK(d["loss_total"] == 0.25);
}

TEST_CASE("masked translation loss averages kept rows and ignores the rest") {
  Tape<float> t;
  ParameterT<float> p("p", TensorT<float>({3, 2}));
  p.value.at(0, 0) = 1.0f;
  p.value.at(0, 1) = 2.0f;
  p.value.at(1, 0) = -1.0f;
  p.value.at(1, 1) = 0.0f;
  p.value.at(2, 0) = 4.0f;
  p.value.at(2, 1) = 4.0f;
  Var<float> pred = t.param(p);
  TensorT<float> target({3, 2});
  target.at(2, 0) = 1.0f;

  // Row 1 masked out: mean over rows {0, 2} = (1 + 2 + 3 + 4) / 4.
  Var<float> loss = ops::mae_loss_masked(pred, TensorT<float>(target), {1, 0, 1});
  CHECK(loss.val()[0] == doctest::Approx(2.5).epsilon(1e-6));

  t.backward(loss);
  CHECK(p.grad.at(1, 0) == 0.0f);
  CHECK(p.grad.at(1, 1) == 0.0f);
  CHECK(p.grad.at(0, 0) == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(p.grad.at(2, 0) == doctest::Approx(0.25).epsilon(1e-6));

  CHECK_THROWS_AS(ops::mae_loss_masked(pred, TensorT<float>(target), {1, 0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(ops::mae_loss_masked(pred, TensorT<float>(target), {0, 0, 0}),
                  std::invalid_argument);
}

TEST_CASE("masked translation loss gradient passes a finite-difference check") {
  Rng rng(404);
  // Predictions sit well away from the targets so the kink never enters
  // the difference stencil.
  TensorT<double> target = testutil::random_tensor({4, 3}, rng, -1.0, 1.0);
  std::vector<unsigned char> keep = {1, 0, 1, 1};
  ParameterT<double> p("p", testutil::random_tensor({4, 3}, rng, 2.0, 3.0));
  auto rep = testutil::fd_check(
      [&](Tape<double>& t, std::vector<Var<double>>& vs) {
        return ops::mae_loss_masked(vs[0], TensorT<double>(target),
                                    std::vector<unsigned char>(keep));
      },
      {&p}, rng, 1e-5, 12);
  CHECK(rep.max_err <= 1e-6);
}

TEST_CASE("evaluation reports perfect metrics against its own binarized output") {
  Dataset ds = generate_synthetic(tiny_spec(21));
  EncoderConfig ec = tiny_encoder(5);
  SourceModelT<float> model(Task::classification, ec, 5);
  prepare(ds, "strong", model);

  // Relabel dev with the model's own thresholded predictions.
  const DropoutPlan eval_plan{0.0, 0, false};
  for (SegmentClip& clip : ds.dev) {
    Tape<float> t;
    ClipSpans spans = ClipSpans::uniform(1, clip.segments);
    Var<float> z = model.latent(t, clip.features.at("strong"), spans, eval_plan);
    Var<float> yhat = model.predict(t, z, eval_plan);
    for (int i = 0; i < clip.segments; ++i)
      clip.labels[static_cast<std::size_t>(i)] = yhat.val()[i] >= 0.5f ? 1.0f : 0.0f;
  }
  EvalMetrics m = evaluate_model(model, ds.dev, "strong", ds.granularity);
  CHECK(*m.acc == 1.0);
  CHECK(*m.f1 == 1.0);

  EvalMetrics again = evaluate_model(model, ds.dev, "strong", ds.granularity);
  CHECK(m.loss_p == again.loss_p);
  CHECK(*m.acc == *again.acc);
  CHECK(*m.f1 == *again.f1);

  std::vector<SegmentClip> empty;
  CHECK_THROWS_WITH_AS(evaluate_model(model, empty, "strong", ds.granularity),
                       doctest::Contains("empty"), ConfigError);
}

TEST_CASE("evaluation reports ccc 1 when regression labels equal the predictions") {
  Dataset ds = generate_synthetic(tiny_spec(22, "tanh"));
  EncoderConfig ec = tiny_encoder(5);
  SourceModelT<float> model(Task::regression, ec, 5);
  prepare(ds, "strong", model);
  const DropoutPlan eval_plan{0.0, 0, false};
  for (SegmentClip& clip : ds.dev) {
    Tape<float> t;
    ClipSpans spans = ClipSpans::uniform(1, clip.segments);
    Var<float> z = model.latent(t, clip.features.at("strong"), spans, eval_plan);
    Var<float> yhat = model.predict(t, z, eval_plan);
    for (int i = 0; i < clip.segments; ++i)
      clip.labels[static_cast<std::size_t>(i)] = yhat.val()[i];
  }
  EvalMetrics m = evaluate_model(model, ds.dev, "strong", ds.granularity);
  CHECK(*m.ccc_v == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("stage one training is deterministic for a fixed seed") {
  TempDir tmp;
  auto run = [&](const fs::path& out) {
    Dataset ds = generate_synthetic(tiny_spec(31));
    EncoderConfig ec = tiny_encoder(4);
    SourceModelT<float> model(Task::classification, ec, 17);
    prepare(ds, "weak", model);
    std::vector<std::string> lines;
    TrainResult r = train_source(model, ds, "weak", tiny_config(Task::classification),
                                 "det", [&](const std::string& l) { lines.push_back(l); });
    save_checkpoint(out, model.task, ec, model.parameters());
    return std::pair{r, lines};
  };
  auto [r1, lines1] = run(tmp.path / "a.ckpt");
  auto [r2, lines2] = run(tmp.path / "b.ckpt");
  CHECK(same_history(r1, r2));
  CHECK(r1.best_epoch >= 0);
  CHECK(slurp(tmp.path / "a.ckpt") == slurp(tmp.path / "b.ckpt"));
  REQUIRE(lines1.size() == lines2.size());
  CHECK(lines1.size() == r1.history.size() * 2);
}

TEST_CASE("stage one validates its inputs") {
  Dataset ds = generate_synthetic(tiny_spec(32));
  EncoderConfig ec = tiny_encoder(4);
  SourceModelT<float> model(Task::classification, ec, 1);
  prepare(ds, "weak", model);
  TrainConfig cfg = tiny_config(Task::classification);

  CHECK_THROWS_WITH_AS(train_source(model, ds, "video", cfg),
                       doctest::Contains("video"), ConfigError);
  CHECK_THROWS_WITH_AS(train_source(model, ds, "strong", cfg),
                       doctest::Contains("width"), ConfigError);

  Dataset empty = ds;
  empty.train.clear();
  CHECK_THROWS_WITH_AS(train_source(model, empty, "weak", cfg),
                       doctest::Contains("train split"), ConfigError);
  empty = ds;
  empty.dev.clear();
  CHECK_THROWS_WITH_AS(train_source(model, empty, "weak", cfg),
                       doctest::Contains("dev split"), ConfigError);

  TrainConfig bad = cfg;
  bad.task = Task::regression;
  CHECK_THROWS_AS(train_source(model, ds, "weak", bad), ConfigError);
  bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(train_source(model, ds, "weak", bad), ConfigError);
}

TEST_CASE("non-finite inputs surface as a divergence error naming the epoch") {
  Dataset ds = generate_synthetic(tiny_spec(33));
  ds.train[0].features.at("weak").at(0, 0) = std::numeric_limits<float>::quiet_NaN();
  EncoderConfig ec = tiny_encoder(4);
  SourceModelT<float> model(Task::classification, ec, 1);
  prepare(ds, "weak", model);
  CHECK_THROWS_WITH_AS(
      train_source(model, ds, "weak", tiny_config(Task::classification)),
      doctest::Contains("epoch 0"), DivergenceError);
}

TEST_CASE("training at zero mixing weights collapses onto the uni-modal baseline") {
  TempDir tmp;
  const TrainConfig cfg = [] {
    TrainConfig c = tiny_config(Task::classification);
    c.alpha = 0.0;
    c.beta = 0.0;
    return c;
  }();
  const EncoderConfig weak_ec = tiny_encoder(4);
  const EncoderConfig strong_ec = tiny_encoder(5);

  Dataset ds = generate_synthetic(tiny_spec(41));
  SourceModelT<float> baseline(Task::classification, weak_ec, 17);
  prepare(ds, "weak", baseline);
  TrainResult base_result = train_source(baseline, ds, "weak", cfg);
  save_checkpoint(tmp.path / "base.ckpt", baseline.task, weak_ec, baseline.parameters());
  const std::string base_payload = payload_of(slurp(tmp.path / "base.ckpt"));

  // Untrained source tower: with both extra losses off it is never run.
  SourceModelT<float> source(Task::classification, strong_ec, 3);

  SUBCASE("decoder-free weak model yields a byte-identical checkpoint") {
    WeakModelT<float> weak(Task::classification, weak_ec, 17);
    prepare(ds, "weak", weak);
    TrainResult weak_result = train_weak(weak, source, ds, "weak", "strong", cfg);
    save_checkpoint(tmp.path / "weak.ckpt", weak.task, weak_ec, weak.parameters());
    CHECK(slurp(tmp.path / "weak.ckpt") == slurp(tmp.path / "base.ckpt"));
    CHECK(same_history(base_result, weak_result));
  }

  SUBCASE("decoder parameters trail the baseline payload and never move") {
    DecoderConfig dc;
    dc.gru_layers = 1;
    dc.gru_hidden = 6;
    dc.output_dim = 5;
    WeakModelT<float> weak(Task::classification, weak_ec, dc, 17);
    prepare(ds, "weak", weak);

    std::vector<TensorT<float>> dec_init;
    for (auto* p : weak.parameters())
      if (p->name.rfind("dec.", 0) == 0) dec_init.push_back(p->value);
    REQUIRE(!dec_init.empty());

    TrainResult weak_result = train_weak(weak, source, ds, "weak", "strong", cfg);
    save_checkpoint(tmp.path / "weak.ckpt", weak.task, weak_ec, weak.parameters());
    const std::string weak_payload = payload_of(slurp(tmp.path / "weak.ckpt"));
    REQUIRE(weak_payload.size() > base_payload.size());
    CHECK(std::memcmp(weak_payload.data(), base_payload.data(), base_payload.size()) == 0);
    CHECK(same_history(base_result, weak_result));

    std::size_t k = 0;
    for (auto* p : weak.parameters()) {
      if (p->name.rfind("dec.", 0) != 0) continue;
      const TensorT<float>& init = dec_init[k++];
      for (std::int64_t i = 0; i < p->value.size(); ++i) CHECK(p->value[i] == init[i]);
    }
  }

  SUBCASE("the no_lfa and no_decoder ablations pin the respective weights to zero") {
    TrainConfig ab = cfg;
    ab.alpha = 1.0;
    ab.beta = 1.0;
    ab.ablation = Ablation::no_lfa;
    CHECK(ab.effective_alpha() == 0.0);
    CHECK(ab.effective_beta() == 1.0);
    ab.ablation = Ablation::no_decoder;
    CHECK(ab.effective_alpha() == 1.0);
    CHECK(ab.effective_beta() == 0.0);
    CHECK(ablation_from_name("no_lfa") == Ablation::no_lfa);
    CHECK_THROWS_AS(ablation_from_name("bogus"), ConfigError);
  }
}

TEST_CASE("stage two leaves the source frozen and isolates gradient paths") {
  Dataset ds = generate_synthetic(tiny_spec(51));
  const EncoderConfig strong_ec = tiny_encoder(5);
  const EncoderConfig weak_ec = tiny_encoder(4);

  TrainConfig cfg = tiny_config(Task::classification);
  cfg.max_epochs = 2;

  SourceModelT<float> source(Task::classification, strong_ec, 9);
  prepare(ds, "strong", source);
  train_source(source, ds, "strong", cfg);
  std::vector<TensorT<float>> frozen;
  for (auto* p : source.parameters()) frozen.push_back(p->value);

  DecoderConfig dc;
  dc.gru_layers = 1;
  dc.gru_hidden = 6;
  dc.output_dim = 5;
  WeakModelT<float> weak(Task::classification, weak_ec, dc, 13);
  prepare(ds, "weak", weak);
  TrainResult r = train_weak(weak, source, ds, "weak", "strong", cfg);
  CHECK(r.best_epoch >= 0);
  REQUIRE(!r.history.empty());
  CHECK(r.history[0].train.loss_a.has_value());
  CHECK(r.history[0].train.loss_t.has_value());

  std::size_t k = 0;
  for (auto* p : source.parameters()) {
    const TensorT<float>& before = frozen[k++];
    for (std::int64_t i = 0; i < p->value.size(); ++i) CHECK(p->value[i] == before[i]);
  }

  SUBCASE("prediction loss alone reaches no decoder parameter") {
    for (auto* p : weak.parameters()) p->zero_grad();
    Tape<float> t;
    ClipSpans spans = ClipSpans::uniform(1, ds.train[0].segments);
    const DropoutPlan plan{0.0, 0, false};
    Var<float> z = weak.latent(t, ds.train[0].features.at("weak"), spans, plan);
    Var<float> yhat = weak.predict(t, z, plan);
    TensorT<float> y({ds.train[0].segments, 1});
    for (int i = 0; i < ds.train[0].segments; ++i) y[i] = ds.train[0].labels[i];
    t.backward(prediction_loss(Task::classification, yhat, std::move(y)));

    bool enc_touched = false;
    for (auto* p : weak.parameters()) {
      if (p->name.rfind("dec.", 0) == 0) {
        for (std::int64_t i = 0; i < p->grad.size(); ++i) CHECK(p->grad[i] == 0.0f);
      } else if (p->name.rfind("enc.", 0) == 0) {
        for (std::int64_t i = 0; i < p->grad.size(); ++i)
          if (p->grad[i] != 0.0f) enc_touched = true;
      }
    }
    CHECK(enc_touched);
  }

  SUBCASE("translation loss alone reaches no classifier parameter") {
    for (auto* p : weak.parameters()) p->zero_grad();
    Tape<float> t;
    ClipSpans spans = ClipSpans::uniform(1, ds.train[0].segments);
    const DropoutPlan plan{0.0, 0, false};
    Var<float> z = weak.latent(t, ds.train[0].features.at("weak"), spans, plan);
    Var<float> recon = weak.reconstruct(t, z, spans, plan);
    TensorT<float> target = source.norm.apply(ds.train[0].features.at("strong"));
    t.backward(translation_loss(recon, std::move(target)));

    bool dec_touched = false;
    for (auto* p : weak.parameters()) {
      if (p->name.rfind("cls.", 0) == 0) {
        for (std::int64_t i = 0; i < p->grad.size(); ++i) CHECK(p->grad[i] == 0.0f);
      } else if (p->name.rfind("dec.", 0) == 0) {
        for (std::int64_t i = 0; i < p->grad.size(); ++i)
          if (p->grad[i] != 0.0f) dec_touched = true;
      }
    }
    CHECK(dec_touched);
  }
}

TEST_CASE("epoch losses decompose into the weighted components") {
  Dataset ds = generate_synthetic(tiny_spec(61));
  const EncoderConfig strong_ec = tiny_encoder(5);
  const EncoderConfig weak_ec = tiny_encoder(4);

  TrainConfig cfg = tiny_config(Task::classification);
  cfg.max_epochs = 2;
  cfg.alpha = 0.7;
  cfg.beta = 0.4;

  SourceModelT<float> source(Task::classification, strong_ec, 9);
  prepare(ds, "strong", source);
  source.freeze();

  DecoderConfig dc;
  dc.gru_layers = 1;
  dc.gru_hidden = 6;
  dc.output_dim = 5;
  WeakModelT<float> weak(Task::classification, weak_ec, dc, 13);
  prepare(ds, "weak", weak);
  TrainResult r = train_weak(weak, source, ds, "weak", "strong", cfg);
  for (const EpochReport& e : r.history) {
    REQUIRE(e.train.loss_a.has_value());
    REQUIRE(e.train.loss_t.has_value());
    const double want = e.train.loss_p + 0.7 * *e.train.loss_a + 0.4 * *e.train.loss_t;
    CHECK(std::abs(e.train.loss_total - want) < 1e-5);
    CHECK(!e.dev.loss_a.has_value());
    CHECK(!e.dev.loss_t.has_value());
    CHECK(e.dev.loss_total == e.dev.loss_p);
  }
}

TEST_CASE("batches too small for the alignment loss contribute zero to it") {
  SyntheticSpec spec = tiny_spec(62);
  spec.clip_len = 2;  // every batch of one clip has fewer rows than latent_dim + 1
  Dataset ds = generate_synthetic(spec);
  const EncoderConfig strong_ec = tiny_encoder(5);
  const EncoderConfig weak_ec = tiny_encoder(4);

  TrainConfig cfg = tiny_config(Task::classification);
  cfg.max_epochs = 1;
  cfg.batch_size = 1;
  cfg.alpha = 1.0;
  cfg.beta = 0.0;

  SourceModelT<float> source(Task::classification, strong_ec, 9);
  prepare(ds, "strong", source);
  source.freeze();
  WeakModelT<float> weak(Task::classification, weak_ec, 13);
  prepare(ds, "weak", weak);
  TrainResult r = train_weak(weak, source, ds, "weak", "strong", cfg);
  REQUIRE(r.history.size() == 1);
  REQUIRE(r.history[0].train.loss_a.has_value());
  CHECK(*r.history[0].train.loss_a == 0.0);
  CHECK(std::abs(r.history[0].train.loss_total - r.history[0].train.loss_p) < 1e-7);
}

TEST_CASE("stage two validates tower compatibility") {
  Dataset ds = generate_synthetic(tiny_spec(63));
  const EncoderConfig strong_ec = tiny_encoder(5);
  const EncoderConfig weak_ec = tiny_encoder(4);
  TrainConfig cfg = tiny_config(Task::classification);

  SourceModelT<float> source(Task::classification, strong_ec, 9);
  WeakModelT<float> weak_plain(Task::classification, weak_ec, 13);

  CHECK_THROWS_WITH_AS(train_weak(weak_plain, source, ds, "weak", "strong", cfg),
                       doctest::Contains("decoder"), ConfigError);

  EncoderConfig narrow = weak_ec;
  narrow.latent_dim = 6;
  narrow.heads = 2;
  WeakModelT<float> mismatched(Task::classification, narrow, 13);
  TrainConfig nolta = cfg;
  nolta.beta = 0.0;
  CHECK_THROWS_WITH_AS(train_weak(mismatched, source, ds, "weak", "strong", nolta),
                       doctest::Contains("latent"), ConfigError);

  DecoderConfig wrong;
  wrong.gru_layers = 1;
  wrong.gru_hidden = 6;
  wrong.output_dim = 4;
  WeakModelT<float> bad_dec(Task::classification, weak_ec, wrong, 13);
  CHECK_THROWS_WITH_AS(train_weak(bad_dec, source, ds, "weak", "strong", cfg),
                       doctest::Contains("decoder width"), ConfigError);
}

TEST_CASE("a small separable problem trains to high accuracy") {
  SyntheticSpec spec;
  spec.latent_dim = 4;
  spec.clip_len = 10;
  spec.train_clips = 40;
  spec.dev_clips = 10;
  spec.test_clips = 10;
  spec.strong_dim = 8;
  spec.weak_dim = 4;
  spec.weak_visible = 2;
  spec.sigma_strong = 0.05;
  spec.seed = 71;
  Dataset ds = generate_synthetic(spec);

  EncoderConfig ec;
  ec.input_dim = 8;
  ec.gru_layers = 1;
  ec.gru_hidden = 0;
  ec.latent_dim = 8;
  ec.transformer_layers = 1;
  ec.heads = 2;
  ec.ffn_hidden = 32;
  ec.classifier_hidden = 16;

  TrainConfig cfg;
  cfg.task = Task::classification;
  cfg.lr = 3e-3;
  cfg.batch_size = 8;
  cfg.max_epochs = 40;
  cfg.patience = 40;
  cfg.dropout_rate = 0.0;
  cfg.seed = 5;

  SourceModelT<float> model(Task::classification, ec, 23);
  prepare(ds, "strong", model);
  TrainResult r = train_source(model, ds, "strong", cfg);
  CHECK(r.best_epoch >= 0);
  EvalMetrics train_m = evaluate_model(model, ds.train, "strong", ds.granularity);
  CHECK(*train_m.acc >= 0.95);
}
