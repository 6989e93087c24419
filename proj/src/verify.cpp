// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#include "cmstew/verify.hpp"

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <functional>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "cmstew/checkpoint.hpp"
#include "cmstew/grad_check.hpp"
#include "cmstew/sym_eig.hpp"

namespace cmstew::verify {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

CheckResult timed(const std::string& name, const std::function<std::string()>& body) {
  CheckResult r;
  r.name = name;
  const auto t0 = Clock::now();
  try {
    r.detail = body();
    r.pass = true;
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

void expect(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

// FD driver over a scalar-building lambda, mirroring the test harness.
template <typename F>
GradCheckReport fd(F build, std::vector<ParameterT<double>*> params, Rng& rng,
                   double eps = 1e-5, std::int64_t coords = 20) {
  auto run = [&](bool backward) {
    for (auto* p : params) p->zero_grad();
    Tape<double> t;
    std::vector<Var<double>> vars;
    vars.reserve(params.size());
    for (auto* p : params) vars.push_back(t.param(*p));
    Var<double> loss = build(t, vars);
    if (backward) t.backward(loss);
    return static_cast<double>(loss.val()[0]);
  };
  return finite_difference_check([&] { return run(true); }, [&] { return run(false); },
                                 params, eps, coords, rng);
}

TensorT<double> rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  TensorT<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(4);
  ss << v;
  return ss.str();
}

struct ScratchDir {
  fs::path path;
  ScratchDir() {
    path = fs::temp_directory_path() /
           ("cmstew_verify_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

// Classical CCA as a generalized eigenproblem: eigenvalues of
// Saa^{-1/2} Sab Sbb^{-1} Sba Saa^{-1/2} are the squared canonical
// correlations.  A distinct composition from the trace-norm path.
double cca_eigen_oracle(const TensorT<double>& a, const TensorT<double>& b, double r) {
  const int n = a.rows(), da = a.cols(), db = b.cols();
  auto centered = [n](const TensorT<double>& m, int d) {
    std::vector<double> out(static_cast<std::size_t>(n) * d);
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += m.at(i, j);
    for (double& v : mean) v /= n;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j)
        out[static_cast<std::size_t>(i) * d + j] = m.at(i, j) - mean[static_cast<std::size_t>(j)];
    return out;
  };
  std::vector<double> ac = centered(a, da), bc = centered(b, db);
  auto cov = [n](const std::vector<double>& x, int dx, const std::vector<double>& y,
                 int dy) {
    std::vector<double> s(static_cast<std::size_t>(dx) * dy, 0.0);
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < dx; ++p)
        for (int q = 0; q < dy; ++q)
          s[static_cast<std::size_t>(p) * dy + q] +=
              x[static_cast<std::size_t>(i) * dx + p] * y[static_cast<std::size_t>(i) * dy + q];
    for (double& v : s) v /= (n - 1);
    return s;
  };
  std::vector<double> saa = cov(ac, da, ac, da);
  std::vector<double> sbb = cov(bc, db, bc, db);
  std::vector<double> sab = cov(ac, da, bc, db);
  for (int i = 0; i < da; ++i) saa[static_cast<std::size_t>(i) * da + i] += r;
  for (int i = 0; i < db; ++i) sbb[static_cast<std::size_t>(i) * db + i] += r;

  std::vector<double> isqrt_a(static_cast<std::size_t>(da) * da);
  std::vector<double> inv_b(static_cast<std::size_t>(db) * db);
  sym_apply(da, saa.data(), isqrt_a.data(),
            [](double l) { return 1.0 / std::sqrt(std::max(l, 1e-12)); });
  sym_apply(db, sbb.data(), inv_b.data(),
            [](double l) { return 1.0 / std::max(l, 1e-12); });

  auto mul = [](const std::vector<double>& x, int rx, int k, const std::vector<double>& y,
                int cy) {
    std::vector<double> out(static_cast<std::size_t>(rx) * cy, 0.0);
    for (int i = 0; i < rx; ++i)
      for (int p = 0; p < k; ++p) {
        const double xv = x[static_cast<std::size_t>(i) * k + p];
        for (int j = 0; j < cy; ++j)
          out[static_cast<std::size_t>(i) * cy + j] += xv * y[static_cast<std::size_t>(p) * cy + j];
      }
    return out;
  };
  auto transpose = [](const std::vector<double>& x, int r_, int c_) {
    std::vector<double> out(static_cast<std::size_t>(r_) * c_);
    for (int i = 0; i < r_; ++i)
      for (int j = 0; j < c_; ++j)
        out[static_cast<std::size_t>(j) * r_ + i] = x[static_cast<std::size_t>(i) * c_ + j];
    return out;
  };
  std::vector<double> left = mul(isqrt_a, da, da, sab, db);          // da x db
  std::vector<double> mid = mul(left, da, db, inv_b, db);            // da x db
  std::vector<double> m = mul(mul(mid, da, db, transpose(sab, da, db), da), da, da,
                              isqrt_a, da);                          // da x da
  // Symmetrize against round-off before the eigensolve.
  for (int i = 0; i < da; ++i)
    for (int j = i + 1; j < da; ++j) {
      const double avg = 0.5 * (m[static_cast<std::size_t>(i) * da + j] +
                                m[static_cast<std::size_t>(j) * da + i]);
      m[static_cast<std::size_t>(i) * da + j] = avg;
      m[static_cast<std::size_t>(j) * da + i] = avg;
    }
  std::vector<double> lam, vecs;
  sym_eig(da, m.data(), lam, vecs);
  double corr = 0.0;
  for (double l : lam) corr += std::sqrt(std::max(l, 0.0));
  return corr;
}

double dcca_value(const TensorT<double>& a, const TensorT<double>& b, double r) {
  Tape<double> t;
  return static_cast<double>(
      ops::dcca_corr(t.constant(a), t.constant(b), r, r, 1e-12).val()[0]);
}

SyntheticSpec contract_spec(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.latent_dim = 4;
  spec.clip_len = 6;
  spec.train_clips = 12;
  spec.dev_clips = 6;
  spec.test_clips = 6;
  spec.strong_dim = 5;
  spec.weak_dim = 4;
  spec.weak_visible = 2;
  spec.seed = seed;
  return spec;
}

EncoderConfig contract_encoder(int input_dim) {
  EncoderConfig c;
  c.input_dim = input_dim;
  c.gru_layers = 1;
  c.latent_dim = 8;
  c.transformer_layers = 1;
  c.heads = 2;
  c.ffn_hidden = 12;
  c.classifier_hidden = 8;
  return c;
}

TrainConfig contract_train() {
  TrainConfig cfg;
  cfg.task = Task::classification;
  cfg.lr = 1e-3;
  cfg.batch_size = 4;
  cfg.max_epochs = 3;
  cfg.patience = 5;
  cfg.dropout_rate = 0.3;
  cfg.seed = 11;
  return cfg;
}

template <typename Model>
void norm_from(Model& model, const Dataset& ds, const std::string& modality) {
  set_input_norm<float>(model, compute_feature_stats(ds).at(modality));
}

std::string checkpoint_payload(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  expect(in.good(), cat("cannot reopen ", p.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  const std::string marker = "payload\n";
  const auto pos = bytes.find(marker);
  expect(pos != std::string::npos, "payload marker not found");
  const auto begin = pos + marker.size();
  return bytes.substr(begin, bytes.size() - begin - 8);
}

std::string strip_seconds(const std::string& line) {
  auto j = nlohmann::ordered_json::parse(line);
  j.erase("seconds");
  return j.dump();
}

double train_uni_modal(const Dataset& ds, const std::string& modality,
                       const EncoderConfig& enc_template, const TrainConfig& cfg,
                       std::uint64_t seed, SourceModelT<float>* keep = nullptr) {
  EncoderConfig ec = enc_template;
  ec.input_dim = ds.modalities.at(modality);
  SourceModelT<float> model(cfg.task, ec, seed);
  norm_from(model, ds, modality);
  TrainConfig c = cfg;
  c.seed = seed;
  TrainResult r = train_source(model, ds, modality, c, cat("uni.", modality));
  if (keep) *keep = std::move(model);
  return 100.0 * r.best_metric;
}

}  // namespace

CheckResult check_layer_gradients() {
  return timed("grad.layers", [] {
    Rng srng(1001);
    Rng rng(1002);
    double worst = 0.0;
    auto track = [&](const GradCheckReport& rep) {
      worst = std::max(worst, rep.max_err);
      expect(rep.max_err <= 1e-4, cat("gradient error ", rep.max_err, " at ",
                                      rep.worst_param));
    };

    DenseT<double> dense("d", 3, 4, srng.next_u64());
    ParameterT<double> x1("x", rand_tensor({5, 3}, rng));
    TensorT<double> w1 = rand_tensor({5, 4}, rng);
    std::vector<ParameterT<double>*> ps = {&x1, &dense.w, &dense.b};
    track(fd(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(dense.forward(t, vs[0]), TensorT<double>(w1));
        },
        ps, rng));

    BiGruT<double> gru("g", 3, 4, 1, srng.next_u64());
    ParameterT<double> x2("x", rand_tensor({5, 3}, rng));
    TensorT<double> w2 = rand_tensor({5, 8}, rng);
    ClipSpans spans;
    spans.offsets = {0, 2, 5};
    std::vector<ParameterT<double>*> gps = {&x2};
    gru.collect(gps);
    track(fd(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(gru.forward(t, vs[0], spans), TensorT<double>(w2));
        },
        gps, rng, 1e-5, 6));

    MhaT<double> mha("m", 4, 2, srng.next_u64());
    ParameterT<double> x3("x", rand_tensor({5, 4}, rng));
    TensorT<double> w3 = rand_tensor({5, 4}, rng);
    std::vector<ParameterT<double>*> mps = {&x3};
    mha.collect(mps);
    track(fd(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(mha.forward(t, vs[0], spans, 0.0, 0, false),
                                   TensorT<double>(w3));
        },
        mps, rng, 1e-5, 8));

    TransformerLayerT<double> tf("tl", 4, 2, 6, srng.next_u64());
    ParameterT<double> x4("x", rand_tensor({5, 4}, rng));
    TensorT<double> w4 = rand_tensor({5, 4}, rng);
    std::vector<ParameterT<double>*> tps = {&x4};
    tf.collect(tps);
    track(fd(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(tf.forward(t, vs[0], spans, 0.0, 0, false),
                                   TensorT<double>(w4));
        },
        tps, rng, 1e-5, 6));

    return cat("max relative error ", fmt(worst));
  });
}

CheckResult check_dcca_gradient() {
  return timed("grad.dcca", [] {
    Rng rng(2001);
    ParameterT<double> a("a", rand_tensor({30, 4}, rng));
    ParameterT<double> b("b", rand_tensor({30, 4}, rng));
    DccaOptions opts;
    auto rep = fd(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return alignment_loss(vs[0], vs[1], opts);
        },
        {&a, &b}, rng, 1e-5, 40);
    expect(rep.max_err <= 1e-4,
           cat("gradient error ", rep.max_err, " at ", rep.worst_param));
    return cat("max relative error ", fmt(rep.max_err));
  });
}

CheckResult check_weak_loss_gradient() {
  return timed("grad.weak_loss", [] {
    Rng rng(3001);
    EncoderConfig ec;
    ec.input_dim = 3;
    ec.gru_layers = 1;
    ec.latent_dim = 4;
    ec.transformer_layers = 1;
    ec.heads = 2;
    ec.ffn_hidden = 6;
    ec.classifier_hidden = 5;
    DecoderConfig dc;
    dc.gru_layers = 1;
    dc.gru_hidden = 4;
    dc.output_dim = 5;
    WeakModelT<double> model(Task::classification, ec, dc, 77);

    // Two clips, twelve rows; enough samples for the covariance step.
    ClipSpans spans;
    spans.offsets = {0, 6, 12};
    TensorT<double> x = rand_tensor({12, 3}, rng);
    TensorT<double> zs = rand_tensor({12, 4}, rng);
    // Reconstruction targets off the initial output range keep the MAE
    // kink out of the difference stencil.
    TensorT<double> xs = rand_tensor({12, 5}, rng, 2.0, 3.0);
    TensorT<double> y({12, 1});
    for (int i = 0; i < 12; ++i) y[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    DccaOptions opts;
    const DropoutPlan plan{0.0, 0, false};

    std::vector<ParameterT<double>*> ps = model.parameters();
    std::vector<ParameterT<double>*> trainable;
    for (auto* p : ps)
      if (p->trainable) trainable.push_back(p);

    auto rep = fd(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          Var<double> zw = model.latent(t, x, spans, plan);
          Var<double> yhat = model.predict(t, zw, plan);
          Var<double> lp = prediction_loss(Task::classification, yhat, TensorT<double>(y));
          Var<double> la = alignment_loss(t.constant(zs), zw, opts);
          Var<double> recon = model.reconstruct(t, zw, spans, plan);
          Var<double> lt = translation_loss(recon, TensorT<double>(xs));
          return total_loss(lp, std::optional(la), std::optional(lt), 1.0, 1.0);
        },
        trainable, rng, 1e-5, 6);
    expect(rep.max_err <= 1e-4,
           cat("gradient error ", rep.max_err, " at ", rep.worst_param));
    return cat("max relative error ", fmt(rep.max_err), " over ",
               rep.coords_checked, " coordinates");
  });
}

CheckResult check_cca_oracle() {
  return timed("oracle.cca", [] {
    Rng rng(4001);
    const double r = 1e-4;
    double worst = 0.0;
    int instances = 0;
    for (int d : {2, 3, 5}) {
      for (int rep = 0; rep < 7; ++rep) {
        const int n = 200;
        TensorT<double> a = rand_tensor({n, d}, rng);
        TensorT<double> b({n, d});
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            b.at(i, j) = 0.6 * a.at(i, (j + 1) % d) + 0.8 * rng.uniform(-1.0, 1.0);
        const double got = dcca_value(a, b, r);
        const double want = cca_eigen_oracle(a, b, r);
        worst = std::max(worst, std::abs(got - want));
        ++instances;
      }
    }
    expect(worst <= 1e-6, cat("worst deviation ", worst));
    return cat(instances, " instances, worst deviation ", fmt(worst));
  });
}

CheckResult check_metric_oracles(const Expectations& expect_values) {
  return timed("oracle.metrics", [&] {
    expect(std::abs(ccc({1, 2, 3, 4}, {2, 2, 4, 4}) - expect_values.ccc_example) < 1e-12,
           cat("ccc example: got ", ccc({1, 2, 3, 4}, {2, 2, 4, 4}), ", stored ",
               expect_values.ccc_example));
    expect(std::abs(weighted_f1({1, 0, 0, 0}, {1, 1, 0, 0}) - expect_values.f1_example) <
               1e-12,
           cat("weighted f1 example: got ", weighted_f1({1, 0, 0, 0}, {1, 1, 0, 0}),
               ", stored ", expect_values.f1_example));

    Rng rng(5001);
    for (int it = 0; it < 100; ++it) {
      const int n = 3 + static_cast<int>(rng.below(40));
      std::vector<double> pred(static_cast<std::size_t>(n)), label(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        pred[static_cast<std::size_t>(i)] = rng.uniform();
        label[static_cast<std::size_t>(i)] = rng.uniform() < 0.5 ? 0.0 : 1.0;
      }

      int correct = 0;
      double tp = 0, fp = 0, fn = 0, tn = 0;
      for (int i = 0; i < n; ++i) {
        const bool ph = pred[static_cast<std::size_t>(i)] >= 0.5;
        const bool yh = label[static_cast<std::size_t>(i)] >= 0.5;
        correct += ph == yh;
        tp += ph && yh;
        fp += ph && !yh;
        fn += !ph && yh;
        tn += !ph && !yh;
      }
      expect(std::abs(binary_accuracy(pred, label) - static_cast<double>(correct) / n) <
                 1e-9,
             "accuracy deviates from direct count");
      auto f1_of = [](double tpc, double fpc, double fnc) {
        const double p = tpc + fpc > 0 ? tpc / (tpc + fpc) : 0.0;
        const double r = tpc + fnc > 0 ? tpc / (tpc + fnc) : 0.0;
        return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
      };
      const double want_f1 =
          ((tp + fn) * f1_of(tp, fp, fn) + (tn + fp) * f1_of(tn, fn, fp)) / n;
      expect(std::abs(weighted_f1(pred, label) - want_f1) < 1e-9,
             "weighted f1 deviates from confusion-matrix oracle");

      // Pearson-based CCC route.
      std::vector<double> yr(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i)
        yr[static_cast<std::size_t>(i)] = 2.0 * rng.uniform() - 0.5;
      double mx = 0, my = 0;
      for (int i = 0; i < n; ++i) {
        mx += pred[static_cast<std::size_t>(i)];
        my += yr[static_cast<std::size_t>(i)];
      }
      mx /= n;
      my /= n;
      double vx = 0, vy = 0, cxy = 0;
      for (int i = 0; i < n; ++i) {
        const double dx = pred[static_cast<std::size_t>(i)] - mx;
        const double dy = yr[static_cast<std::size_t>(i)] - my;
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
      }
      vx /= n;
      vy /= n;
      cxy /= n;
      if (vx > 0 && vy > 0) {
        const double rho = cxy / std::sqrt(vx * vy);
        const double want_ccc = 2 * rho * std::sqrt(vx) * std::sqrt(vy) /
                                (vx + vy + (mx - my) * (mx - my));
        expect(std::abs(ccc(pred, yr) - want_ccc) < 1e-9,
               "ccc deviates from the pearson-based oracle");
      }
    }
    return std::string("examples plus 100 randomized instances");
  });
}

CheckResult check_encoder_shapes() {
  return timed("shape.encoder", [] {
    EncoderConfig ec;
    ec.input_dim = 88;
    SourceModelT<float> model(Task::classification, ec, 7);
    Rng rng(6001);
    TensorT<float> x({75, 88});
    for (std::int64_t i = 0; i < x.size(); ++i)
      x[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    ClipSpans spans = ClipSpans::uniform(1, 75);
    const DropoutPlan plan{0.0, 0, false};

    Tape<float> t1;
    Var<float> z1 = model.latent(t1, x, spans, plan);
    expect(z1.val().rows() == 75 && z1.val().cols() == 100,
           cat("latent shape ", z1.val().rows(), "x", z1.val().cols()));
    Var<float> y1 = model.predict(t1, z1, plan);
    for (std::int64_t i = 0; i < y1.val().size(); ++i)
      expect(y1.val()[i] > 0.0f && y1.val()[i] < 1.0f, "prediction outside (0,1)");

    Tape<float> t2;
    Var<float> z2 = model.latent(t2, x, spans, plan);
    expect(std::memcmp(z1.val().data(), z2.val().data(),
                       sizeof(float) * static_cast<std::size_t>(z1.val().size())) == 0,
           "eval-mode latent not bit-identical across calls");
    return std::string("75x88 input, 75x100 latent, eval pass bit-stable");
  });
}

CheckResult check_preprocessing(const Expectations& expect_values) {
  return timed("preprocess.shift_window", [&] {
    std::vector<float> ramp(100);
    for (int i = 0; i < 100; ++i) ramp[static_cast<std::size_t>(i)] = static_cast<float>(i);
    std::vector<float> shifted = shift_labels(ramp, 2.8, 0.04);
    expect(static_cast<int>(shifted[0]) == expect_values.shift_indices,
           cat("shift moved by ", shifted[0], " indices, stored ",
               expect_values.shift_indices));

    Tensor rec({7500, 2});
    std::vector<float> labels(7500, 0.0f);
    auto clips = window_clips(rec, labels, "m", "r");
    expect(static_cast<int>(clips.size()) == expect_values.window_count,
           cat("windowing produced ", clips.size(), " clips, stored ",
               expect_values.window_count));
    expect(clips.front().segments == 75, "window length is not 75 frames");
    return cat(expect_values.shift_indices, "-index shift, ", clips.size(), " windows");
  });
}

CheckResult check_checkpoint_roundtrip() {
  return timed("checkpoint.roundtrip", [] {
    ScratchDir tmp;
    EncoderConfig ec = contract_encoder(4);
    SourceModelT<float> a(Task::classification, ec, 21);
    const fs::path p1 = tmp.path / "a.ckpt";
    save_checkpoint(p1.string(), a.task, ec, a.parameters());

    Checkpoint loaded = load_checkpoint(p1.string());
    SourceModelT<float> b(Task::classification, ec, 22);
    bind_checkpoint(loaded, b.parameters(), false);
    const fs::path p2 = tmp.path / "b.ckpt";
    save_checkpoint(p2.string(), b.task, ec, b.parameters());
    expect(checkpoint_payload(p1) == checkpoint_payload(p2),
           "payload changed across save/load/save");
    return std::string("save/load/save payload bit-stable");
  });
}

CheckResult check_objective_collapse() {
  return timed("train.collapse", [] {
    ScratchDir tmp;
    Dataset ds = generate_synthetic(contract_spec(41));
    const EncoderConfig weak_ec = contract_encoder(4);
    TrainConfig cfg = contract_train();
    cfg.alpha = 0.0;
    cfg.beta = 0.0;

    SourceModelT<float> baseline(cfg.task, weak_ec, 17);
    norm_from(baseline, ds, "weak");
    TrainResult rb = train_source(baseline, ds, "weak", cfg);
    const fs::path pb = tmp.path / "base.ckpt";
    save_checkpoint(pb.string(), baseline.task, weak_ec, baseline.parameters());

    SourceModelT<float> source(cfg.task, contract_encoder(5), 3);
    DecoderConfig dc;
    dc.gru_layers = 1;
    dc.gru_hidden = 6;
    dc.output_dim = 5;
    WeakModelT<float> weak(cfg.task, weak_ec, dc, 17);
    norm_from(weak, ds, "weak");
    TrainResult rw = train_weak(weak, source, ds, "weak", "strong", cfg);
    const fs::path pw = tmp.path / "weak.ckpt";
    save_checkpoint(pw.string(), weak.task, weak_ec, weak.parameters());

    const std::string base_payload = checkpoint_payload(pb);
    const std::string weak_payload = checkpoint_payload(pw);
    expect(weak_payload.size() > base_payload.size(), "weak payload not longer");
    expect(std::memcmp(weak_payload.data(), base_payload.data(),
                       base_payload.size()) == 0,
           "shared parameters diverged from the baseline");
    expect(rb.best_epoch == rw.best_epoch && rb.best_metric == rw.best_metric,
           "training histories diverged");
    for (std::size_t i = 0; i < rb.history.size(); ++i) {
      expect(rb.history[i].train.loss_p == rw.history[i].train.loss_p,
             cat("epoch ", i, " train loss diverged"));
      expect(rb.history[i].dev.loss_p == rw.history[i].dev.loss_p,
             cat("epoch ", i, " dev loss diverged"));
    }
    return std::string("baseline payload is a bit-exact prefix; histories equal");
  });
}

CheckResult check_freeze_contract() {
  return timed("train.freeze", [] {
    Dataset ds = generate_synthetic(contract_spec(51));
    TrainConfig cfg = contract_train();
    cfg.max_epochs = 2;

    SourceModelT<float> source(cfg.task, contract_encoder(5), 9);
    norm_from(source, ds, "strong");
    train_source(source, ds, "strong", cfg);
    std::vector<TensorT<float>> before;
    for (auto* p : source.parameters()) before.push_back(p->value);

    DecoderConfig dc;
    dc.gru_layers = 1;
    dc.gru_hidden = 6;
    dc.output_dim = 5;
    WeakModelT<float> weak(cfg.task, contract_encoder(4), dc, 13);
    norm_from(weak, ds, "weak");
    train_weak(weak, source, ds, "weak", "strong", cfg);

    std::size_t k = 0;
    for (auto* p : source.parameters()) {
      const TensorT<float>& want = before[k++];
      for (std::int64_t i = 0; i < p->value.size(); ++i)
        expect(p->value[i] == want[i], cat("source parameter \"", p->name, "\" moved"));
    }

    // With both extra losses off, one backward pass must leave every
    // decoder gradient at exactly zero.
    for (auto* p : weak.parameters()) p->zero_grad();
    Tape<float> t;
    const SegmentClip& clip = ds.train[0];
    ClipSpans spans = ClipSpans::uniform(1, clip.segments);
    const DropoutPlan plan{0.0, 0, false};
    Var<float> z = weak.latent(t, clip.features.at("weak"), spans, plan);
    Var<float> yhat = weak.predict(t, z, plan);
    TensorT<float> y({clip.segments, 1});
    for (int i = 0; i < clip.segments; ++i) y[i] = clip.labels[static_cast<std::size_t>(i)];
    t.backward(prediction_loss(cfg.task, yhat, std::move(y)));
    for (auto* p : weak.parameters()) {
      if (p->name.rfind("dec.", 0) != 0) continue;
      for (std::int64_t i = 0; i < p->grad.size(); ++i)
        expect(p->grad[i] == 0.0f, cat("decoder gradient nonzero in ", p->name));
    }
    return std::string("source bit-frozen; decoder gradients exactly zero");
  });
}

CheckResult check_stream_determinism() {
  return timed("train.determinism", [] {
    auto run = [] {
      Dataset ds = generate_synthetic(contract_spec(61));
      SourceModelT<float> model(Task::classification, contract_encoder(4), 17);
      norm_from(model, ds, "weak");
      std::vector<std::string> lines;
      train_source(model, ds, "weak", contract_train(), "det",
                   [&](const std::string& l) { lines.push_back(l); });
      return lines;
    };
    const std::vector<std::string> a = run();
    const std::vector<std::string> b = run();
    expect(a.size() == b.size(), "stream lengths differ across reruns");
    for (std::size_t i = 0; i < a.size(); ++i)
      expect(strip_seconds(a[i]) == strip_seconds(b[i]),
             cat("stream line ", i, " differs across reruns"));
    return cat(a.size(), " lines byte-identical modulo wall time");
  });
}

TransferConfig default_transfer_config() {
  TransferConfig c;
  c.encoder.input_dim = 0;
  c.encoder.gru_layers = 1;
  c.encoder.gru_hidden = 0;
  c.encoder.latent_dim = 8;
  c.encoder.transformer_layers = 2;
  c.encoder.heads = 2;
  c.encoder.ffn_hidden = 64;
  c.encoder.classifier_hidden = 32;
  c.decoder.gru_layers = 1;
  c.decoder.gru_hidden = 16;
  c.decoder.output_dim = 0;
  c.train.task = Task::classification;
  c.train.lr = 1e-3;
  c.train.batch_size = 32;
  c.train.max_epochs = 60;
  c.train.patience = 60;
  c.train.alpha = 1.0;
  c.train.beta = 1.0;
  c.train.dropout_rate = 0.1;
  c.seeds = 5;
  return c;
}

TransferOutcome run_transfer_experiment(const TransferConfig& cfg, std::ostream* log) {
  check_arg(cfg.seeds >= 1, "transfer: need at least one seed");
  const auto t0 = Clock::now();
  TransferOutcome out;
  for (int k = 0; k < cfg.seeds; ++k) {
    const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(k);
    SyntheticSpec spec = cfg.spec;
    spec.seed = seed;
    Dataset ds = generate_synthetic(spec);
    const int strong_dim = ds.modalities.at("strong");
    const int weak_dim = ds.modalities.at("weak");

    SeedOutcome so;
    so.seed = seed;
    SourceModelT<float> source;
    so.strong = train_uni_modal(ds, "strong", cfg.encoder, cfg.train, seed, &source);
    so.weak = train_uni_modal(ds, "weak", cfg.encoder, cfg.train, seed);

    EncoderConfig weak_ec = cfg.encoder;
    weak_ec.input_dim = weak_dim;
    DecoderConfig dec = cfg.decoder;
    dec.output_dim = strong_dim;
    auto stage2 = [&](Ablation ab) {
      TrainConfig c2 = cfg.train;
      c2.seed = seed;
      c2.ablation = ab;
      TrainResult r;
      if (ab == Ablation::no_decoder) {
        WeakModelT<float> wm(cfg.train.task, weak_ec, seed);
        norm_from(wm, ds, "weak");
        r = train_weak(wm, source, ds, "weak", "strong", c2,
                       cat("transfer.", ablation_name(ab)));
      } else {
        WeakModelT<float> wm(cfg.train.task, weak_ec, dec, seed);
        norm_from(wm, ds, "weak");
        r = train_weak(wm, source, ds, "weak", "strong", c2,
                       cat("transfer.", ablation_name(ab)));
      }
      return 100.0 * r.best_metric;
    };
    so.cmstew = stage2(Ablation::none);
    so.no_lfa = stage2(Ablation::no_lfa);
    so.no_decoder = stage2(Ablation::no_decoder);

    if (log) {
      *log << "[transfer seed " << seed << "] strong " << so.strong << " weak "
           << so.weak << " cmstew " << so.cmstew << " no_lfa " << so.no_lfa
           << " no_decoder " << so.no_decoder << "\n";
    }
    out.per_seed.push_back(so);
  }

  const double n = static_cast<double>(out.per_seed.size());
  for (const SeedOutcome& s : out.per_seed) {
    out.strong_mean += s.strong / n;
    out.weak_mean += s.weak / n;
    out.cmstew_mean += s.cmstew / n;
    out.no_lfa_mean += s.no_lfa / n;
    out.no_decoder_mean += s.no_decoder / n;
    if (s.cmstew >= s.weak - 0.5) ++out.non_degraded;
  }
  out.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  if (log) {
    *log << "[transfer means] strong " << out.strong_mean << " weak " << out.weak_mean
         << " cmstew " << out.cmstew_mean << " no_lfa " << out.no_lfa_mean
         << " no_decoder " << out.no_decoder_mean << " non_degraded "
         << out.non_degraded << "/" << out.per_seed.size() << "\n";
  }
  return out;
}

CheckResult check_transfer(const TransferConfig& cfg, std::ostream* log,
                           TransferOutcome* keep) {
  return timed("transfer.synthetic", [&] {
    TransferOutcome out = run_transfer_experiment(cfg, log);
    if (keep) *keep = out;
    const std::string summary =
        cat("strong ", fmt(out.strong_mean), " vs weak ", fmt(out.weak_mean),
            "; cmstew ", fmt(out.cmstew_mean), " (no_lfa ", fmt(out.no_lfa_mean),
            ", no_decoder ", fmt(out.no_decoder_mean), "), non-degraded ",
            out.non_degraded, "/", cfg.seeds, ", ", fmt(out.seconds), "s");
    expect(out.gap_ok(), cat("modality gap below 5 points: ", summary));
    expect(out.improve_ok(), cat("no mean improvement over the weak baseline: ", summary));
    expect(out.nondegrade_ok(cfg.seeds), cat("degraded on too many seeds: ", summary));
    return summary;
  });
}

Report run_fast_checks(const Expectations& expect_values) {
  Report r;
  r.checks.push_back(check_layer_gradients());
  r.checks.push_back(check_dcca_gradient());
  r.checks.push_back(check_weak_loss_gradient());
  r.checks.push_back(check_cca_oracle());
  r.checks.push_back(check_metric_oracles(expect_values));
  r.checks.push_back(check_encoder_shapes());
  r.checks.push_back(check_preprocessing(expect_values));
  r.checks.push_back(check_checkpoint_roundtrip());
  return r;
}

Report run_full_checks(const Expectations& expect_values, std::ostream* log) {
  Report r = run_fast_checks(expect_values);
  r.checks.push_back(check_objective_collapse());
  r.checks.push_back(check_freeze_contract());
  r.checks.push_back(check_stream_determinism());
  r.checks.push_back(check_transfer(default_transfer_config(), log));
  return r;
}

}  // namespace cmstew::verify
