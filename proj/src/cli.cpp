// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#include "cmstew/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmstew/checkpoint.hpp"
#include "cmstew/training.hpp"
#include "cmstew/verify.hpp"

namespace cmstew::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

const char* const kTopKeys[] = {
    "run_id",        "manifest",       "out_dir",
    "task",          "lr",             "batch_size",
    "max_epochs",    "patience",       "alpha",
    "beta",          "dropout_rate",   "seed",
    "ablation",      "mask_zero_rows", "r1",
    "r2",            "eigen_floor",    "input_dim",
    "gru_layers",    "gru_hidden",     "latent_dim",
    "transformer_layers", "heads",     "ffn_hidden",
    "classifier_hidden",  "decoder_gru_layers", "decoder_gru_hidden",
    "modality",      "strong_modality", "weak_modality",
    "source_checkpoint",  "checkpoint", "modalities",
    "split",         "seeds",          "synthetic"};

const char* const kSynthKeys[] = {
    "latent_dim", "clip_len",   "train_clips", "dev_clips",
    "test_clips", "strong_dim", "weak_dim",    "weak_visible",
    "sigma_strong", "sigma_weak", "label_rule", "seed"};

// Run settings merged from the config file and command-line overrides.
// All relative paths in the file resolve against the file's directory;
// --out resolves against the working directory.
struct Settings {
  json j = json::object();
  fs::path base = ".";
  std::optional<fs::path> out_override;

  bool has(const std::string& k) const { return j.contains(k) && !j.at(k).is_null(); }

  template <typename T>
  T get(const std::string& k, T fallback) const {
    if (!has(k)) return fallback;
    try {
      return j.at(k).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(cat("config: bad value for \"", k, "\": ", j.at(k).dump()));
    }
  }

  std::string str(const std::string& k) const { return get<std::string>(k, ""); }

  std::string require(const std::string& k, const std::string& what) const {
    const std::string v = str(k);
    if (v.empty()) throw ConfigError(cat("config: ", what, " requires \"", k, "\""));
    return v;
  }

  fs::path resolve(const std::string& p) const {
    fs::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  }

  fs::path out_dir() const {
    if (out_override) return *out_override;
    return resolve(get<std::string>("out_dir", "."));
  }
};

void check_keys(const json& j, const char* const* known, std::size_t n,
                const std::string& prefix) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(known, known + n,
                     [&](const char* k) { return key == k; }) == known + n)
      throw ConfigError(cat("config: unknown key \"", prefix, key, "\""));
  }
}

json parse_set_value(const std::string& text) {
  json v = json::parse(text, nullptr, false);
  if (v.is_discarded()) return json(text);
  return v;
}

Settings load_settings(const std::string& config_path,
                       const std::vector<std::string>& sets,
                       std::optional<long long> seed_override,
                       const std::string& out_flag, bool config_required) {
  Settings s;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw IoError(cat("cannot open config ", config_path));
    try {
      in >> s.j;
    } catch (const json::exception& e) {
      throw ConfigError(cat("config ", config_path, ": ", e.what()));
    }
    if (!s.j.is_object()) throw ConfigError(cat("config ", config_path, ": not an object"));
    s.base = fs::path(config_path).parent_path();
    if (s.base.empty()) s.base = ".";
  } else if (config_required) {
    throw ConfigError("missing --config");
  }

  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError(cat("--set expects KEY=VALUE, got \"", kv, "\""));
    const std::string key = kv.substr(0, eq);
    json* node = &s.j;
    std::size_t from = 0;
    for (std::size_t dot = key.find('.'); dot != std::string::npos;
         from = dot + 1, dot = key.find('.', from)) {
      node = &(*node)[key.substr(from, dot - from)];
      if (!node->is_object()) *node = json::object();
    }
    (*node)[key.substr(from)] = parse_set_value(kv.substr(eq + 1));
  }
  if (seed_override) s.j["seed"] = *seed_override;
  if (!out_flag.empty()) s.out_override = fs::path(out_flag);

  check_keys(s.j, kTopKeys, std::size(kTopKeys), "");
  if (s.j.contains("synthetic")) {
    if (!s.j.at("synthetic").is_object())
      throw ConfigError("config: \"synthetic\" must be an object");
    check_keys(s.j.at("synthetic"), kSynthKeys, std::size(kSynthKeys), "synthetic.");
  }
  return s;
}

TrainConfig train_config(const Settings& s, const std::string& ablation_flag) {
  TrainConfig c;
  c.lr = s.get<double>("lr", c.lr);
  c.batch_size = s.get<int>("batch_size", c.batch_size);
  c.max_epochs = s.get<int>("max_epochs", c.max_epochs);
  c.patience = s.get<int>("patience", c.patience);
  c.alpha = s.get<double>("alpha", c.alpha);
  c.beta = s.get<double>("beta", c.beta);
  c.dropout_rate = s.get<double>("dropout_rate", c.dropout_rate);
  c.seed = s.get<std::uint64_t>("seed", c.seed);
  c.mask_zero_rows = s.get<bool>("mask_zero_rows", c.mask_zero_rows);
  c.dcca.r1 = s.get<double>("r1", c.dcca.r1);
  c.dcca.r2 = s.get<double>("r2", c.dcca.r2);
  c.dcca.eigen_floor = s.get<double>("eigen_floor", c.dcca.eigen_floor);
  std::string ab = !ablation_flag.empty() ? ablation_flag : s.str("ablation");
  if (!ab.empty()) {
    std::replace(ab.begin(), ab.end(), '-', '_');
    c.ablation = ablation_from_name(ab);
  }
  c.validate();
  return c;
}

EncoderConfig encoder_config(const Settings& s, int data_width) {
  EncoderConfig c;
  c.input_dim = s.get<int>("input_dim", 0);
  if (c.input_dim == 0) c.input_dim = data_width;
  c.gru_layers = s.get<int>("gru_layers", c.gru_layers);
  c.gru_hidden = s.get<int>("gru_hidden", c.gru_hidden);
  c.latent_dim = s.get<int>("latent_dim", c.latent_dim);
  c.transformer_layers = s.get<int>("transformer_layers", c.transformer_layers);
  c.heads = s.get<int>("heads", c.heads);
  c.ffn_hidden = s.get<int>("ffn_hidden", c.ffn_hidden);
  c.classifier_hidden = s.get<int>("classifier_hidden", c.classifier_hidden);
  c.validate();
  return c;
}

SyntheticSpec synthetic_spec(const Settings& s) {
  SyntheticSpec spec;
  if (!s.j.contains("synthetic")) return spec;
  const json& j = s.j.at("synthetic");
  auto get = [&](const char* k, auto fallback) {
    using T = decltype(fallback);
    if (!j.contains(k) || j.at(k).is_null()) return fallback;
    try {
      return j.at(k).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(cat("config: bad value for \"synthetic.", k, "\""));
    }
  };
  spec.latent_dim = get("latent_dim", spec.latent_dim);
  spec.clip_len = get("clip_len", spec.clip_len);
  spec.train_clips = get("train_clips", spec.train_clips);
  spec.dev_clips = get("dev_clips", spec.dev_clips);
  spec.test_clips = get("test_clips", spec.test_clips);
  spec.strong_dim = get("strong_dim", spec.strong_dim);
  spec.weak_dim = get("weak_dim", spec.weak_dim);
  spec.weak_visible = get("weak_visible", spec.weak_visible);
  spec.sigma_strong = get("sigma_strong", spec.sigma_strong);
  spec.sigma_weak = get("sigma_weak", spec.sigma_weak);
  spec.label_rule = get("label_rule", spec.label_rule);
  spec.seed = get("seed", spec.seed);
  spec.validate();
  return spec;
}

Dataset load_data(const Settings& s) {
  return load_dataset(s.resolve(s.require("manifest", "this command")).string());
}

void check_task(const Settings& s, Task actual, const std::string& source) {
  const std::string want = s.str("task");
  if (!want.empty() && task_from_name(want) != actual)
    throw ConfigError(cat("config task \"", want, "\" does not match ", source,
                          " task \"", task_name(actual), "\""));
}

int require_modality(const Dataset& ds, const std::string& name) {
  auto it = ds.modalities.find(name);
  if (it == ds.modalities.end()) {
    std::string avail;
    for (const auto& [m, w] : ds.modalities) {
      (void)w;
      avail += avail.empty() ? m : ", " + m;
    }
    throw ConfigError(cat("unknown modality \"", name, "\"; available: ", avail));
  }
  return it->second;
}

// Append-only metrics stream; run_id keeps concurrent histories apart.
class MetricsFile {
 public:
  explicit MetricsFile(const fs::path& dir) : path_(dir / "metrics.jsonl") {
    fs::create_directories(dir);
  }
  void write(const std::string& line) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError(cat("cannot append to ", path_.string()));
    out << line << "\n";
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string summary_line(const std::string& run_id, const std::string& stage,
                         const TrainResult& r, std::optional<double> alpha,
                         std::optional<double> beta, const std::string& ckpt) {
  ordered_json j;
  j["run_id"] = run_id;
  j["stage"] = stage;
  j["event"] = "summary";
  j["best_epoch"] = r.best_epoch;
  j["best_metric"] = r.best_metric;
  j["alpha"] = alpha ? json(*alpha) : json(nullptr);
  j["beta"] = beta ? json(*beta) : json(nullptr);
  j["checkpoint"] = ckpt;
  return j.dump();
}

int cmd_synth(const Settings& s, std::ostream& out) {
  SyntheticSpec spec = synthetic_spec(s);
  Dataset ds = generate_synthetic(spec);
  const fs::path dir = s.out_dir();
  fs::create_directories(dir);
  write_dataset(ds, dir.string());
  out << "wrote " << (dir / "manifest.json").string() << " (" << ds.train.size()
      << " train / " << ds.dev.size() << " dev / " << ds.test.size()
      << " test clips)\n";
  return 0;
}

int cmd_train(const Settings& s, const std::string& stage,
              const std::string& ablation_flag, std::ostream& out) {
  Dataset ds = load_data(s);
  check_task(s, ds.task, "dataset");
  TrainConfig tc = train_config(s, ablation_flag);
  tc.task = ds.task;
  const std::string run_id = s.get<std::string>("run_id", "run");
  MetricsFile metrics(s.out_dir());
  auto sink = [&](const std::string& line) { metrics.write(line); };
  auto stats = compute_feature_stats(ds);

  if (stage == "source") {
    const std::string modality = s.require("modality", "train --stage source");
    const int width = require_modality(ds, modality);
    SourceModelT<float> model(ds.task, encoder_config(s, width), tc.seed);
    set_input_norm<float>(model, stats.at(modality));
    TrainResult r = train_source(model, ds, modality, tc, run_id, sink);
    const fs::path ckpt = s.out_dir() / (run_id + ".source.ckpt");
    save_checkpoint(ckpt.string(), model.task, model.enc.cfg, model.parameters());
    const std::string line =
        summary_line(run_id, "source", r, std::nullopt, std::nullopt,
                     ckpt.filename().string());
    metrics.write(line);
    out << line << "\n";
    return 0;
  }

  // stage == "weak"
  const std::string src_path = s.str("source_checkpoint");
  if (src_path.empty())
    throw ConfigError(
        "train --stage weak requires \"source_checkpoint\" (train the source "
        "modality first and point the config at its checkpoint)");
  Checkpoint ck = load_checkpoint(s.resolve(src_path).string());
  if (ck.task != ds.task)
    throw ConfigError(cat("source checkpoint task \"", task_name(ck.task),
                          "\" does not match dataset task \"", task_name(ds.task), "\""));
  SourceModelT<float> source(ck.task, ck.enc, 0);
  bind_checkpoint(ck, source.parameters(), false);
  source.freeze();

  const std::string weak_mod = s.require("weak_modality", "train --stage weak");
  const std::string strong_mod = s.require("strong_modality", "train --stage weak");
  const int weak_width = require_modality(ds, weak_mod);
  const int strong_width = require_modality(ds, strong_mod);
  EncoderConfig ec = encoder_config(s, weak_width);
  if (ec.latent_dim != ck.enc.latent_dim)
    throw ConfigError(cat("latent_dim ", ec.latent_dim,
                          " does not match source checkpoint latent_dim ",
                          ck.enc.latent_dim));

  std::optional<WeakModelT<float>> model;
  if (tc.ablation == Ablation::no_decoder) {
    model.emplace(ds.task, ec, tc.seed);
  } else {
    DecoderConfig dc;
    dc.gru_layers = s.get<int>("decoder_gru_layers", dc.gru_layers);
    dc.gru_hidden = s.get<int>("decoder_gru_hidden", dc.gru_hidden);
    dc.output_dim = strong_width;
    model.emplace(ds.task, ec, dc, tc.seed);
  }
  set_input_norm<float>(*model, stats.at(weak_mod));
  TrainResult r = train_weak(*model, source, ds, weak_mod, strong_mod, tc, run_id, sink);
  const fs::path ckpt = s.out_dir() / (run_id + ".weak.ckpt");
  save_checkpoint(ckpt.string(), model->task, model->enc.cfg, model->parameters());
  const std::string line = summary_line(run_id, "weak", r, tc.effective_alpha(),
                                        tc.effective_beta(), ckpt.filename().string());
  metrics.write(line);
  out << line << "\n";
  return 0;
}

int cmd_eval(const Settings& s, std::ostream& out) {
  Checkpoint ck = load_checkpoint(
      s.resolve(s.require("checkpoint", "eval")).string());
  check_task(s, ck.task, "checkpoint");
  Dataset ds = load_data(s);
  if (ds.task != ck.task)
    throw ConfigError(cat("checkpoint task \"", task_name(ck.task),
                          "\" does not match dataset task \"", task_name(ds.task), "\""));
  const std::string split = s.get<std::string>("split", "dev");
  if (split != "train" && split != "dev" && split != "test")
    throw ConfigError(cat("unknown split \"", split,
                          "\"; available: train, dev, test"));
  const std::string modality = s.require("modality", "eval");
  const int width = require_modality(ds, modality);
  if (width != ck.enc.input_dim)
    throw ConfigError(cat("modality \"", modality, "\" width ", width,
                          " does not match checkpoint input_dim ", ck.enc.input_dim));

  // Weak checkpoints carry decoder entries; evaluation never materializes
  // the decoder, so extra entries are allowed.
  SourceModelT<float> model(ck.task, ck.enc, 0);
  bind_checkpoint(ck, model.parameters(), true);
  EvalMetrics em = evaluate_model(model, ds.split(split), modality, ds.granularity);

  ordered_json j;
  j["run_id"] = s.get<std::string>("run_id", "run");
  j["event"] = "eval";
  j["split"] = split;
  j["modality"] = modality;
  j["loss_p"] = em.loss_p;
  j["acc"] = em.acc ? json(*em.acc) : json(nullptr);
  j["f1"] = em.f1 ? json(*em.f1) : json(nullptr);
  j["ccc"] = em.ccc_v ? json(*em.ccc_v) : json(nullptr);
  const std::string line = j.dump();
  MetricsFile(s.out_dir()).write(line);
  out << line << "\n";
  return 0;
}

int cmd_rank(const Settings& s, std::ostream& out, std::ostream& err) {
  Dataset ds = load_data(s);
  check_task(s, ds.task, "dataset");
  const auto names = s.get<std::vector<std::string>>("modalities", {});
  if (names.size() < 2)
    throw ConfigError("rank: config \"modalities\" must list at least 2 modalities");
  TrainConfig tc = train_config(s, "");
  tc.task = ds.task;
  const std::string run_id = s.get<std::string>("run_id", "run");
  MetricsFile metrics(s.out_dir());
  auto stats = compute_feature_stats(ds);

  std::vector<ModalityRecord> records;
  for (const std::string& name : names) {
    const int width = require_modality(ds, name);
    SourceModelT<float> model(ds.task, encoder_config(s, width), tc.seed);
    set_input_norm<float>(model, stats.at(name));
    TrainResult r = train_source(model, ds, name, tc, run_id + "." + name,
                                 [&](const std::string& l) { metrics.write(l); });
    records.push_back({name, width, r.best_metric, MetricKind::higher_better});
  }

  std::vector<std::string> warnings;
  std::vector<ModalityRecord> ranked = rank_modalities(std::move(records), &warnings);
  for (const std::string& w : warnings) err << w << "\n";

  const char* metric = ds.task == Task::classification ? "dev_acc" : "dev_ccc";
  out << "rank  modality  dim  " << metric << "\n";
  ordered_json table = ordered_json::array();
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const ModalityRecord& m = ranked[i];
    out << (i + 1) << "     " << m.name << "  " << m.feature_dim << "  "
        << std::setprecision(6) << m.score << "\n";
    ordered_json row;
    row["modality"] = m.name;
    row["feature_dim"] = m.feature_dim;
    row["score"] = m.score;
    table.push_back(row);
  }
  const fs::path ranking = s.out_dir() / "ranking.json";
  std::ofstream rf(ranking, std::ios::trunc);
  if (!rf) throw IoError(cat("cannot write ", ranking.string()));
  rf << table.dump(2) << "\n";
  return 0;
}

int cmd_sweep(const Settings& s, std::ostream& out, std::ostream& err) {
  verify::TransferConfig cfg = verify::default_transfer_config();
  cfg.spec = synthetic_spec(s);
  cfg.seeds = s.get<int>("seeds", cfg.seeds);
  cfg.base_seed = s.get<std::uint64_t>("seed", cfg.base_seed);
  cfg.train.lr = s.get<double>("lr", cfg.train.lr);
  cfg.train.batch_size = s.get<int>("batch_size", cfg.train.batch_size);
  cfg.train.max_epochs = s.get<int>("max_epochs", cfg.train.max_epochs);
  cfg.train.patience = s.get<int>("patience", cfg.train.patience);
  cfg.train.dropout_rate = s.get<double>("dropout_rate", cfg.train.dropout_rate);
  cfg.encoder.gru_layers = s.get<int>("gru_layers", cfg.encoder.gru_layers);
  cfg.encoder.gru_hidden = s.get<int>("gru_hidden", cfg.encoder.gru_hidden);
  cfg.encoder.latent_dim = s.get<int>("latent_dim", cfg.encoder.latent_dim);
  cfg.encoder.transformer_layers =
      s.get<int>("transformer_layers", cfg.encoder.transformer_layers);
  cfg.encoder.heads = s.get<int>("heads", cfg.encoder.heads);
  cfg.encoder.ffn_hidden = s.get<int>("ffn_hidden", cfg.encoder.ffn_hidden);
  cfg.encoder.classifier_hidden =
      s.get<int>("classifier_hidden", cfg.encoder.classifier_hidden);
  cfg.decoder.gru_layers = s.get<int>("decoder_gru_layers", cfg.decoder.gru_layers);
  cfg.decoder.gru_hidden = s.get<int>("decoder_gru_hidden", cfg.decoder.gru_hidden);

  verify::TransferOutcome o = verify::run_transfer_experiment(cfg, &err);

  ordered_json j;
  j["seeds"] = ordered_json::array();
  for (const auto& r : o.per_seed) {
    ordered_json row;
    row["seed"] = r.seed;
    row["strong"] = r.strong;
    row["weak"] = r.weak;
    row["cmstew"] = r.cmstew;
    row["no_lfa"] = r.no_lfa;
    row["no_decoder"] = r.no_decoder;
    j["seeds"].push_back(row);
  }
  j["strong_mean"] = o.strong_mean;
  j["weak_mean"] = o.weak_mean;
  j["cmstew_mean"] = o.cmstew_mean;
  j["no_lfa_mean"] = o.no_lfa_mean;
  j["no_decoder_mean"] = o.no_decoder_mean;
  j["non_degraded"] = o.non_degraded;
  const fs::path path = s.out_dir() / "sweep.json";
  fs::create_directories(s.out_dir());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(cat("cannot write ", path.string()));
  f << j.dump(2) << "\n";

  out << "strong " << o.strong_mean << "  weak " << o.weak_mean << "  cmstew "
      << o.cmstew_mean << "  no_lfa " << o.no_lfa_mean << "  no_decoder "
      << o.no_decoder_mean << "  non-degraded " << o.non_degraded << "/"
      << o.per_seed.size() << "\n";
  out << "wrote " << path.string() << "\n";
  return 0;
}

void print_check(const verify::CheckResult& c, std::ostream& out) {
  out << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << " ("
      << std::fixed << std::setprecision(2) << c.seconds << "s) "
      << c.detail << "\n";
  out.unsetf(std::ios::fixed);
}

const verify::CheckResult* find_check(const verify::Report& r, const std::string& name) {
  for (const auto& c : r.checks)
    if (c.name == name) return &c;
  return nullptr;
}

int cmd_verify(const std::string& level, std::ostream& out, std::ostream& err) {
  const bool full = level == "full";
  verify::Report rep = full ? verify::run_full_checks({}, &err)
                            : verify::run_fast_checks({});
  for (const auto& c : rep.checks) print_check(c, out);

  if (full) {
    // Acceptance summary: each criterion maps onto the checks above.
    struct Row {
      int id;
      const char* label;
      std::vector<const char*> checks;
    };
    const Row rows[] = {
        {1, "gradient correctness", {"grad.layers", "grad.dcca", "grad.weak_loss"}},
        {2, "correlation oracle", {"oracle.cca"}},
        {3, "metric oracles", {"oracle.metrics"}},
        {4, "objective collapse", {"train.collapse"}},
        {5, "freeze contract", {"train.freeze"}},
        {6, "synthetic transfer", {"transfer.synthetic"}},
        {7, "preprocessing exactness", {"preprocess.shift_window"}},
        {8, "determinism", {"train.determinism"}},
    };
    out << "\nacceptance summary\n";
    for (const Row& row : rows) {
      bool pass = true;
      double seconds = 0.0;
      for (const char* name : row.checks) {
        const verify::CheckResult* c = find_check(rep, name);
        pass = pass && c && c->pass;
        if (c) seconds += c->seconds;
      }
      out << "criterion " << row.id << " (" << row.label << "): "
          << (pass ? "PASS" : "FAIL") << " (" << std::fixed
          << std::setprecision(2) << seconds << "s)\n";
      out.unsetf(std::ios::fixed);
    }
  }
  return rep.all_pass() ? 0 : 1;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"cross-modal student exchange workbench"};
  app.name("cmstew");
  app.require_subcommand(1);

  std::string config_path, out_flag, stage = "source", ablation_flag, level = "fast";
  std::vector<std::string> sets;
  long long seed_flag = 0;
  bool seed_given = false;

  auto add_common = [&](CLI::App* sub, bool config_needed) {
    auto* opt = sub->add_option("--config", config_path, "JSON run config file");
    if (config_needed) opt->required();
    sub->add_option("--seed", seed_flag, "override the training seed")
        ->each([&](const std::string&) { seed_given = true; });
    sub->add_option("--out", out_flag, "override the output directory");
    sub->add_option("--set", sets, "override a config key (KEY=VALUE, repeatable)");
  };

  CLI::App* rank = app.add_subcommand("rank", "rank modalities by uni-modal dev score");
  add_common(rank, true);
  CLI::App* train = app.add_subcommand("train", "train the source or weak model");
  add_common(train, true);
  train->add_option("--stage", stage, "training stage")
      ->check(CLI::IsMember({"source", "weak"}));
  train->add_option("--ablation", ablation_flag, "none, no-lfa or no-decoder");
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(eval, true);
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, true);
  CLI::App* sweep = app.add_subcommand("sweep", "run the multi-seed transfer experiment");
  add_common(sweep, true);
  CLI::App* verify_cmd = app.add_subcommand("verify", "run the verification suites");
  add_common(verify_cmd, false);
  verify_cmd->add_option("--level", level, "fast or full")
      ->check(CLI::IsMember({"fast", "full"}));

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    std::optional<long long> seed_override;
    if (seed_given) seed_override = seed_flag;
    Settings s = load_settings(config_path, sets, seed_override, out_flag,
                               !verify_cmd->parsed());
    if (rank->parsed()) return cmd_rank(s, out, err);
    if (train->parsed()) return cmd_train(s, stage, ablation_flag, out);
    if (eval->parsed()) return cmd_eval(s, out);
    if (synth->parsed()) return cmd_synth(s, out);
    if (sweep->parsed()) return cmd_sweep(s, out, err);
    return cmd_verify(level, out, err);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace cmstew::cli
