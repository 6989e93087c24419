// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "cmstew/training.hpp"

namespace cmstew::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  double seconds = 0.0;
  std::string detail;
};

struct Report {
  std::vector<CheckResult> checks;
  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

// Stored oracle constants the checks compare against.  Kept adjustable so
// the harness itself can be proven to fail on a wrong value.
struct Expectations {
  double ccc_example = 0.8;          // ccc([1,2,3,4], [2,2,4,4])
  double f1_example = 11.0 / 15.0;   // the two-class support-weighted case
  int shift_indices = 70;            // 2.8 s at 40 ms frames
  int window_count = 298;            // 7500 frames, 3 s window, 1 s hop
};

// Gradient checks (64-bit, central differences).
CheckResult check_layer_gradients();
CheckResult check_dcca_gradient();
CheckResult check_weak_loss_gradient();

// Value oracles.
CheckResult check_cca_oracle();
CheckResult check_metric_oracles(const Expectations& expect = {});

// Structural properties.
CheckResult check_encoder_shapes();
CheckResult check_preprocessing(const Expectations& expect = {});
CheckResult check_checkpoint_roundtrip();

// Training contracts (used by the full level).
CheckResult check_objective_collapse();
CheckResult check_freeze_contract();
CheckResult check_stream_determinism();

// The synthetic two-stage transfer experiment: per seed, uni-modal strong
// and weak baselines, the full weak model, and both ablations.
struct TransferConfig {
  SyntheticSpec spec;      // data recipe; spec.seed is replaced per run
  EncoderConfig encoder;   // input_dim is set from each modality's width
  DecoderConfig decoder;   // output_dim is set from the strong width
  TrainConfig train;
  int seeds = 5;
  std::uint64_t base_seed = 0;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  // Dev accuracies in points (0..100).
  double strong = 0, weak = 0, cmstew = 0, no_lfa = 0, no_decoder = 0;
};

struct TransferOutcome {
  std::vector<SeedOutcome> per_seed;
  double strong_mean = 0, weak_mean = 0, cmstew_mean = 0;
  double no_lfa_mean = 0, no_decoder_mean = 0;
  int non_degraded = 0;  // seeds with cmstew >= weak - 0.5 points
  double seconds = 0;

  bool gap_ok() const { return strong_mean - weak_mean >= 5.0; }
  bool improve_ok() const { return cmstew_mean > weak_mean; }
  bool nondegrade_ok(int seeds) const { return non_degraded >= seeds - 1; }
};

TransferConfig default_transfer_config();
TransferOutcome run_transfer_experiment(const TransferConfig& cfg,
                                        std::ostream* log = nullptr);
CheckResult check_transfer(const TransferConfig& cfg, std::ostream* log = nullptr,
                           TransferOutcome* out = nullptr);

// Fast: gradient, oracle, and structural checks (sub-minute).  Full adds
// the training contracts and the transfer experiment.
Report run_fast_checks(const Expectations& expect = {});
Report run_full_checks(const Expectations& expect = {}, std::ostream* log = nullptr);

}  // namespace cmstew::verify
