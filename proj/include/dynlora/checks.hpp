// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Self-check suites run by `dynlora check`, and the per-mode benchmark.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "dynlora/config.hpp"
#include "dynlora/engine.hpp"

namespace dynlora {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct CheckOptions {
  int n_queries = 4;
  int n_new = 50;
  int prompt_len = 8;
  std::uint64_t seed = 0;
  int roundtrip_steps = 200;
  TileConfig tile;
};

/// PreGatedNaive, SimpleMerge and FusedSwitch agree on greedy tokens and on
/// logits within 1e-9 relative.
SuiteResult equivalence_suite(const Model& model, const CheckOptions& opt);
/// FusedSwitch decode then restore() returns adapted weights to pristine
/// within 1e-9 relative Frobenius; one merge+unmerge is bit-exact.
SuiteResult roundtrip_suite(const Model& model, const CheckOptions& opt);
/// Negating both previous factors re-adds the old delta and must fail the
/// roundtrip; negating only the down factor must pass.
SuiteResult sign_regression_suite(const Model& model, const CheckOptions& opt);
/// sgmm leaves identical weight bytes for 1, 2 and 8 workers, with and
/// without prefetch.
SuiteResult sgmm_determinism_suite(const Model& model, const CheckOptions& opt);

/// Runs all four suites on a PreGated copy of `model`. If every expert up
/// factor is zero the adapters are randomized first so the suites are not
/// vacuous.
std::vector<SuiteResult> run_checks(const Model& model, const CheckOptions& opt);

/// Roundtrip error after switching through `decisions` with the given
/// previous-slice sign and removing the final delta.
double switch_roundtrip_error(const Model& model, std::span<const GatingDecision> decisions,
                              PrevSliceSign sign);

struct BenchRow {
  ExecMode mode;
  int tokens = 0;
  double dispatches_per_token = 0.0;
  double modeled_us_per_token = 0.0;
  double wall_us_per_token = 0.0;
  double modeled_overhead_pct = 0.0;  // vs BackboneOnly
  double wall_overhead_pct = 0.0;
  bool counts_ok = false;
};

/// Decodes the run's prompts in each mode on a fresh copy of `model` routed
/// for that mode. BackboneOnly is always measured as the reference.
std::vector<BenchRow> run_bench(const Model& model, std::span<const ExecMode> modes, const RunConfig& run);

}  // namespace dynlora
