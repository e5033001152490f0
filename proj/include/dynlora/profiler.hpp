// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dispatch accounting. Every matrix product the engine issues is one logical
// dispatch; decode latency is modeled as a fixed launch cost per dispatch plus
// FLOPs over an effective throughput. Optionally each dispatch also spins for
// the launch cost so wall-clock runs show the same effect.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dynlora/exec_mode.hpp"
#include "dynlora/model.hpp"

namespace dynlora {

enum class DispatchKind { BackboneGemm, AdapterGemm, RouterGemm, MergeGemm, SgmmDispatch };

inline constexpr std::array<DispatchKind, 5> kAllKinds = {
    DispatchKind::BackboneGemm, DispatchKind::AdapterGemm, DispatchKind::RouterGemm,
    DispatchKind::MergeGemm, DispatchKind::SgmmDispatch};

std::string_view to_string(DispatchKind kind);

enum class Phase { Decode, Prefill, Restore };

std::string_view to_string(Phase phase);

struct DispatchEvent {
  DispatchKind kind = DispatchKind::BackboneGemm;
  std::int64_t flops = 0;
  int token_step = 0;
  int site_id = -1;
  Phase phase = Phase::Decode;
};

struct CostParams {
  double launch_overhead_us = 20.0;
  double throughput_gflops = 1000.0;
  bool injected_delay = false;

  void validate() const;
  /// Modeled time of one dispatch.
  double dispatch_us(std::int64_t flops) const;
};

using KindCounts = std::map<DispatchKind, std::int64_t>;

/// 2*m*n*p.
constexpr std::int64_t gemm_flops(std::int64_t m, std::int64_t n, std::int64_t p) {
  return 2 * m * n * p;
}

class Profiler {
 public:
  explicit Profiler(CostParams params = {});

  void begin_token(int token_step, Phase phase);
  void record(DispatchKind kind, std::int64_t flops, int site_id = -1);

  const std::vector<DispatchEvent>& log() const { return log_; }
  std::vector<DispatchEvent>& mutable_log() { return log_; }
  void clear() { log_.clear(); }

  const CostParams& params() const { return params_; }
  void set_params(const CostParams& params);

  /// Turns off recording entirely (no events, no injected delay).
  void set_enabled(bool enabled) { enabled_ = enabled; }

 private:
  CostParams params_;
  std::vector<DispatchEvent> log_;
  int token_step_ = 0;
  Phase phase_ = Phase::Decode;
  bool enabled_ = true;
};

/// Closed-form decode dispatches per token. With S adapted sites and B total
/// sites:
///   NaivePerSite   Backbone B, Adapter 2kS, Router S
///   NaivePerBlock  Backbone B, Adapter 2kS, Router n_blocks
///   PreGatedNaive  Backbone B, Adapter 2kS, Router 1
///   SimpleMerge    Backbone B, Merge 2S,    Router 1
///   FusedSwitch    Backbone B, Sgmm 1,      Router 1
/// With top_k == 0 every mode degenerates to Backbone B.
KindCounts count_per_token(const ModelConfig& config, ExecMode mode);

/// Closed-form FLOPs per decode token in steady state (a fused switch carries
/// both the previous and the current selection, rank 2kr per site).
KindCounts flops_per_token(const ModelConfig& config, ExecMode mode);

std::int64_t total(const KindCounts& counts);

/// sum(count) * launch_overhead + sum(flops) / throughput, in microseconds.
double estimate_latency(const KindCounts& counts, const KindCounts& flops, const CostParams& params);

/// Modeled latency of the recorded events.
double modeled_us(std::span<const DispatchEvent> events, const CostParams& params);

struct CountMismatch {
  DispatchKind kind;
  std::int64_t expected;
  std::int64_t observed;
  int first_token;
};

struct VerifyResult {
  bool ok = true;
  int tokens_checked = 0;
  std::vector<CountMismatch> mismatches;

  std::string report() const;
};

/// Compares each decode token's recorded counts with count_per_token.
/// Prefill and restore events are ignored.
VerifyResult verify_counts(std::span<const DispatchEvent> events, const ModelConfig& config,
                           ExecMode mode);

struct BreakdownRow {
  DispatchKind kind;
  std::int64_t count = 0;
  std::int64_t flops = 0;
  double modeled_us = 0.0;
  double share = 0.0;  // fraction of total modeled time
};

struct Breakdown {
  int tokens = 0;
  double total_us = 0.0;
  std::vector<BreakdownRow> rows;  // kinds with at least one dispatch
  CostParams params;

  const BreakdownRow* find(DispatchKind kind) const;
};

/// Per-kind totals over the decode events of a log.
Breakdown breakdown_report(std::span<const DispatchEvent> events, const CostParams& params);

std::string breakdown_table(const Breakdown& b);
std::string breakdown_csv(const Breakdown& b);
std::string breakdown_json(const Breakdown& b);

/// Dispatch log aggregated per (token_step, kind):
/// token_step,kind,count,flops,modeled_us
std::string log_csv(std::span<const DispatchEvent> events, const CostParams& params);
/// JSON mirror of log_csv with a top-level params object.
std::string log_json(std::span<const DispatchEvent> events, const CostParams& params);

}  // namespace dynlora
