// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dynlora/exec_mode.hpp"
#include "dynlora/gating.hpp"
#include "dynlora/model.hpp"
#include "dynlora/profiler.hpp"
#include "dynlora/switching.hpp"

namespace dynlora {

/// Routing policy a mode needs from the model's routers.
RoutingPolicy routing_for(ExecMode mode);

/// y = W x + sum_j (scale * w_j) * up_j (down_j x), adding experts in decision
/// order. Shared by the naive decode paths and training so both produce
/// bit-identical outputs. Each product is logged when `profiler` is set.
Matrix adapter_site_forward(const AdapterSite& site, const Matrix& x, const GatingDecision* decision,
                            double scale, Profiler* profiler);

struct SessionOptions {
  CostParams cost;
  TileConfig tile;
  /// Keep x1 and the decision of every pre-gated token.
  bool record_trace = false;
  /// Record dispatches. Disable to run without a log.
  bool profile = true;
};

struct PreGateTrace {
  int token_step;
  Phase phase;
  Matrix x1;
  GatingDecision decision;
};

/// One decode stream over a model. The session mutates the model's weights
/// in the merging modes and restores them on restore() or destruction.
/// decode_token calls must be sequential.
class DecodeSession {
 public:
  DecodeSession(Model& model, ExecMode mode, SessionOptions options = {});
  ~DecodeSession();

  DecodeSession(const DecodeSession&) = delete;
  DecodeSession& operator=(const DecodeSession&) = delete;

  /// Runs one token through the mode's pipeline; returns vocab x 1 logits.
  Matrix decode_token(int token_id);

  /// Evaluates each position without any merging (the unoptimized path of
  /// the session's routing policy) and returns per-position logits. Any
  /// merged delta is removed first, so the switch state ends unmerged.
  std::vector<Matrix> prefill(std::span<const int> token_ids);

  /// Greedy continuation: prefill all but the last prompt token, then decode
  /// n_new steps, feeding back the argmax (ties toward the lower id).
  std::vector<int> generate(std::span<const int> prompt, int n_new);

  /// Unmerges whatever delta is currently applied.
  void restore();

  ExecMode mode() const { return mode_; }
  const Model& model() const { return model_; }
  Profiler& profiler() { return profiler_; }
  const Profiler& profiler() const { return profiler_; }
  const SwitchState& switch_state() const { return state_; }
  const std::vector<PreGateTrace>& trace() const { return trace_; }
  const std::vector<int>& generated() const { return generated_; }
  int decode_steps() const { return decode_step_; }

 private:
  Matrix forward(int token_id, ExecMode path, Phase phase, int step);
  Matrix eval_site(const AdapterSite& site, const Matrix& x, ExecMode path, Phase phase, int step,
                   int block);
  void check_output(const Matrix& y, const AdapterSite& site) const;

  Model& model_;
  ExecMode mode_;
  SessionOptions options_;
  Profiler profiler_;
  SwitchState state_;
  double scale_;
  int first_adapted_site_ = -1;

  // Per-token scratch.
  std::optional<GatingDecision> token_decision_;
  std::vector<GatingDecision> block_decisions_;
  std::vector<std::pair<int, SiteSlices>> merged_this_token_;

  std::vector<PreGateTrace> trace_;
  std::vector<int> generated_;
  int decode_step_ = 0;
};

/// Index of the largest element; ties toward the lower index.
int argmax(const Matrix& logits);

}  // namespace dynlora
