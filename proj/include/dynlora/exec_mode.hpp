// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string_view>

namespace dynlora {

enum class ExecMode {
  /// Backbone only; adapters ignored. Reference row for overhead percentages.
  BackboneOnly,
  /// Router and separate adapter products at every adapted site.
  NaivePerSite,
  /// One router per block, adapters as separate products.
  NaivePerBlock,
  /// One token-wide pre-gate decision, adapters as separate products.
  PreGatedNaive,
  /// Pre-gated; merge each site before its forward, unmerge after the token.
  SimpleMerge,
  /// Pre-gated; one fused switch of every site per token, then plain forward.
  FusedSwitch,
};

inline constexpr std::array<ExecMode, 6> kAllModes = {
    ExecMode::BackboneOnly, ExecMode::NaivePerSite, ExecMode::NaivePerBlock,
    ExecMode::PreGatedNaive, ExecMode::SimpleMerge,  ExecMode::FusedSwitch};

std::string_view to_string(ExecMode mode);
ExecMode parse_mode(std::string_view name);

/// True for the modes whose routers follow the pre-gated policy.
bool uses_pre_gate(ExecMode mode);

}  // namespace dynlora
