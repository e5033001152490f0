// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Fused adapter switching.
//
// For a decision with experts e_j and gate weights w_j, a site's adapter
// delta is  scale * sum_j w_j * up_j x down_j  (scale = alpha / r). It is
// written as one low-rank product up_c x down_c of rank k*r by stacking
// (scale * w_j * down_j) vertically and up_j horizontally.
//
// Switching from the previous token's decision to the current one applies
//
//   W <- W + [up_prev | up_cur] x [-down_prev ; down_cur]
//
// i.e. one rank-2kr product whose value is delta(cur) - delta(prev). Only the
// down factor of the previous slice is negated: negating both factors would
// cancel the signs and re-add the previous delta.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dynlora/gating.hpp"
#include "dynlora/model.hpp"
#include "dynlora/profiler.hpp"

namespace dynlora {

struct TileConfig {
  Index rows = 64;
  Index cols = 64;
  int workers = 1;
  /// Stage the next tile's operands into a per-worker buffer while the
  /// current one is computed. Never changes results.
  bool prefetch = true;

  void validate() const;
};

/// Low-rank factors of one site's update: down is rank x d_in, up is
/// d_out x rank. rank may be zero (no update).
struct SiteSlices {
  Matrix down;
  Matrix up;

  Index rank() const { return down.rows(); }
};

struct SegmentEntry {
  int site_id = 0;
  Index d_out = 0;
  Index d_in = 0;
  Index rank_rows = 0;
  std::size_t down_offset = 0;  // elements into FusedDelta::down_buf
  std::size_t up_offset = 0;    // elements into FusedDelta::up_buf
};

/// Packed concatenated factors of every site in one batch, plus the segment
/// table locating each site's slice.
struct FusedDelta {
  std::vector<SegmentEntry> segments;
  std::vector<double> down_buf;
  std::vector<double> up_buf;

  void add(int site_id, const SiteSlices& slices);
  /// Drops all segments but keeps buffer capacity for reuse.
  void clear();
  std::int64_t flops() const;
};

struct SwitchState {
  /// Decision currently merged into the weights.
  std::optional<GatingDecision> last_decision;
  /// Per adapted site, in adapted-site order.
  std::vector<bool> merged;
  /// Packed buffers reused from token to token.
  FusedDelta workspace;

  bool is_merged() const { return last_decision.has_value(); }
};

/// How the previous token's slice is negated inside build_fused.
enum class PrevSliceSign {
  /// Negate the down factor only. Product is -delta(prev).
  DownOnly,
  /// Negate both factors. Product is +delta(prev); kept for the regression
  /// test that demonstrates why this is wrong.
  BothFactors,
};

/// Rank k*r factors of a single decision's delta.
SiteSlices build_concat(const AdapterSite& site, const GatingDecision& decision, double scale);

/// site.weight += up x down, in place.
void merge(AdapterSite& site, const SiteSlices& slices);
/// site.weight -= up x down, in place. Exactly undoes merge of the same slices.
void unmerge(AdapterSite& site, const SiteSlices& slices);

/// Factors whose product is delta(cur) - delta(prev). Without prev this is
/// build_concat(cur); when prev selects the same experts with bitwise-equal
/// weights the switch is a no-op and the slices are empty.
SiteSlices build_fused(const AdapterSite& site, const std::optional<GatingDecision>& prev,
                       const GatingDecision& cur, double scale,
                       PrevSliceSign sign = PrevSliceSign::DownOnly);

/// Factors whose product is -delta(prev).
SiteSlices build_removal(const AdapterSite& site, const GatingDecision& prev, double scale);

/// Same as fused.add(site.site_id, build_fused(...)) without the temporary.
void add_fused(FusedDelta& fused, const AdapterSite& site, const std::optional<GatingDecision>& prev,
               const GatingDecision& cur, double scale, PrevSliceSign sign = PrevSliceSign::DownOnly);
/// Same as fused.add(site.site_id, build_removal(...)) without the temporary.
void add_removal(FusedDelta& fused, const AdapterSite& site, const GatingDecision& prev, double scale);

/// Segmented batched merge: weight[s.site_id] += up(s) x down(s) for every
/// segment, as a single dispatch. Output tiles are distributed across
/// workers; each tile reduces in ascending order, so results are identical
/// to per-site accumulate() for any worker count. `sites` is indexed by
/// site_id.
void sgmm(std::span<AdapterSite* const> sites, const FusedDelta& fused, const TileConfig& tile,
          Profiler* profiler = nullptr);

/// One token's fused switch of every adapted site to `cur`.
void switch_all(Model& model, SwitchState& state, const GatingDecision& cur, Profiler* profiler,
                const TileConfig& tile = {});

/// Removes the currently merged delta (one sgmm dispatch). No-op when nothing
/// is merged.
void restore(Model& model, SwitchState& state, Profiler* profiler, const TileConfig& tile = {});

}  // namespace dynlora
