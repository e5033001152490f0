// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include "dynlora/switching.hpp"

#include <algorithm>
#include <thread>

namespace dynlora {

void TileConfig::validate() const {
  if (rows < 1 || cols < 1) throw ConfigError("tile dimensions must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
}

void FusedDelta::add(int site_id, const SiteSlices& slices) {
  if (slices.up.cols() != slices.down.rows()) {
    throw ShapeError("FusedDelta::add: up " + shape_string(slices.up) + " and down " +
                     shape_string(slices.down) + " disagree on rank");
  }
  SegmentEntry seg;
  seg.site_id = site_id;
  seg.d_out = slices.up.rows();
  seg.d_in = slices.down.cols();
  seg.rank_rows = slices.down.rows();
  seg.down_offset = down_buf.size();
  seg.up_offset = up_buf.size();
  down_buf.insert(down_buf.end(), slices.down.data(), slices.down.data() + slices.down.size());
  up_buf.insert(up_buf.end(), slices.up.data(), slices.up.data() + slices.up.size());
  segments.push_back(seg);
}

void FusedDelta::clear() {
  segments.clear();
  down_buf.clear();
  up_buf.clear();
}

std::int64_t FusedDelta::flops() const {
  std::int64_t f = 0;
  for (const auto& s : segments) f += gemm_flops(s.d_out, s.d_in, s.rank_rows);
  return f;
}

namespace {

void check_decision(const AdapterSite& site, const GatingDecision& d) {
  if (!site.adapted) {
    throw StateError("site " + std::to_string(site.site_id) + " carries no adapters");
  }
  if (d.indices.size() != d.weights.size()) throw ShapeError("decision indices/weights length differ");
  for (int idx : d.indices) {
    if (idx < 0 || idx >= static_cast<int>(site.experts.size())) {
      throw ShapeError("expert index " + std::to_string(idx) + " out of range [0, " +
                       std::to_string(site.experts.size()) + ")");
    }
  }
}

// Writes the slices of one decision at row/column `offset`. `down_sign` and
// `up_sign` are +-1 and applied after scaling, which is exact.
void fill_decision(MatrixRef<double> down, MatrixRef<double> up, Index offset, const AdapterSite& site,
                   const GatingDecision& d, double scale, double down_sign, double up_sign) {
  for (std::size_t j = 0; j < d.indices.size(); ++j) {
    const LoraExpert& e = site.experts[d.indices[j]];
    const Index r = e.down.rows();
    const double coeff = scale * d.weights[j];
    down.middleRows(offset, r) = down_sign * (coeff * e.down);
    up.middleCols(offset, r) = up_sign * e.up;
    offset += r;
  }
}

Index decision_rank(const AdapterSite& site, const GatingDecision& d) {
  Index r = 0;
  for (int idx : d.indices) r += site.experts[idx].down.rows();
  return r;
}

// Plan of one site's fused slice: which decisions go in, with which signs.
struct SlicePlan {
  const GatingDecision* first = nullptr;
  double first_down_sign = 1.0, first_up_sign = 1.0;
  const GatingDecision* second = nullptr;
  Index rank = 0;
};

SlicePlan plan_fused(const AdapterSite& site, const std::optional<GatingDecision>& prev, const GatingDecision& cur,
                     PrevSliceSign sign) {
  check_decision(site, cur);
  SlicePlan plan;
  if (!prev) {
    plan.first = &cur;
  } else {
    check_decision(site, *prev);
    if (prev->same_selection(cur)) return plan;
    plan.first = prev.operator->();
    plan.first_down_sign = -1.0;
    plan.first_up_sign = sign == PrevSliceSign::BothFactors ? -1.0 : 1.0;
    plan.second = &cur;
  }
  plan.rank = decision_rank(site, *plan.first) + (plan.second ? decision_rank(site, *plan.second) : 0);
  return plan;
}

void fill_plan(const SlicePlan& plan, MatrixRef<double> down, MatrixRef<double> up, const AdapterSite& site,
               double scale) {
  if (plan.first == nullptr) return;
  fill_decision(down, up, 0, site, *plan.first, scale, plan.first_down_sign, plan.first_up_sign);
  if (plan.second) {
    fill_decision(down, up, decision_rank(site, *plan.first), site, *plan.second, scale, 1.0, 1.0);
  }
}

SiteSlices slices_for(const SlicePlan& plan, const AdapterSite& site, double scale) {
  SiteSlices s{Matrix(plan.rank, site.d_in()), Matrix(site.d_out(), plan.rank)};
  fill_plan(plan, s.down, s.up, site, scale);
  return s;
}

void append_plan(FusedDelta& fused, const SlicePlan& plan, const AdapterSite& site, double scale) {
  SegmentEntry seg;
  seg.site_id = site.site_id;
  seg.d_out = site.d_out();
  seg.d_in = site.d_in();
  seg.rank_rows = plan.rank;
  seg.down_offset = fused.down_buf.size();
  seg.up_offset = fused.up_buf.size();
  fused.down_buf.resize(seg.down_offset + static_cast<std::size_t>(plan.rank * seg.d_in));
  fused.up_buf.resize(seg.up_offset + static_cast<std::size_t>(seg.d_out * plan.rank));
  Eigen::Map<Matrix> down(fused.down_buf.data() + seg.down_offset, plan.rank, seg.d_in);
  Eigen::Map<Matrix> up(fused.up_buf.data() + seg.up_offset, seg.d_out, plan.rank);
  fill_plan(plan, down, up, site, scale);
  fused.segments.push_back(seg);
}

SlicePlan plan_removal(const AdapterSite& site, const GatingDecision& prev) {
  check_decision(site, prev);
  SlicePlan plan;
  plan.first = &prev;
  plan.first_down_sign = -1.0;
  plan.rank = decision_rank(site, prev);
  return plan;
}

}  // namespace

SiteSlices build_concat(const AdapterSite& site, const GatingDecision& decision, double scale) {
  return slices_for(plan_fused(site, std::nullopt, decision, PrevSliceSign::DownOnly), site, scale);
}

void merge(AdapterSite& site, const SiteSlices& slices) {
  accumulate<double>(site.weight, slices.up, slices.down, Sign::Plus);
}

void unmerge(AdapterSite& site, const SiteSlices& slices) {
  accumulate<double>(site.weight, slices.up, slices.down, Sign::Minus);
}

SiteSlices build_fused(const AdapterSite& site, const std::optional<GatingDecision>& prev,
                       const GatingDecision& cur, double scale, PrevSliceSign sign) {
  return slices_for(plan_fused(site, prev, cur, sign), site, scale);
}

SiteSlices build_removal(const AdapterSite& site, const GatingDecision& prev, double scale) {
  return slices_for(plan_removal(site, prev), site, scale);
}

void add_fused(FusedDelta& fused, const AdapterSite& site, const std::optional<GatingDecision>& prev,
               const GatingDecision& cur, double scale, PrevSliceSign sign) {
  append_plan(fused, plan_fused(site, prev, cur, sign), site, scale);
}

void add_removal(FusedDelta& fused, const AdapterSite& site, const GatingDecision& prev, double scale) {
  append_plan(fused, plan_removal(site, prev), site, scale);
}

// ---------------------------------------------------------------------------
// SGMM

namespace {

struct Tile {
  std::size_t segment;
  Index row0, rows, col0, cols;
};

void validate_segments(std::span<AdapterSite* const> sites, const FusedDelta& fused) {
  std::vector<int> seen_sites;
  std::vector<std::pair<std::size_t, std::size_t>> down_ranges, up_ranges;
  for (const auto& s : fused.segments) {
    if (s.site_id < 0 || s.site_id >= static_cast<int>(sites.size()) || sites[s.site_id] == nullptr) {
      throw ShapeError("sgmm: segment targets unknown site " + std::to_string(s.site_id));
    }
    const AdapterSite& site = *sites[s.site_id];
    if (site.d_out() != s.d_out || site.d_in() != s.d_in) {
      throw ShapeError("sgmm: segment for site " + std::to_string(s.site_id) + " is " +
                       std::to_string(s.d_out) + "x" + std::to_string(s.d_in) + " but weight is " +
                       shape_string(site.weight));
    }
    const std::size_t down_len = static_cast<std::size_t>(s.rank_rows * s.d_in);
    const std::size_t up_len = static_cast<std::size_t>(s.d_out * s.rank_rows);
    if (s.rank_rows < 0 || s.down_offset + down_len > fused.down_buf.size() ||
        s.up_offset + up_len > fused.up_buf.size()) {
      throw ShapeError("sgmm: segment for site " + std::to_string(s.site_id) +
                       " exceeds packed buffer bounds");
    }
    seen_sites.push_back(s.site_id);
    if (down_len > 0) down_ranges.emplace_back(s.down_offset, s.down_offset + down_len);
    if (up_len > 0) up_ranges.emplace_back(s.up_offset, s.up_offset + up_len);
  }
  std::sort(seen_sites.begin(), seen_sites.end());
  if (std::adjacent_find(seen_sites.begin(), seen_sites.end()) != seen_sites.end()) {
    throw ShapeError("sgmm: overlapping segments (two segments target one site)");
  }
  for (auto* ranges : {&down_ranges, &up_ranges}) {
    std::sort(ranges->begin(), ranges->end());
    for (std::size_t i = 1; i < ranges->size(); ++i) {
      if ((*ranges)[i].first < (*ranges)[i - 1].second) {
        throw ShapeError("sgmm: overlapping segments in packed buffer");
      }
    }
  }
}

// Copies the operands of one tile into contiguous storage: up rows
// [row0, row0+rows) x rank and down columns [col0, col0+cols) x rank.
void stage(const FusedDelta& fused, const Tile& t, std::vector<double>& up_stage,
           std::vector<double>& down_stage) {
  const SegmentEntry& s = fused.segments[t.segment];
  const Index rank = s.rank_rows;
  up_stage.resize(static_cast<std::size_t>(t.rows * rank));
  down_stage.resize(static_cast<std::size_t>(rank * t.cols));
  const double* up = fused.up_buf.data() + s.up_offset + t.row0 * rank;
  std::copy(up, up + t.rows * rank, up_stage.begin());
  const double* down = fused.down_buf.data() + s.down_offset + t.col0;
  for (Index q = 0; q < rank; ++q) {
    std::copy(down + q * s.d_in, down + q * s.d_in + t.cols, down_stage.begin() + q * t.cols);
  }
}

void run_worker(std::span<AdapterSite* const> sites, const FusedDelta& fused,
                const std::vector<Tile>& tiles, std::size_t first, std::size_t stride, bool prefetch) {
  std::vector<double> product;
  // Double buffer: [cur] holds the operands being multiplied, [next] the
  // operands of this worker's following tile.
  std::vector<double> up_stage[2], down_stage[2];
  int cur = 0;
  if (prefetch && first < tiles.size()) stage(fused, tiles[first], up_stage[cur], down_stage[cur]);

  for (std::size_t i = first; i < tiles.size(); i += stride) {
    const Tile& t = tiles[i];
    const SegmentEntry& s = fused.segments[t.segment];
    const Index rank = s.rank_rows;
    if (prefetch && i + stride < tiles.size()) {
      stage(fused, tiles[i + stride], up_stage[1 - cur], down_stage[1 - cur]);
    }
    product.resize(static_cast<std::size_t>(t.rows * t.cols));
    if (prefetch) {
      gemm_ascending(up_stage[cur].data(), rank, down_stage[cur].data(), t.cols, product.data(), t.cols,
                     t.rows, t.cols, rank);
    } else {
      gemm_ascending(fused.up_buf.data() + s.up_offset + t.row0 * rank, rank,
                     fused.down_buf.data() + s.down_offset + t.col0, s.d_in, product.data(), t.cols,
                     t.rows, t.cols, rank);
    }
    Matrix& w = sites[s.site_id]->weight;
    for (Index r = 0; r < t.rows; ++r) {
      double* row = w.data() + (t.row0 + r) * w.cols() + t.col0;
      const double* p = product.data() + r * t.cols;
      for (Index c = 0; c < t.cols; ++c) row[c] += snap_to_lattice(p[c]);
    }
    cur = 1 - cur;
  }
}

}  // namespace

void sgmm(std::span<AdapterSite* const> sites, const FusedDelta& fused, const TileConfig& tile,
          Profiler* profiler) {
  tile.validate();
  validate_segments(sites, fused);
  if (profiler != nullptr) profiler->record(DispatchKind::SgmmDispatch, fused.flops());

  std::vector<Tile> tiles;
  for (std::size_t si = 0; si < fused.segments.size(); ++si) {
    const SegmentEntry& s = fused.segments[si];
    if (s.rank_rows == 0) continue;
    for (Index r0 = 0; r0 < s.d_out; r0 += tile.rows) {
      for (Index c0 = 0; c0 < s.d_in; c0 += tile.cols) {
        tiles.push_back({si, r0, std::min(tile.rows, s.d_out - r0), c0, std::min(tile.cols, s.d_in - c0)});
      }
    }
  }
  if (tiles.empty()) return;

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(tile.workers), tiles.size());
  if (workers == 1) {
    run_worker(sites, fused, tiles, 0, 1, tile.prefetch);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] { run_worker(sites, fused, tiles, w, workers, tile.prefetch); });
  }
}

void switch_all(Model& model, SwitchState& state, const GatingDecision& cur, Profiler* profiler,
                const TileConfig& tile) {
  const double scale = model.config.lora_scale();
  const std::vector<int> ids = model.adapted_site_ids();
  FusedDelta& fused = state.workspace;
  fused.clear();
  for (int id : ids) add_fused(fused, model.site(id), state.last_decision, cur, scale);
  const auto table = model.site_table();
  sgmm(table, fused, tile, profiler);
  state.last_decision = cur;
  state.merged.assign(ids.size(), true);
}

void restore(Model& model, SwitchState& state, Profiler* profiler, const TileConfig& tile) {
  if (!state.last_decision) return;
  const double scale = model.config.lora_scale();
  const std::vector<int> ids = model.adapted_site_ids();
  FusedDelta& fused = state.workspace;
  fused.clear();
  for (int id : ids) add_removal(fused, model.site(id), *state.last_decision, scale);
  const auto table = model.site_table();
  sgmm(table, fused, tile, profiler);
  state.last_decision.reset();
  state.merged.assign(ids.size(), false);
}

}  // namespace dynlora
