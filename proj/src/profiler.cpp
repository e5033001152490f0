// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include "dynlora/profiler.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace dynlora {

std::string_view to_string(ExecMode mode) {
  switch (mode) {
    case ExecMode::BackboneOnly:
      return "BackboneOnly";
    case ExecMode::NaivePerSite:
      return "NaivePerSite";
    case ExecMode::NaivePerBlock:
      return "NaivePerBlock";
    case ExecMode::PreGatedNaive:
      return "PreGatedNaive";
    case ExecMode::SimpleMerge:
      return "SimpleMerge";
    case ExecMode::FusedSwitch:
      return "FusedSwitch";
  }
  return "?";
}

ExecMode parse_mode(std::string_view name) {
  for (ExecMode m : kAllModes)
    if (to_string(m) == name) return m;
  throw ConfigError("unknown mode '" + std::string(name) + "'");
}

bool uses_pre_gate(ExecMode mode) {
  return mode == ExecMode::PreGatedNaive || mode == ExecMode::SimpleMerge ||
         mode == ExecMode::FusedSwitch;
}

std::string_view to_string(DispatchKind kind) {
  switch (kind) {
    case DispatchKind::BackboneGemm:
      return "BackboneGemm";
    case DispatchKind::AdapterGemm:
      return "AdapterGemm";
    case DispatchKind::RouterGemm:
      return "RouterGemm";
    case DispatchKind::MergeGemm:
      return "MergeGemm";
    case DispatchKind::SgmmDispatch:
      return "SgmmDispatch";
  }
  return "?";
}

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::Decode:
      return "decode";
    case Phase::Prefill:
      return "prefill";
    case Phase::Restore:
      return "restore";
  }
  return "?";
}

void CostParams::validate() const {
  if (!(launch_overhead_us >= 0.0) || !std::isfinite(launch_overhead_us)) {
    throw ConfigError("launch_overhead_us must be finite and >= 0");
  }
  if (!(throughput_gflops > 0.0) || !std::isfinite(throughput_gflops)) {
    throw ConfigError("throughput_gflops must be finite and > 0");
  }
}

double CostParams::dispatch_us(std::int64_t flops) const {
  // 1 GFLOP/s == 1e3 FLOP/us.
  return launch_overhead_us + static_cast<double>(flops) / (throughput_gflops * 1e3);
}

Profiler::Profiler(CostParams params) : params_(params) { params_.validate(); }

void Profiler::set_params(const CostParams& params) {
  params.validate();
  params_ = params;
}

void Profiler::begin_token(int token_step, Phase phase) {
  token_step_ = token_step;
  phase_ = phase;
}

void Profiler::record(DispatchKind kind, std::int64_t flops, int site_id) {
  if (!enabled_) return;
  log_.push_back({kind, flops, token_step_, site_id, phase_});
  if (params_.injected_delay && params_.launch_overhead_us > 0.0) {
    using clock = std::chrono::steady_clock;
    const auto until = clock::now() + std::chrono::duration<double, std::micro>(params_.launch_overhead_us);
    while (clock::now() < until) {
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

struct SiteDims {
  std::int64_t d_out, d_in;
  bool adapted;
};

std::vector<SiteDims> site_dims(const ModelConfig& c) {
  std::vector<SiteDims> dims;
  for (int b = 0; b < c.n_blocks; ++b) {
    for (int k = 0; k < kSitesPerBlock; ++k) {
      const auto kind = static_cast<SiteKind>(k);
      std::int64_t d_out = c.d_model, d_in = c.d_model;
      if (kind == SiteKind::Gate || kind == SiteKind::Up) d_out = c.d_hidden;
      if (kind == SiteKind::Down) d_in = c.d_hidden;
      dims.push_back({d_out, d_in, is_adapted(kind, c.placement)});
    }
  }
  return dims;
}

}  // namespace

KindCounts count_per_token(const ModelConfig& c, ExecMode mode) {
  const std::int64_t sites = c.total_sites();
  const std::int64_t adapted = c.adapted_sites();
  const std::int64_t k = c.top_k;
  KindCounts counts{{DispatchKind::BackboneGemm, sites}};
  if (k == 0) return counts;
  switch (mode) {
    case ExecMode::BackboneOnly:
      break;
    case ExecMode::NaivePerSite:
      counts[DispatchKind::AdapterGemm] = 2 * k * adapted;
      counts[DispatchKind::RouterGemm] = adapted;
      break;
    case ExecMode::NaivePerBlock:
      counts[DispatchKind::AdapterGemm] = 2 * k * adapted;
      counts[DispatchKind::RouterGemm] = c.n_blocks;
      break;
    case ExecMode::PreGatedNaive:
      counts[DispatchKind::AdapterGemm] = 2 * k * adapted;
      counts[DispatchKind::RouterGemm] = 1;
      break;
    case ExecMode::SimpleMerge:
      counts[DispatchKind::MergeGemm] = 2 * adapted;
      counts[DispatchKind::RouterGemm] = 1;
      break;
    case ExecMode::FusedSwitch:
      counts[DispatchKind::SgmmDispatch] = 1;
      counts[DispatchKind::RouterGemm] = 1;
      break;
  }
  return counts;
}

KindCounts flops_per_token(const ModelConfig& c, ExecMode mode) {
  const std::int64_t k = c.top_k;
  const std::int64_t r = c.rank;
  const std::int64_t n = c.n_experts;
  std::int64_t backbone = 0, adapter = 0, per_site_router = 0, merge = 0;
  for (const auto& s : site_dims(c)) {
    backbone += gemm_flops(s.d_out, 1, s.d_in);
    if (!s.adapted) continue;
    adapter += k * (gemm_flops(r, 1, s.d_in) + gemm_flops(s.d_out, 1, r));
    per_site_router += gemm_flops(n, 1, s.d_in);
    merge += gemm_flops(s.d_out, s.d_in, k * r);
  }
  const std::int64_t block_router = gemm_flops(n, 1, c.d_model);
  KindCounts flops{{DispatchKind::BackboneGemm, backbone}};
  if (k == 0) return flops;
  switch (mode) {
    case ExecMode::BackboneOnly:
      break;
    case ExecMode::NaivePerSite:
      flops[DispatchKind::AdapterGemm] = adapter;
      flops[DispatchKind::RouterGemm] = per_site_router;
      break;
    case ExecMode::NaivePerBlock:
      flops[DispatchKind::AdapterGemm] = adapter;
      flops[DispatchKind::RouterGemm] = c.n_blocks * block_router;
      break;
    case ExecMode::PreGatedNaive:
      flops[DispatchKind::AdapterGemm] = adapter;
      flops[DispatchKind::RouterGemm] = block_router;
      break;
    case ExecMode::SimpleMerge:
      flops[DispatchKind::MergeGemm] = 2 * merge;
      flops[DispatchKind::RouterGemm] = block_router;
      break;
    case ExecMode::FusedSwitch:
      flops[DispatchKind::SgmmDispatch] = 2 * merge;
      flops[DispatchKind::RouterGemm] = block_router;
      break;
  }
  return flops;
}

std::int64_t total(const KindCounts& counts) {
  std::int64_t t = 0;
  for (const auto& [kind, v] : counts) t += v;
  return t;
}

double estimate_latency(const KindCounts& counts, const KindCounts& flops, const CostParams& params) {
  params.validate();
  return static_cast<double>(total(counts)) * params.launch_overhead_us +
         static_cast<double>(total(flops)) / (params.throughput_gflops * 1e3);
}

double modeled_us(std::span<const DispatchEvent> events, const CostParams& params) {
  double us = 0.0;
  for (const auto& e : events) us += params.dispatch_us(e.flops);
  return us;
}

std::string VerifyResult::report() const {
  if (ok) return "ok (" + std::to_string(tokens_checked) + " tokens)";
  std::ostringstream os;
  os << "dispatch count mismatch:";
  for (const auto& m : mismatches) {
    os << "\n  " << to_string(m.kind) << ": expected " << m.expected << ", observed " << m.observed
       << " (first at token " << m.first_token << ")";
  }
  return os.str();
}

VerifyResult verify_counts(std::span<const DispatchEvent> events, const ModelConfig& config,
                           ExecMode mode) {
  const KindCounts expected = count_per_token(config, mode);
  std::map<int, KindCounts> per_token;
  for (const auto& e : events) {
    if (e.phase != Phase::Decode) continue;
    per_token[e.token_step][e.kind] += 1;
  }
  VerifyResult result;
  result.tokens_checked = static_cast<int>(per_token.size());
  for (DispatchKind kind : kAllKinds) {
    const auto it = expected.find(kind);
    const std::int64_t want = it == expected.end() ? 0 : it->second;
    for (const auto& [token, counts] : per_token) {
      const auto got_it = counts.find(kind);
      const std::int64_t got = got_it == counts.end() ? 0 : got_it->second;
      if (got != want) {
        result.ok = false;
        result.mismatches.push_back({kind, want, got, token});
        break;
      }
    }
  }
  return result;
}

const BreakdownRow* Breakdown::find(DispatchKind kind) const {
  for (const auto& r : rows)
    if (r.kind == kind) return &r;
  return nullptr;
}

Breakdown breakdown_report(std::span<const DispatchEvent> events, const CostParams& params) {
  Breakdown b;
  b.params = params;
  std::map<DispatchKind, BreakdownRow> rows;
  std::map<int, bool> tokens;
  for (const auto& e : events) {
    if (e.phase != Phase::Decode) continue;
    auto& row = rows[e.kind];
    row.kind = e.kind;
    row.count += 1;
    row.flops += e.flops;
    row.modeled_us += params.dispatch_us(e.flops);
    tokens[e.token_step] = true;
  }
  b.tokens = static_cast<int>(tokens.size());
  for (const auto& [kind, row] : rows) b.total_us += row.modeled_us;
  for (DispatchKind kind : kAllKinds) {
    auto it = rows.find(kind);
    if (it == rows.end()) continue;
    it->second.share = b.total_us > 0.0 ? it->second.modeled_us / b.total_us : 0.0;
    b.rows.push_back(it->second);
  }
  return b;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

nlohmann::json params_json(const CostParams& p) {
  return {{"launch_overhead_us", p.launch_overhead_us},
          {"throughput_gflops", p.throughput_gflops},
          {"injected_delay", p.injected_delay}};
}

}  // namespace

std::string breakdown_table(const Breakdown& b) {
  std::ostringstream os;
  if (b.rows.empty()) return "";
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %10s %14s %12s %8s\n", "kind", "count", "flops",
                "modeled_us", "share");
  os << line;
  for (const auto& r : b.rows) {
    std::snprintf(line, sizeof line, "%-14s %10lld %14lld %12.3f %7.2f%%\n",
                  std::string(to_string(r.kind)).c_str(), static_cast<long long>(r.count),
                  static_cast<long long>(r.flops), r.modeled_us, 100.0 * r.share);
    os << line;
  }
  std::snprintf(line, sizeof line, "%-14s %10s %14s %12.3f  (%d tokens, %.3f us/token)\n", "total",
                "", "", b.total_us, b.tokens, b.tokens > 0 ? b.total_us / b.tokens : 0.0);
  os << line;
  return os.str();
}

std::string breakdown_csv(const Breakdown& b) {
  std::ostringstream os;
  os << "kind,count,flops,modeled_us,share\n";
  for (const auto& r : b.rows) {
    os << to_string(r.kind) << ',' << r.count << ',' << r.flops << ',' << fmt("%.6f", r.modeled_us)
       << ',' << fmt("%.6f", r.share) << '\n';
  }
  return os.str();
}

std::string breakdown_json(const Breakdown& b) {
  nlohmann::json j;
  j["params"] = params_json(b.params);
  j["tokens"] = b.tokens;
  j["total_us"] = b.total_us;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : b.rows) {
    j["rows"].push_back({{"kind", to_string(r.kind)},
                         {"count", r.count},
                         {"flops", r.flops},
                         {"modeled_us", r.modeled_us},
                         {"share", r.share}});
  }
  return j.dump(2) + "\n";
}

namespace {

struct LogRow {
  int token_step;
  DispatchKind kind;
  std::int64_t count = 0;
  std::int64_t flops = 0;
  double modeled_us = 0.0;
};

std::vector<LogRow> aggregate(std::span<const DispatchEvent> events, const CostParams& params) {
  std::map<std::pair<int, int>, LogRow> rows;
  for (const auto& e : events) {
    if (e.phase != Phase::Decode) continue;
    auto& row = rows[{e.token_step, static_cast<int>(e.kind)}];
    row.token_step = e.token_step;
    row.kind = e.kind;
    row.count += 1;
    row.flops += e.flops;
    row.modeled_us += params.dispatch_us(e.flops);
  }
  std::vector<LogRow> out;
  for (auto& [key, row] : rows) out.push_back(row);
  return out;
}

}  // namespace

std::string log_csv(std::span<const DispatchEvent> events, const CostParams& params) {
  std::ostringstream os;
  os << "token_step,kind,count,flops,modeled_us\n";
  for (const auto& r : aggregate(events, params)) {
    os << r.token_step << ',' << to_string(r.kind) << ',' << r.count << ',' << r.flops << ','
       << fmt("%.6f", r.modeled_us) << '\n';
  }
  return os.str();
}

std::string log_json(std::span<const DispatchEvent> events, const CostParams& params) {
  nlohmann::json j;
  j["params"] = params_json(params);
  j["rows"] = nlohmann::json::array();
  for (const auto& r : aggregate(events, params)) {
    j["rows"].push_back({{"token_step", r.token_step},
                         {"kind", to_string(r.kind)},
                         {"count", r.count},
                         {"flops", r.flops},
                         {"modeled_us", r.modeled_us}});
  }
  return j.dump(2) + "\n";
}

}  // namespace dynlora
