// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include "dynlora/checks.hpp"

#include <chrono>
#include <cstring>
#include <random>
#include <sstream>

namespace dynlora {

namespace {

constexpr double kLogitTolerance = 1e-9;
constexpr double kRoundtripTolerance = 1e-9;
constexpr double kCheckUpStd = 0.05;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

bool has_nonzero_adapters(const Model& model) {
  for (int id : model.adapted_site_ids())
    for (const auto& e : model.site(id).experts)
      if (!e.up.isZero(0.0)) return true;
  return false;
}

std::vector<GatingDecision> random_decisions(const Model& model, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  const Router& router = model.routers.at(0);
  std::vector<GatingDecision> out;
  while (static_cast<int>(out.size()) < n) {
    Matrix x(router.w_g.cols(), 1);
    for (Index i = 0; i < x.rows(); ++i) x(i, 0) = nd(rng);
    GatingDecision d = gate(router, x, model.config.top_k, static_cast<int>(out.size()));
    if (!out.empty() && out.back().same_selection(d)) continue;
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<std::uint8_t> weight_bytes(const Model& model) {
  std::vector<std::uint8_t> bytes;
  for (const auto& b : model.blocks) {
    for (const auto& s : b.sites) {
      const auto* p = reinterpret_cast<const std::uint8_t*>(s.weight.data());
      bytes.insert(bytes.end(), p, p + s.weight.size() * sizeof(double));
    }
  }
  return bytes;
}

}  // namespace

SuiteResult equivalence_suite(const Model& model, const CheckOptions& opt) {
  SuiteResult r{"equivalence", true, ""};
  const ExecMode modes[] = {ExecMode::PreGatedNaive, ExecMode::SimpleMerge, ExecMode::FusedSwitch};
  std::vector<Model> copies(3, model);
  SessionOptions so;
  so.tile = opt.tile;
  so.profile = false;
  std::vector<std::unique_ptr<DecodeSession>> sessions;
  for (int m = 0; m < 3; ++m) sessions.push_back(std::make_unique<DecodeSession>(copies[m], modes[m], so));

  const auto prompts = make_prompts(opt.n_queries, opt.prompt_len, model.config.vocab, opt.seed);
  double worst = 0.0;
  for (std::size_t q = 0; q < prompts.size() && r.passed; ++q) {
    const auto& p = prompts[q];
    if (p.size() > 1) {
      for (auto& s : sessions) s->prefill(std::span(p).first(p.size() - 1));
    }
    int next[3] = {p.back(), p.back(), p.back()};
    for (int step = 0; step < opt.n_new; ++step) {
      Matrix logits[3];
      for (int m = 0; m < 3; ++m) {
        logits[m] = sessions[m]->decode_token(next[m]);
        next[m] = argmax(logits[m]);
      }
      for (int m = 1; m < 3; ++m) {
        worst = std::max(worst, max_relative_difference(logits[m], logits[0]));
        if (next[m] != next[0]) {
          r.passed = false;
          r.detail = std::string(to_string(modes[m])) + " diverged at query " + std::to_string(q) +
                     " step " + std::to_string(step);
        }
      }
      if (!r.passed) break;
    }
  }
  if (r.passed && worst > kLogitTolerance) {
    r.passed = false;
    r.detail = "max relative logit difference " + fmt(worst);
  }
  if (r.passed) {
    r.detail = std::to_string(opt.n_queries) + "x" + std::to_string(opt.n_new) +
               " tokens identical; max relative logit difference " + fmt(worst);
  }
  return r;
}

SuiteResult roundtrip_suite(const Model& model, const CheckOptions& opt) {
  SuiteResult r{"roundtrip", true, ""};
  Model copy = model;
  enable_drift_audit(copy);
  {
    SessionOptions so;
    so.tile = opt.tile;
    so.profile = false;
    DecodeSession session(copy, ExecMode::FusedSwitch, so);
    const auto prompt = make_prompts(1, 1, model.config.vocab, opt.seed).front();
    session.generate(prompt, opt.roundtrip_steps);
    session.restore();
  }
  const double drift = max_pristine_drift(copy);

  Model single = model;
  const auto decision = random_decisions(model, 1, opt.seed).front();
  const double scale = model.config.lora_scale();
  bool exact = true;
  for (int id : single.adapted_site_ids()) {
    AdapterSite& site = single.site(id);
    const Matrix before = site.weight;
    const SiteSlices slices = build_concat(site, decision, scale);
    merge(site, slices);
    unmerge(site, slices);
    exact = exact && std::memcmp(before.data(), site.weight.data(), before.size() * sizeof(double)) == 0;
  }
  r.passed = drift <= kRoundtripTolerance && exact;
  r.detail = std::to_string(opt.roundtrip_steps) + "-step drift " + fmt(drift) +
             (exact ? "; single merge+unmerge bit-exact" : "; single merge+unmerge NOT bit-exact");
  return r;
}

double switch_roundtrip_error(const Model& model, std::span<const GatingDecision> decisions,
                              PrevSliceSign sign) {
  Model copy = model;
  enable_drift_audit(copy);
  const double scale = copy.config.lora_scale();
  const auto table = copy.site_table();
  SwitchState state;
  for (const auto& d : decisions) {
    FusedDelta fused;
    for (int id : copy.adapted_site_ids()) fused.add(id, build_fused(copy.site(id), state.last_decision, d, scale, sign));
    sgmm(table, fused, TileConfig{}, nullptr);
    state.last_decision = d;
  }
  restore(copy, state, nullptr);
  return max_pristine_drift(copy);
}

SuiteResult sign_regression_suite(const Model& model, const CheckOptions& opt) {
  SuiteResult r{"sign-regression", true, ""};
  const auto decisions = random_decisions(model, 8, opt.seed + 1);
  const double literal = switch_roundtrip_error(model, decisions, PrevSliceSign::BothFactors);
  const double corrected = switch_roundtrip_error(model, decisions, PrevSliceSign::DownOnly);
  r.passed = literal > kRoundtripTolerance && corrected <= kRoundtripTolerance;
  r.detail = "both-factors negated drift " + fmt(literal) + " (must fail); down-only drift " + fmt(corrected);
  return r;
}

SuiteResult sgmm_determinism_suite(const Model& model, const CheckOptions& opt) {
  SuiteResult r{"sgmm-determinism", true, ""};
  const double scale = model.config.lora_scale();
  const auto decisions = random_decisions(model, 2, opt.seed + 2);
  FusedDelta fused;
  for (int id : model.adapted_site_ids()) fused.add(id, build_fused(model.site(id), decisions[0], decisions[1], scale));

  std::vector<std::uint8_t> reference;
  for (int workers : {1, 2, 8}) {
    for (bool prefetch : {true, false}) {
      Model copy = model;
      TileConfig tile = opt.tile;
      tile.workers = workers;
      tile.prefetch = prefetch;
      sgmm(copy.site_table(), fused, tile, nullptr);
      auto bytes = weight_bytes(copy);
      if (reference.empty()) {
        reference = std::move(bytes);
      } else if (bytes != reference) {
        r.passed = false;
        r.detail = "weights differ with workers=" + std::to_string(workers) +
                   " prefetch=" + (prefetch ? "on" : "off");
        return r;
      }
    }
  }
  r.detail = std::to_string(fused.segments.size()) + " segments; identical bytes for workers 1/2/8, prefetch on/off";
  return r;
}

std::vector<SuiteResult> run_checks(const Model& model, const CheckOptions& opt) {
  Model m = model.config.routing == RoutingPolicy::PreGated ? model : rerouted(model, RoutingPolicy::PreGated);
  if (!has_nonzero_adapters(m)) randomize_adapters(m, opt.seed, kCheckUpStd);
  return {equivalence_suite(m, opt), roundtrip_suite(m, opt), sign_regression_suite(m, opt),
          sgmm_determinism_suite(m, opt)};
}

std::vector<BenchRow> run_bench(const Model& model, std::span<const ExecMode> modes, const RunConfig& run) {
  run.validate();
  std::vector<ExecMode> order{ExecMode::BackboneOnly};
  for (ExecMode m : modes)
    if (m != ExecMode::BackboneOnly) order.push_back(m);

  const auto prompts = make_prompts(run.n_queries, run.prompt_len, model.config.vocab, run.prompt_seed);
  std::vector<BenchRow> rows;
  for (ExecMode mode : order) {
    Model copy = mode == ExecMode::BackboneOnly ? model : rerouted(model, routing_for(mode));
    SessionOptions so;
    so.cost = run.cost;
    so.tile = run.tile;
    DecodeSession session(copy, mode, so);
    double wall_us = 0.0;
    for (const auto& p : prompts) {
      if (p.size() > 1) session.prefill(std::span(p).first(p.size() - 1));
      int next = p.back();
      const auto t0 = std::chrono::steady_clock::now();
      for (int i = 0; i < run.n_new; ++i) next = argmax(session.decode_token(next));
      wall_us += std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    }
    session.restore();
    const auto& log = session.profiler().log();
    std::vector<DispatchEvent> decode;
    for (const auto& e : log)
      if (e.phase == Phase::Decode) decode.push_back(e);
    BenchRow row;
    row.mode = mode;
    row.tokens = session.decode_steps();
    row.dispatches_per_token = static_cast<double>(decode.size()) / row.tokens;
    row.modeled_us_per_token = modeled_us(decode, run.cost) / row.tokens;
    row.wall_us_per_token = wall_us / row.tokens;
    row.counts_ok = mode == ExecMode::BackboneOnly || verify_counts(log, copy.config, mode).ok;
    rows.push_back(row);
  }
  const BenchRow& base = rows.front();
  for (auto& row : rows) {
    row.modeled_overhead_pct = 100.0 * (row.modeled_us_per_token / base.modeled_us_per_token - 1.0);
    row.wall_overhead_pct = 100.0 * (row.wall_us_per_token / base.wall_us_per_token - 1.0);
  }
  return rows;
}

}  // namespace dynlora
