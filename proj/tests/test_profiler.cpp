// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <chrono>
#include <nlohmann/json.hpp>

#include "dynlora/engine.hpp"
#include "dynlora/profiler.hpp"

using namespace dynlora;

namespace {

constexpr std::array<ExecMode, 5> kModes = {ExecMode::NaivePerSite, ExecMode::NaivePerBlock,
                                            ExecMode::PreGatedNaive, ExecMode::SimpleMerge,
                                            ExecMode::FusedSwitch};

std::int64_t at(const KindCounts& c, DispatchKind k) {
  auto it = c.find(k);
  return it == c.end() ? 0 : it->second;
}

std::vector<DispatchEvent> decode_log(ModelConfig c, ExecMode mode, int n_new, int prompt_len = 3) {
  c.routing = routing_for(mode);
  Model m = generate(c);
  randomize_adapters(m, 5, 0.05);
  DecodeSession s(m, mode);
  std::vector<int> prompt;
  for (int i = 0; i < prompt_len; ++i) prompt.push_back((7 * i + 1) % c.vocab);
  s.generate(prompt, n_new);
  s.restore();
  return s.profiler().log();
}

}  // namespace

TEST_CASE("default model counts") {
  const ModelConfig c;
  CHECK(total(count_per_token(c, ExecMode::FusedSwitch)) == 22);
  CHECK(total(count_per_token(c, ExecMode::NaivePerSite)) == 120);
  CHECK(total(count_per_token(c, ExecMode::NaivePerBlock)) == 104);
  CHECK(total(count_per_token(c, ExecMode::PreGatedNaive)) == 101);
  CHECK(total(count_per_token(c, ExecMode::SimpleMerge)) == 61);
  CHECK(total(count_per_token(c, ExecMode::BackboneOnly)) == 20);
}

TEST_CASE("count formulas across placements and k") {
  for (auto placement : {Placement::AllLinear, Placement::MlpOnly}) {
    for (int k : {1, 2, 3}) {
      for (int nb : {1, 4}) {
        ModelConfig c;
        c.placement = placement;
        c.top_k = k;
        c.n_blocks = nb;
        const std::int64_t S = c.adapted_sites();
        const std::int64_t B = 5 * nb;
        CHECK(S == (placement == Placement::AllLinear ? 5 : 3) * nb);
        auto naive = count_per_token(c, ExecMode::NaivePerSite);
        CHECK(at(naive, DispatchKind::BackboneGemm) == B);
        CHECK(at(naive, DispatchKind::AdapterGemm) == 2 * k * S);
        CHECK(at(naive, DispatchKind::RouterGemm) == S);
        CHECK(at(count_per_token(c, ExecMode::NaivePerBlock), DispatchKind::RouterGemm) == nb);
        CHECK(at(count_per_token(c, ExecMode::PreGatedNaive), DispatchKind::RouterGemm) == 1);
        auto merge = count_per_token(c, ExecMode::SimpleMerge);
        CHECK(at(merge, DispatchKind::MergeGemm) == 2 * S);
        CHECK(at(merge, DispatchKind::AdapterGemm) == 0);
        auto fused = count_per_token(c, ExecMode::FusedSwitch);
        CHECK(total(fused) == B + 2);
        CHECK(at(fused, DispatchKind::SgmmDispatch) == 1);
      }
    }
  }
}

TEST_CASE("k = 0 degenerates to the backbone") {
  ModelConfig c;
  c.top_k = 0;
  for (ExecMode m : kModes) {
    const auto counts = count_per_token(c, m);
    CHECK(total(counts) == 20);
    CHECK(at(counts, DispatchKind::BackboneGemm) == 20);
  }
}

TEST_CASE("latency model") {
  CostParams p;
  p.launch_overhead_us = 20.0;
  p.throughput_gflops = 1000.0;
  CHECK(p.dispatch_us(0) == 20.0);
  CHECK(p.dispatch_us(2'000'000) == doctest::Approx(22.0));
  const ModelConfig c;
  for (ExecMode m : kModes) {
    const double lat = estimate_latency(count_per_token(c, m), flops_per_token(c, m), p);
    CHECK(lat >= 20.0 * total(count_per_token(c, m)));
    CostParams cheaper = p;
    cheaper.launch_overhead_us = 10.0;
    CHECK(estimate_latency(count_per_token(c, m), flops_per_token(c, m), cheaper) < lat);
  }
  const auto fused = estimate_latency(count_per_token(c, ExecMode::FusedSwitch),
                                      flops_per_token(c, ExecMode::FusedSwitch), p);
  const auto naive = estimate_latency(count_per_token(c, ExecMode::NaivePerSite),
                                      flops_per_token(c, ExecMode::NaivePerSite), p);
  CHECK(naive / fused > 2.0);
  CostParams bad;
  bad.throughput_gflops = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = CostParams{};
  bad.launch_overhead_us = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("recorded decode counts match the closed form") {
  for (auto placement : {Placement::AllLinear, Placement::MlpOnly}) {
    for (int k : {1, 2}) {
      for (int nb : {1, 4}) {
        ModelConfig c;
        c.placement = placement;
        c.top_k = k;
        c.n_blocks = nb;
        for (ExecMode m : kModes) {
          const auto log = decode_log(c, m, 6);
          const auto v = verify_counts(log, c, m);
          CHECK_MESSAGE(v.ok, to_string(m) << ": " << v.report());
          CHECK(v.tokens_checked == 6);
        }
      }
    }
  }
}

TEST_CASE("verify_counts catches a dropped unmerge") {
  const ModelConfig c;
  auto log = decode_log(c, ExecMode::SimpleMerge, 4);
  REQUIRE(verify_counts(log, c, ExecMode::SimpleMerge).ok);
  // Drop the unmerges of decode token 2: the second S merge events of that token.
  const int S = c.adapted_sites();
  int seen = 0;
  std::erase_if(log, [&](const DispatchEvent& e) {
    if (e.phase != Phase::Decode || e.token_step != 2 || e.kind != DispatchKind::MergeGemm) return false;
    return ++seen > S;
  });
  const auto v = verify_counts(log, c, ExecMode::SimpleMerge);
  CHECK_FALSE(v.ok);
  REQUIRE(v.mismatches.size() == 1);
  CHECK(v.mismatches[0].kind == DispatchKind::MergeGemm);
  CHECK(v.mismatches[0].expected - v.mismatches[0].observed == S);
  CHECK(v.mismatches[0].first_token == 2);
  CHECK(v.report().find("MergeGemm") != std::string::npos);
}

TEST_CASE("fused decode logs exactly one sgmm per token") {
  const ModelConfig c;
  const auto log = decode_log(c, ExecMode::FusedSwitch, 200, 1);
  int sgmm = 0;
  for (const auto& e : log)
    if (e.kind == DispatchKind::SgmmDispatch && e.phase == Phase::Decode) ++sgmm;
  CHECK(sgmm == 200);
}

TEST_CASE("prefill and restore events are excluded from the breakdown") {
  const ModelConfig c;
  const auto log = decode_log(c, ExecMode::FusedSwitch, 5, 4);
  const Breakdown b = breakdown_report(log, CostParams{});
  CHECK(b.tokens == 5);
  const auto* sg = b.find(DispatchKind::SgmmDispatch);
  REQUIRE(sg != nullptr);
  CHECK(sg->count == 5);
  CHECK(b.find(DispatchKind::AdapterGemm) == nullptr);
  double share = 0.0, us = 0.0;
  for (const auto& r : b.rows) {
    share += r.share;
    us += r.modeled_us;
  }
  CHECK(share == doctest::Approx(1.0));
  CHECK(us == doctest::Approx(b.total_us));
  std::vector<DispatchEvent> decode_only;
  for (const auto& e : log)
    if (e.phase == Phase::Decode) decode_only.push_back(e);
  CHECK(modeled_us(decode_only, CostParams{}) == doctest::Approx(b.total_us));
}

TEST_CASE("breakdown csv and json") {
  const ModelConfig c;
  const auto log = decode_log(c, ExecMode::PreGatedNaive, 3);
  const Breakdown b = breakdown_report(log, CostParams{});
  const std::string csv = breakdown_csv(b);
  CHECK(csv.rfind("kind,count,flops,modeled_us,share\n", 0) == 0);
  CHECK(csv.find("AdapterGemm,") != std::string::npos);
  const auto j = nlohmann::json::parse(breakdown_json(b));
  CHECK(j["tokens"] == 3);
  CHECK(j["rows"].is_array());
  CHECK(j["params"]["launch_overhead_us"] == 20.0);
  CHECK(breakdown_table(b).find("AdapterGemm") != std::string::npos);

  const std::string lc = log_csv(log, CostParams{});
  CHECK(lc.rfind("token_step,kind,count,flops,modeled_us\n", 0) == 0);
  const auto lj = nlohmann::json::parse(log_json(log, CostParams{}));
  CHECK(lj["params"]["throughput_gflops"] == 1000.0);
  std::int64_t n = 0;
  for (const auto& row : lj["rows"]) n += row["count"].get<std::int64_t>();
  std::int64_t decode_events = 0;
  for (const auto& e : log) decode_events += e.phase == Phase::Decode;
  CHECK(n == decode_events);
}

TEST_CASE("disabled profiler records nothing") {
  Profiler p;
  p.set_enabled(false);
  p.record(DispatchKind::BackboneGemm, 10);
  CHECK(p.log().empty());
}

TEST_CASE("injected delay spins for the launch overhead") {
  CostParams params;
  params.launch_overhead_us = 500.0;
  params.injected_delay = true;
  Profiler p(params);
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 20; ++i) p.record(DispatchKind::BackboneGemm, 1'000'000'000);
  const double us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
  CHECK(us >= 20 * 500.0);
  CHECK(p.log().size() == 20);
}
