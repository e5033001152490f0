// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstring>

#include "dynlora/checks.hpp"
#include "dynlora/switching.hpp"
#include "oracles.hpp"

using namespace dynlora;

namespace {

Model test_model(std::uint64_t seed, Placement placement = Placement::AllLinear) {
  ModelConfig c;
  c.seed = seed;
  c.placement = placement;
  Model m = generate(c);
  randomize_adapters(m, seed + 100, 0.05);
  return m;
}

GatingDecision random_decision(const Model& m, std::mt19937_64& rng, int step = 0) {
  const Matrix x = oracle::random_matrix(m.routers[0].w_g.cols(), 1, rng);
  return gate(m.routers[0], x, m.config.top_k, step);
}

// scale * sum_j w_j up_j down_j with plain loops.
Matrix delta_oracle(const AdapterSite& s, const GatingDecision& d, double scale) {
  Matrix sum = Matrix::Zero(s.d_out(), s.d_in());
  for (std::size_t j = 0; j < d.indices.size(); ++j) {
    const auto& e = s.experts[d.indices[j]];
    sum += scale * d.weights[j] * oracle::matmul(e.up, e.down);
  }
  return sum;
}

bool same_weights(const Model& a, const Model& b) {
  for (std::size_t i = 0; i < a.blocks.size(); ++i)
    for (int k = 0; k < kSitesPerBlock; ++k) {
      const Matrix& x = a.blocks[i].sites[k].weight;
      const Matrix& y = b.blocks[i].sites[k].weight;
      if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
    }
  return true;
}

}  // namespace

TEST_CASE("concatenated slices reproduce the per-expert sum") {
  const Model m = test_model(1);
  std::mt19937_64 rng(1);
  const double scale = m.config.lora_scale();
  for (int id : m.adapted_site_ids()) {
    const auto d = random_decision(m, rng);
    const SiteSlices s = build_concat(m.site(id), d, scale);
    CHECK(s.rank() == m.config.top_k * m.config.rank);
    const Matrix expect = delta_oracle(m.site(id), d, scale);
    CHECK(max_relative_difference(oracle::matmul(s.up, s.down), expect) < 1e-13);
  }
}

TEST_CASE("fused slices equal delta(cur) - delta(prev)") {
  const Model m = test_model(2);
  std::mt19937_64 rng(2);
  const double scale = m.config.lora_scale();
  const auto prev = random_decision(m, rng);
  auto cur = random_decision(m, rng);
  while (cur.same_selection(prev)) cur = random_decision(m, rng);
  for (int id : m.adapted_site_ids()) {
    const SiteSlices s = build_fused(m.site(id), prev, cur, scale);
    CHECK(s.rank() == 2 * m.config.top_k * m.config.rank);
    const Matrix expect = delta_oracle(m.site(id), cur, scale) - delta_oracle(m.site(id), prev, scale);
    CHECK(max_relative_difference(oracle::matmul(s.up, s.down), expect) < 1e-12);
  }
}

TEST_CASE("fused slices without a previous decision are the concat slices") {
  const Model m = test_model(3);
  std::mt19937_64 rng(3);
  const auto d = random_decision(m, rng);
  const auto a = build_fused(m.site(0), std::nullopt, d, 2.0);
  const auto b = build_concat(m.site(0), d, 2.0);
  CHECK(a.down == b.down);
  CHECK(a.up == b.up);
}

TEST_CASE("identical consecutive decisions elide the switch") {
  const Model m = test_model(4);
  std::mt19937_64 rng(4);
  const auto d = random_decision(m, rng);
  const SiteSlices s = build_fused(m.site(3), d, d, 2.0);
  CHECK(s.rank() == 0);
  CHECK(s.down.cols() == m.site(3).d_in());
  CHECK(s.up.rows() == m.site(3).d_out());
}

TEST_CASE("the previous slice negates only its down factor") {
  const Model m = test_model(5);
  std::mt19937_64 rng(5);
  const auto prev = random_decision(m, rng);
  auto cur = random_decision(m, rng);
  while (cur.same_selection(prev)) cur = random_decision(m, rng);
  const auto& site = m.site(0);
  const SiteSlices s = build_fused(site, prev, cur, 2.0);
  const Index r = m.config.rank;
  const auto& e0 = site.experts[prev.indices[0]];
  CHECK(s.up.leftCols(r) == e0.up);
  CHECK(s.down.topRows(r) == -(2.0 * prev.weights[0] * e0.down));
  const SiteSlices literal = build_fused(site, prev, cur, 2.0, PrevSliceSign::BothFactors);
  CHECK(literal.up.leftCols(r) == -e0.up);
}

TEST_CASE("sign regression: literal double negation fails, corrected passes") {
  const Model m = test_model(6);
  std::mt19937_64 rng(6);
  std::vector<GatingDecision> ds;
  while (ds.size() < 6) {
    auto d = random_decision(m, rng, static_cast<int>(ds.size()));
    if (!ds.empty() && ds.back().same_selection(d)) continue;
    ds.push_back(d);
  }
  const double literal = switch_roundtrip_error(m, ds, PrevSliceSign::BothFactors);
  const double corrected = switch_roundtrip_error(m, ds, PrevSliceSign::DownOnly);
  CHECK(literal > 1e-3);
  CHECK(corrected <= 1e-9);
}

TEST_CASE("merge then unmerge is bit-exact") {
  Model m = test_model(7);
  const Model before = m;
  std::mt19937_64 rng(7);
  const auto d = random_decision(m, rng);
  for (int id : m.adapted_site_ids()) {
    const auto s = build_concat(m.site(id), d, m.config.lora_scale());
    merge(m.site(id), s);
  }
  CHECK_FALSE(same_weights(m, before));
  for (int id : m.adapted_site_ids()) {
    const auto s = build_concat(m.site(id), d, m.config.lora_scale());
    unmerge(m.site(id), s);
  }
  CHECK(same_weights(m, before));
}

TEST_CASE("add_fused packs the same data as add(build_fused)") {
  const Model m = test_model(8);
  std::mt19937_64 rng(8);
  const auto prev = random_decision(m, rng);
  const auto cur = random_decision(m, rng);
  FusedDelta a, b;
  for (int id : m.adapted_site_ids()) {
    a.add(id, build_fused(m.site(id), prev, cur, 2.0));
    add_fused(b, m.site(id), prev, cur, 2.0);
  }
  CHECK(a.down_buf == b.down_buf);
  CHECK(a.up_buf == b.up_buf);
  CHECK(a.segments.size() == b.segments.size());
  b.clear();
  CHECK(b.segments.empty());
  CHECK(b.down_buf.empty());
}

TEST_CASE("sgmm equals per-site accumulate for any tiling and worker count") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Model base = test_model(10 + seed, seed == 1 ? Placement::MlpOnly : Placement::AllLinear);
    std::mt19937_64 rng(seed);
    const auto prev = random_decision(base, rng);
    const auto cur = random_decision(base, rng);
    FusedDelta fused;
    Model expect = base;
    for (int id : base.adapted_site_ids()) {
      const auto s = build_fused(base.site(id), prev, cur, base.config.lora_scale());
      fused.add(id, s);
      accumulate<double>(expect.site(id).weight, s.up, s.down, Sign::Plus);
    }
    for (Index tile : {Index{64}, Index{7}, Index{200}}) {
      for (int workers : {1, 2, 3, 8}) {
        for (bool prefetch : {true, false}) {
          Model got = base;
          TileConfig t;
          t.rows = tile;
          t.cols = tile == 7 ? 5 : tile;
          t.workers = workers;
          t.prefetch = prefetch;
          sgmm(got.site_table(), fused, t);
          CHECK_MESSAGE(same_weights(got, expect), "tile " << tile << " workers " << workers << " prefetch " << prefetch);
        }
      }
    }
  }
}

TEST_CASE("sgmm records exactly one dispatch with the summed flops") {
  Model m = test_model(20);
  std::mt19937_64 rng(20);
  const auto d = random_decision(m, rng);
  FusedDelta fused;
  std::int64_t flops = 0;
  for (int id : m.adapted_site_ids()) {
    fused.add(id, build_concat(m.site(id), d, 2.0));
    flops += 2 * m.site(id).d_out() * m.site(id).d_in() * m.config.top_k * m.config.rank;
  }
  Profiler p;
  sgmm(m.site_table(), fused, TileConfig{}, &p);
  REQUIRE(p.log().size() == 1);
  CHECK(p.log()[0].kind == DispatchKind::SgmmDispatch);
  CHECK(p.log()[0].flops == flops);
  CHECK(fused.flops() == flops);

  Profiler q;
  sgmm(m.site_table(), FusedDelta{}, TileConfig{}, &q);
  REQUIRE(q.log().size() == 1);
  CHECK(q.log()[0].flops == 0);
}

TEST_CASE("sgmm rejects bad segment tables") {
  Model m = test_model(21);
  std::mt19937_64 rng(21);
  const auto d = random_decision(m, rng);
  const auto s0 = build_concat(m.site(0), d, 2.0);
  {
    FusedDelta f;
    f.add(0, s0);
    f.add(0, s0);
    CHECK_THROWS_WITH_AS(sgmm(m.site_table(), f, TileConfig{}), doctest::Contains("overlapping"), ShapeError);
  }
  {
    FusedDelta f;
    f.add(0, s0);
    f.add(1, build_concat(m.site(1), d, 2.0));
    f.segments[1].down_offset = 0;
    CHECK_THROWS_WITH_AS(sgmm(m.site_table(), f, TileConfig{}), doctest::Contains("overlapping"), ShapeError);
  }
  {
    FusedDelta f;
    f.add(2, s0);  // site 2 is the gate (d_hidden x d_model); s0 is d_model x d_model
    CHECK_THROWS_AS(sgmm(m.site_table(), f, TileConfig{}), ShapeError);
  }
  {
    FusedDelta f;
    f.add(999, s0);
    CHECK_THROWS_AS(sgmm(m.site_table(), f, TileConfig{}), ShapeError);
  }
  {
    FusedDelta f;
    f.add(0, s0);
    f.down_buf.pop_back();
    CHECK_THROWS_AS(sgmm(m.site_table(), f, TileConfig{}), ShapeError);
  }
  TileConfig bad;
  bad.workers = 0;
  CHECK_THROWS_AS(sgmm(m.site_table(), FusedDelta{}, bad), ConfigError);
}

TEST_CASE("switch_all walks the decisions and restore returns to pristine") {
  Model m = test_model(30);
  enable_drift_audit(m);
  std::mt19937_64 rng(30);
  SwitchState st;
  Profiler p;
  for (int t = 0; t < 50; ++t) {
    const auto d = random_decision(m, rng, t);
    switch_all(m, st, d, &p);
    CHECK(st.is_merged());
    // live weights hold backbone + delta(d)
    if (t % 10 == 9) {
      for (int id : m.adapted_site_ids()) {
        const Matrix expect = *m.site(id).pristine + delta_oracle(m.site(id), d, m.config.lora_scale());
        CHECK(relative_frobenius(m.site(id).weight, expect) < 1e-10);
      }
    }
  }
  CHECK(p.log().size() == 50);
  restore(m, st, &p);
  CHECK_FALSE(st.is_merged());
  CHECK(p.log().size() == 51);
  CHECK(max_pristine_drift(m) < 1e-10);
  restore(m, st, &p);  // nothing merged: no dispatch
  CHECK(p.log().size() == 51);
}

TEST_CASE("a repeated decision costs one empty dispatch and leaves weights alone") {
  Model m = test_model(31);
  std::mt19937_64 rng(31);
  const auto d = random_decision(m, rng);
  SwitchState st;
  Profiler p;
  switch_all(m, st, d, &p);
  const Model after_first = m;
  switch_all(m, st, d, &p);
  CHECK(same_weights(m, after_first));
  REQUIRE(p.log().size() == 2);
  CHECK(p.log()[1].flops == 0);
}

TEST_CASE("sgmm determinism across seeds with 20 segments") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Model base = test_model(40 + seed);
    std::mt19937_64 rng(seed);
    FusedDelta fused;
    const auto prev = random_decision(base, rng);
    const auto cur = random_decision(base, rng);
    for (int id : base.adapted_site_ids()) add_fused(fused, base.site(id), prev, cur, 2.0);
    REQUIRE(fused.segments.size() == 20);
    std::vector<Model> results;
    for (int w : {1, 2, 8}) {
      Model copy = base;
      TileConfig t;
      t.workers = w;
      sgmm(copy.site_table(), fused, t);
      results.push_back(std::move(copy));
    }
    CHECK(same_weights(results[0], results[1]));
    CHECK(same_weights(results[0], results[2]));
  }
}
