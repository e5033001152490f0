// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dynlora/model.hpp"
#include "oracles.hpp"

using namespace dynlora;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_blocks = 2;
  c.d_model = 8;
  c.d_hidden = 12;
  c.vocab = 20;
  c.n_experts = 3;
  c.rank = 2;
  c.alpha = 4.0;
  c.top_k = 2;
  c.seed = 5;
  return c;
}

std::string format_error(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config validation lists every bad field") {
  ModelConfig c;
  c.n_blocks = 0;
  c.top_k = 9;
  c.alpha = -1;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("n_blocks") != std::string::npos);
    CHECK(msg.find("top_k") != std::string::npos);
    CHECK(msg.find("alpha") != std::string::npos);
  }
  CHECK_NOTHROW(ModelConfig{}.validate());
}

TEST_CASE("site counts per placement") {
  ModelConfig c;
  CHECK(c.total_sites() == 20);
  CHECK(c.adapted_sites() == 20);
  c.placement = Placement::MlpOnly;
  CHECK(c.adapted_sites() == 12);
  const Model m = generate(c);
  CHECK(m.adapted_site_ids().size() == 12);
  CHECK(m.first_adapted_site_id() == static_cast<int>(SiteKind::Gate));
  for (const auto& b : m.blocks) {
    CHECK_FALSE(b.site(SiteKind::MixIn).adapted);
    CHECK(b.site(SiteKind::MixIn).experts.empty());
    CHECK(b.site(SiteKind::Down).adapted);
  }
}

TEST_CASE("generation is a pure function of the seed") {
  const ModelConfig c = small_config();
  CHECK(serialize(generate(c)) == serialize(generate(c)));
  ModelConfig other = c;
  other.seed = 6;
  CHECK(serialize(generate(c)) != serialize(generate(other)));
}

TEST_CASE("generated shapes, zero up factors and router count") {
  for (auto routing : {RoutingPolicy::PerSite, RoutingPolicy::PerBlock, RoutingPolicy::PreGated}) {
    ModelConfig c = small_config();
    c.routing = routing;
    const Model m = generate(c);
    CHECK_NOTHROW(m.check_shapes());
    const std::size_t expected = routing == RoutingPolicy::PerSite ? 10u : routing == RoutingPolicy::PerBlock ? 2u : 1u;
    CHECK(m.routers.size() == expected);
    for (int id : m.adapted_site_ids()) {
      const auto& s = m.site(id);
      CHECK(s.experts.size() == 3);
      for (const auto& e : s.experts) {
        CHECK(e.up.isZero(0.0));
        CHECK(e.down.rows() == 2);
        CHECK(e.down.cols() == s.d_in());
        CHECK(e.up.rows() == s.d_out());
      }
    }
  }
}

TEST_CASE("initial scales follow 1/sqrt(fan_in)") {
  ModelConfig c;
  c.seed = 3;
  const Model m = generate(c);
  double sum2 = 0.0;
  Index n = 0;
  for (int id : m.adapted_site_ids()) {
    for (const auto& e : m.site(id).experts) {
      sum2 += e.down.squaredNorm() * e.down.cols();
      n += e.down.size();
    }
  }
  CHECK(std::sqrt(sum2 / n) == doctest::Approx(1.0).epsilon(0.02));
  const auto& w = m.blocks[0].site(SiteKind::Up).weight;
  CHECK(std::sqrt(w.squaredNorm() / w.size()) * std::sqrt(64.0) == doctest::Approx(1.0).epsilon(0.05));
  const auto& g = m.routers[0].w_g;
  CHECK(std::sqrt(g.squaredNorm() / g.size()) * std::sqrt(64.0) == doctest::Approx(1.0).epsilon(0.2));
}

TEST_CASE("serialize round trip is bit-exact, including after edits") {
  Model m = generate(small_config());
  randomize_adapters(m, 4, 0.3);
  m.embedding(0, 0) = -0.0;
  const auto bytes = serialize(m);
  const Model back = deserialize(bytes);
  CHECK(back.config == m.config);
  CHECK(serialize(back) == bytes);
  CHECK(std::signbit(back.embedding(0, 0)));
}

TEST_CASE("file layout starts with magic, version and config") {
  const auto bytes = serialize(generate(small_config()));
  REQUIRE(bytes.size() > 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "LSWM");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[8] == 2);  // n_blocks
  CHECK(bytes[12] == 8);  // d_model
}

TEST_CASE("corrupt files are rejected with the offset") {
  const auto good = serialize(generate(small_config()));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(format_error(bad_magic).find("bad magic") != std::string::npos);

  auto bad_version = good;
  bad_version[4] = 2;
  CHECK(format_error(bad_version).find("version") != std::string::npos);

  for (std::size_t cut : {std::size_t{2}, std::size_t{7}, std::size_t{30}, good.size() / 2, good.size() - 1}) {
    const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<long>(cut));
    const std::string msg = format_error(truncated);
    CHECK_MESSAGE(!msg.empty(), "cut at " << cut);
  }
  const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<long>(good.size() / 2));
  CHECK(format_error(truncated).find("truncated model file at offset") != std::string::npos);

  auto trailing = good;
  trailing.push_back(0);
  CHECK(format_error(trailing).find("trailing bytes") != std::string::npos);
}

TEST_CASE("tensor header mismatch names the tensor") {
  auto bytes = serialize(generate(small_config()));
  // The embedding header follows magic, version, 9 u32 config fields, alpha and seed.
  const std::size_t header = 4 + 4 + 9 * 4 + 8 + 8;
  bytes[header] = 99;
  const std::string msg = format_error(bytes);
  CHECK(msg.find("tensor 'embedding'") != std::string::npos);
  CHECK(msg.find("offset " + std::to_string(header)) != std::string::npos);
}

TEST_CASE("save and load through the filesystem") {
  const auto dir = std::filesystem::temp_directory_path() / "dynlora_model_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.lswm";
  const Model m = generate(small_config());
  save(m, path);
  CHECK(serialize(load(path)) == serialize(m));
  try {
    load(dir / "missing.lswm");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("missing.lswm") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("block forward matches a scalar oracle") {
  Model m = generate(small_config());
  randomize_adapters(m, 9, 0.2);
  for (int token : {0, 7, 19}) {
    Matrix x = embed(m, token);
    for (const auto& b : m.blocks) {
      BlockTrace trace;
      const Matrix y = block_forward(b, x, [](const AdapterSite& s, const Matrix& in) { return matmul(s.weight, in); }, &trace);
      // scalar re-derivation
      const auto xs = oracle::column(x);
      auto a = oracle::matvec(b.site(SiteKind::MixIn).weight, xs);
      for (double& v : a) v = std::tanh(v);
      const auto mo = oracle::matvec(b.site(SiteKind::MixOut).weight, a);
      std::vector<double> h(xs.size());
      for (std::size_t i = 0; i < h.size(); ++i) h[i] = xs[i] + mo[i];
      const auto g = oracle::matvec(b.site(SiteKind::Gate).weight, h);
      const auto u = oracle::matvec(b.site(SiteKind::Up).weight, h);
      std::vector<double> p(g.size());
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::tanh(g[i]) * u[i];
      const auto d = oracle::matvec(b.site(SiteKind::Down).weight, p);
      std::vector<double> expect(h.size());
      for (std::size_t i = 0; i < h.size(); ++i) expect[i] = h[i] + d[i];
      CHECK(oracle::max_rel(expect, y) < 1e-13);
      CHECK(oracle::max_rel(h, trace.h) < 1e-13);
      x = y;
    }
  }
}

TEST_CASE("embed rejects out-of-range tokens") {
  const Model m = generate(small_config());
  CHECK_THROWS_AS(embed(m, -1), Error);
  CHECK_THROWS_AS(embed(m, 20), Error);
  CHECK(embed(m, 19).rows() == 8);
}

TEST_CASE("reroute changes only the routers") {
  Model m = generate(small_config());
  randomize_adapters(m, 2, 0.1);
  const Model per_site = rerouted(m, RoutingPolicy::PerSite);
  CHECK(per_site.routers.size() == 10);
  CHECK(per_site.config.routing == RoutingPolicy::PerSite);
  for (int id : m.adapted_site_ids()) {
    CHECK(per_site.site(id).weight == m.site(id).weight);
    CHECK(per_site.site(id).experts[1].up == m.site(id).experts[1].up);
  }
  const Model back = rerouted(per_site, RoutingPolicy::PreGated);
  CHECK(back.routers[0].w_g == m.routers[0].w_g);
}

TEST_CASE("drift audit measures distance from the pristine weights") {
  Model m = generate(small_config());
  enable_drift_audit(m);
  CHECK(max_pristine_drift(m) == 0.0);
  m.site(0).weight(0, 0) += 1.0;
  CHECK(max_pristine_drift(m) > 0.0);
}

TEST_CASE("placement and routing names round trip") {
  for (auto p : {Placement::AllLinear, Placement::MlpOnly}) CHECK(parse_placement(to_string(p)) == p);
  for (auto r : {RoutingPolicy::PerSite, RoutingPolicy::PerBlock, RoutingPolicy::PreGated}) CHECK(parse_routing(to_string(r)) == r);
  CHECK_THROWS_AS(parse_placement("Everywhere"), ConfigError);
}
