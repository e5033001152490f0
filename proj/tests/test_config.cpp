// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dynlora/config.hpp"

using namespace dynlora;

TEST_CASE("an empty file gives the defaults") {
  const ConfigFile c = parse_config("# nothing here\n\n   \n");
  CHECK(c.model == ModelConfig{});
  CHECK(c.run.n_queries == 50);
  CHECK(c.run.n_new == 200);
  CHECK(c.train.steps == 2000);
}

TEST_CASE("keys, comments and whitespace") {
  const ConfigFile c = parse_config(
      "n_blocks = 2  # trailing comment\n"
      "  d_model=32\n"
      "placement = MlpOnly\n"
      "routing = PerBlock\n"
      "alpha = 12.5\n"
      "learning_rate = 1e-3\n"
      "tile = 32x16\n"
      "workers = 4\n"
      "prefetch = false\n"
      "inject_delay = true\n"
      "overhead_us = 5\n");
  CHECK(c.model.n_blocks == 2);
  CHECK(c.model.d_model == 32);
  CHECK(c.model.placement == Placement::MlpOnly);
  CHECK(c.model.routing == RoutingPolicy::PerBlock);
  CHECK(c.model.alpha == 12.5);
  CHECK(c.train.learning_rate == 1e-3);
  CHECK(c.run.tile.rows == 32);
  CHECK(c.run.tile.cols == 16);
  CHECK(c.run.tile.workers == 4);
  CHECK_FALSE(c.run.tile.prefetch);
  CHECK(c.run.cost.injected_delay);
  CHECK(c.run.cost.launch_overhead_us == 5.0);
}

TEST_CASE("errors name the origin and line") {
  CHECK_THROWS_WITH_AS(parse_config("n_blocks = 2\nbogus = 1\n", "run.cfg"),
                       doctest::Contains("run.cfg:2: unknown key 'bogus'"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("\n\nn_blocks\n", "x"), doctest::Contains("x:3: expected key=value"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("rank = eight\n", "x"), doctest::Contains("got 'eight'"), ConfigError);
  CHECK_THROWS_AS(parse_config("rank = 8x\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("placement = everywhere\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("prefetch = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("tile = 64\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("tile = 0x4\n"), ConfigError);
}

TEST_CASE("to_config_text round trips") {
  ConfigFile c;
  c.model.n_blocks = 3;
  c.model.alpha = 0.1;
  c.model.placement = Placement::MlpOnly;
  c.model.seed = 123456789012345ULL;
  c.train.learning_rate = 3e-4;
  c.train.task.tokens_per_class = 5;
  c.run.cost.throughput_gflops = 12.25;
  c.run.tile.prefetch = false;
  const ConfigFile back = parse_config(to_config_text(c));
  CHECK(back.model == c.model);
  CHECK(back.train.learning_rate == c.train.learning_rate);
  CHECK(back.train.task.tokens_per_class == 5);
  CHECK(back.run.cost.throughput_gflops == 12.25);
  CHECK_FALSE(back.run.tile.prefetch);
  CHECK(to_config_text(back) == to_config_text(c));
}

TEST_CASE("load_config reports missing files as I/O errors") {
  CHECK_THROWS_WITH_AS(load_config("/nonexistent/dir/x.cfg"), doctest::Contains("/nonexistent/dir/x.cfg"),
                       IoError);
  const auto path = std::filesystem::temp_directory_path() / "dynlora_test_config.cfg";
  {
    std::ofstream out(path);
    out << "n_experts = 4\nbad line\n";
  }
  CHECK_THROWS_WITH_AS(load_config(path), doctest::Contains((path.string() + ":2").c_str()), ConfigError);
  std::filesystem::remove(path);
}

TEST_CASE("run config validation") {
  RunConfig r;
  CHECK_NOTHROW(r.validate());
  r.n_new = 0;
  CHECK_THROWS_AS(r.validate(), ConfigError);
}

TEST_CASE("prompts are seeded and in range") {
  const auto a = make_prompts(5, 8, 256, 3);
  const auto b = make_prompts(5, 8, 256, 3);
  const auto c = make_prompts(5, 8, 256, 4);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a.size() == 5);
  for (const auto& p : a) {
    CHECK(p.size() == 8);
    for (int t : p) CHECK((t >= 0 && t < 256));
  }
}

TEST_CASE("booleans") {
  CHECK(parse_bool("true"));
  CHECK(parse_bool("1"));
  CHECK_FALSE(parse_bool("off"));
  CHECK_THROWS_AS(parse_bool("TRUE!"), ConfigError);
}
