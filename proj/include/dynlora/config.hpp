// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value configuration files. One setting per line, '#' starts a
// comment, blank lines are ignored. Unknown keys are an error.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "dynlora/model.hpp"
#include "dynlora/profiler.hpp"
#include "dynlora/switching.hpp"
#include "dynlora/trainer.hpp"

namespace dynlora {

/// Benchmark protocol: seeded random prompts decoded greedily.
struct RunConfig {
  int n_queries = 50;
  int n_new = 200;
  int prompt_len = 8;
  std::uint64_t prompt_seed = 0;
  CostParams cost;
  TileConfig tile;

  void validate() const;
};

struct ConfigFile {
  ModelConfig model;
  TrainConfig train;
  RunConfig run;
};

/// Parses `text`; `origin` names the source in error messages.
ConfigFile parse_config(std::string_view text, const std::string& origin = "<config>");
ConfigFile load_config(const std::filesystem::path& path);
std::string to_config_text(const ConfigFile& config);

/// "64x32" -> rows 64, cols 32.
void parse_tile(std::string_view text, TileConfig& tile);
bool parse_bool(std::string_view text);

/// n prompts of `len` tokens drawn uniformly from [0, vocab).
std::vector<std::vector<int>> make_prompts(int n, int len, int vocab, std::uint64_t seed);

}  // namespace dynlora
