// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include "dynlora/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>

namespace dynlora {

void RunConfig::validate() const {
  if (n_queries < 1) throw ConfigError("n_queries must be >= 1");
  if (n_new < 1) throw ConfigError("n_new must be >= 1");
  if (prompt_len < 1) throw ConfigError("prompt_len must be >= 1");
  cost.validate();
  tile.validate();
}

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view text, std::string_view key) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("expected a number for " + std::string(key) + ", got '" + std::string(text) + "'");
  }
  return value;
}

using Setter = std::function<void(ConfigFile&, std::string_view)>;

template <typename T, typename Field>
Setter number(Field field) {
  return [field](ConfigFile& c, std::string_view v) { field(c) = parse_number<T>(v, "the value"); };
}

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"n_blocks", number<int>([](ConfigFile& c) -> int& { return c.model.n_blocks; })},
      {"d_model", number<int>([](ConfigFile& c) -> int& { return c.model.d_model; })},
      {"d_hidden", number<int>([](ConfigFile& c) -> int& { return c.model.d_hidden; })},
      {"vocab", number<int>([](ConfigFile& c) -> int& { return c.model.vocab; })},
      {"n_experts", number<int>([](ConfigFile& c) -> int& { return c.model.n_experts; })},
      {"rank", number<int>([](ConfigFile& c) -> int& { return c.model.rank; })},
      {"alpha", number<double>([](ConfigFile& c) -> double& { return c.model.alpha; })},
      {"top_k", number<int>([](ConfigFile& c) -> int& { return c.model.top_k; })},
      {"placement", [](ConfigFile& c, std::string_view v) { c.model.placement = parse_placement(v); }},
      {"routing", [](ConfigFile& c, std::string_view v) { c.model.routing = parse_routing(v); }},
      {"seed", number<std::uint64_t>([](ConfigFile& c) -> std::uint64_t& { return c.model.seed; })},
      {"steps", number<int>([](ConfigFile& c) -> int& { return c.train.steps; })},
      {"batch_size", number<int>([](ConfigFile& c) -> int& { return c.train.batch_size; })},
      {"learning_rate", number<double>([](ConfigFile& c) -> double& { return c.train.learning_rate; })},
      {"train_seed", number<std::uint64_t>([](ConfigFile& c) -> std::uint64_t& { return c.train.seed; })},
      {"n_classes", number<int>([](ConfigFile& c) -> int& { return c.train.task.n_classes; })},
      {"tokens_per_class", number<int>([](ConfigFile& c) -> int& { return c.train.task.tokens_per_class; })},
      {"n_queries", number<int>([](ConfigFile& c) -> int& { return c.run.n_queries; })},
      {"n_new", number<int>([](ConfigFile& c) -> int& { return c.run.n_new; })},
      {"prompt_len", number<int>([](ConfigFile& c) -> int& { return c.run.prompt_len; })},
      {"prompt_seed", number<std::uint64_t>([](ConfigFile& c) -> std::uint64_t& { return c.run.prompt_seed; })},
      {"overhead_us", number<double>([](ConfigFile& c) -> double& { return c.run.cost.launch_overhead_us; })},
      {"throughput_gflops", number<double>([](ConfigFile& c) -> double& { return c.run.cost.throughput_gflops; })},
      {"inject_delay", [](ConfigFile& c, std::string_view v) { c.run.cost.injected_delay = parse_bool(v); }},
      {"workers", number<int>([](ConfigFile& c) -> int& { return c.run.tile.workers; })},
      {"tile", [](ConfigFile& c, std::string_view v) { parse_tile(v, c.run.tile); }},
      {"prefetch", [](ConfigFile& c, std::string_view v) { c.run.tile.prefetch = parse_bool(v); }},
  };
  return table;
}

}  // namespace

bool parse_bool(std::string_view text) {
  if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "off" || text == "no") return false;
  throw ConfigError("expected a boolean (true/false), got '" + std::string(text) + "'");
}

void parse_tile(std::string_view text, TileConfig& tile) {
  const auto x = text.find('x');
  if (x == std::string_view::npos) throw ConfigError("tile must look like RxC, got '" + std::string(text) + "'");
  tile.rows = parse_number<int>(text.substr(0, x), "tile rows");
  tile.cols = parse_number<int>(text.substr(x + 1), "tile cols");
  if (tile.rows < 1 || tile.cols < 1) throw ConfigError("tile dimensions must be >= 1");
}

ConfigFile parse_config(std::string_view text, const std::string& origin) {
  ConfigFile cfg;
  int line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected key=value");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(where + ": unknown key '" + std::string(key) + "'");
    try {
      it->second(cfg, value);
    } catch (const Error& e) {
      throw ConfigError(where + ": " + std::string(key) + ": " + e.what());
    }
  }
  return cfg;
}

ConfigFile load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string to_config_text(const ConfigFile& c) {
  std::ostringstream os;
  os.precision(17);
  os << "# model\n"
     << "n_blocks = " << c.model.n_blocks << "\n"
     << "d_model = " << c.model.d_model << "\n"
     << "d_hidden = " << c.model.d_hidden << "\n"
     << "vocab = " << c.model.vocab << "\n"
     << "n_experts = " << c.model.n_experts << "\n"
     << "rank = " << c.model.rank << "\n"
     << "alpha = " << c.model.alpha << "\n"
     << "top_k = " << c.model.top_k << "\n"
     << "placement = " << to_string(c.model.placement) << "\n"
     << "routing = " << to_string(c.model.routing) << "\n"
     << "seed = " << c.model.seed << "\n"
     << "# training\n"
     << "steps = " << c.train.steps << "\n"
     << "batch_size = " << c.train.batch_size << "\n"
     << "learning_rate = " << c.train.learning_rate << "\n"
     << "train_seed = " << c.train.seed << "\n"
     << "n_classes = " << c.train.task.n_classes << "\n"
     << "tokens_per_class = " << c.train.task.tokens_per_class << "\n"
     << "# benchmark\n"
     << "n_queries = " << c.run.n_queries << "\n"
     << "n_new = " << c.run.n_new << "\n"
     << "prompt_len = " << c.run.prompt_len << "\n"
     << "prompt_seed = " << c.run.prompt_seed << "\n"
     << "overhead_us = " << c.run.cost.launch_overhead_us << "\n"
     << "throughput_gflops = " << c.run.cost.throughput_gflops << "\n"
     << "inject_delay = " << (c.run.cost.injected_delay ? "true" : "false") << "\n"
     << "workers = " << c.run.tile.workers << "\n"
     << "tile = " << c.run.tile.rows << "x" << c.run.tile.cols << "\n"
     << "prefetch = " << (c.run.tile.prefetch ? "true" : "false") << "\n";
  return os.str();
}

std::vector<std::vector<int>> make_prompts(int n, int len, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(0, vocab - 1);
  std::vector<std::vector<int>> prompts(static_cast<std::size_t>(n));
  for (auto& p : prompts) {
    p.resize(static_cast<std::size_t>(len));
    for (int& t : p) t = dist(rng);
  }
  return prompts;
}

}  // namespace dynlora
