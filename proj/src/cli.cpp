// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include "dynlora/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "dynlora/checks.hpp"
#include "dynlora/config.hpp"
#include "dynlora/engine.hpp"
#include "dynlora/trainer.hpp"

namespace dynlora {

namespace {

enum class Format { Table, Csv, Json };

struct Common {
  std::string config_path;
  std::string model_path;
  std::string mode;
  std::string out_path;
  std::string format = "table";
  std::optional<std::uint64_t> seed;
  std::optional<double> overhead_us;
  std::optional<double> throughput_gflops;
  std::optional<std::string> inject_delay;
  std::optional<int> workers;
  std::optional<std::string> tile;
  std::optional<int> queries;
  std::optional<int> new_tokens;
  std::optional<int> prompt_len;
};

Format parse_format(const std::string& s) {
  if (s == "table") return Format::Table;
  if (s == "csv") return Format::Csv;
  if (s == "json") return Format::Json;
  throw ConfigError("--format must be one of csv, json, table");
}

std::string meta_line(const std::string& command) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << "# dynlora " << command << " " << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << "\n";
  return os.str();
}

// Table and CSV payloads get a metadata header line; JSON stays pure.
std::string with_meta(const std::string& command, Format f, const std::string& payload) {
  return f == Format::Json ? payload : meta_line(command) + payload;
}

void emit(const std::string& path, const std::string& content, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << content;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << content;
  if (!f) throw IoError("failed writing " + path);
}

std::string fixed(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  // Numeric columns are right-aligned, everything else left-aligned.
  std::vector<bool> numeric(header.size(), true);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      width[c] = std::max(width[c], r[c].size());
      double v = 0.0;
      const char* end = r[c].data() + r[c].size();
      if (std::from_chars(r[c].data(), end, v).ptr != end) numeric[c] = false;
    }
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) os << "  ";
      const bool last = c + 1 == cells.size();
      if (!numeric[c] && last) {
        os << cells[c];
      } else {
        os << (numeric[c] ? std::right : std::left) << std::setw(static_cast<int>(width[c])) << cells[c];
      }
    }
    os << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

std::string render_csv(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) os << (c ? "," : "") << cells[c];
    os << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

ConfigFile resolve(const Common& c) {
  ConfigFile cfg = c.config_path.empty() ? ConfigFile{} : load_config(c.config_path);
  RunConfig& run = cfg.run;
  if (c.overhead_us) run.cost.launch_overhead_us = *c.overhead_us;
  if (c.throughput_gflops) run.cost.throughput_gflops = *c.throughput_gflops;
  if (c.inject_delay) run.cost.injected_delay = parse_bool(*c.inject_delay);
  if (c.workers) run.tile.workers = *c.workers;
  if (c.tile) parse_tile(*c.tile, run.tile);
  if (c.queries) run.n_queries = *c.queries;
  if (c.new_tokens) run.n_new = *c.new_tokens;
  if (c.prompt_len) run.prompt_len = *c.prompt_len;
  if (c.seed) run.prompt_seed = *c.seed;
  run.validate();
  parse_format(c.format);
  return cfg;
}

Model load_model(const Common& c) {
  if (c.model_path.empty()) throw ConfigError("--model is required");
  return load(c.model_path);
}

ExecMode mode_or(const Common& c, ExecMode fallback) {
  return c.mode.empty() ? fallback : parse_mode(c.mode);
}

// ---------------------------------------------------------------------------

int cmd_gen(const Common& c, std::ostream& out) {
  ConfigFile cfg = c.config_path.empty() ? ConfigFile{} : load_config(c.config_path);
  if (c.seed) cfg.model.seed = *c.seed;
  if (c.out_path.empty()) throw ConfigError("gen: --out is required");
  const Model model = generate(cfg.model);
  save(model, c.out_path);
  out << "wrote " << c.out_path << ": " << cfg.model.n_blocks << " blocks, " << model.adapted_site_ids().size()
      << " adapted sites, " << cfg.model.n_experts << " experts, routing " << to_string(cfg.model.routing) << "\n";
  return kExitOk;
}

int cmd_decode(const Common& c, const std::string& log_path, std::ostream& out) {
  const ConfigFile cfg = resolve(c);
  const Format f = parse_format(c.format);
  const ExecMode mode = mode_or(c, ExecMode::FusedSwitch);
  Model model = load_model(c);
  if (mode != ExecMode::BackboneOnly && model.config.routing != routing_for(mode)) reroute(model, routing_for(mode));

  SessionOptions so;
  so.cost = cfg.run.cost;
  so.tile = cfg.run.tile;
  DecodeSession session(model, mode, so);
  const auto prompts = make_prompts(cfg.run.n_queries, cfg.run.prompt_len, model.config.vocab, cfg.run.prompt_seed);
  std::vector<std::vector<int>> generations;
  for (const auto& p : prompts) generations.push_back(session.generate(p, cfg.run.n_new));
  session.restore();

  std::string payload;
  if (f == Format::Json) {
    nlohmann::json j;
    j["mode"] = std::string(to_string(mode));
    j["prompts"] = prompts;
    j["generations"] = generations;
    payload = j.dump(2) + "\n";
  } else if (f == Format::Csv) {
    std::ostringstream os;
    os << "query,step,token\n";
    for (std::size_t q = 0; q < generations.size(); ++q)
      for (std::size_t s = 0; s < generations[q].size(); ++s) os << q << "," << s << "," << generations[q][s] << "\n";
    payload = os.str();
  } else {
    std::ostringstream os;
    for (std::size_t q = 0; q < generations.size(); ++q) {
      os << "query " << q << ":";
      for (int t : generations[q]) os << " " << t;
      os << "\n";
    }
    payload = os.str();
  }
  emit(c.out_path, with_meta("decode", f, payload), out);

  if (!log_path.empty()) {
    const auto& log = session.profiler().log();
    std::string text;
    switch (f) {
      case Format::Csv: text = log_csv(log, so.cost); break;
      case Format::Json: text = log_json(log, so.cost); break;
      case Format::Table: text = breakdown_table(breakdown_report(log, so.cost)); break;
    }
    emit(log_path, with_meta("decode-log", f, text), out);
  }
  return kExitOk;
}

int cmd_check(const Common& c, std::ostream& out) {
  const Format f = parse_format(c.format);
  const Model model = load_model(c);
  CheckOptions opt;
  if (c.queries) opt.n_queries = *c.queries;
  if (c.new_tokens) opt.n_new = *c.new_tokens;
  if (c.prompt_len) opt.prompt_len = *c.prompt_len;
  if (c.seed) opt.seed = *c.seed;
  if (c.workers) opt.tile.workers = *c.workers;
  if (c.tile) parse_tile(*c.tile, opt.tile);
  opt.tile.validate();
  if (opt.n_queries < 1 || opt.n_new < 1 || opt.prompt_len < 1) throw ConfigError("check: prompt sizes must be >= 1");

  const auto results = run_checks(model, opt);
  bool all = true;
  std::vector<std::vector<std::string>> rows;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : results) {
    all = all && r.passed;
    rows.push_back({r.name, r.passed ? "PASS" : "FAIL", r.detail});
    j.push_back({{"suite", r.name}, {"passed", r.passed}, {"detail", r.detail}});
  }
  std::string payload;
  if (f == Format::Json) {
    payload = nlohmann::json{{"passed", all}, {"suites", j}}.dump(2) + "\n";
  } else if (f == Format::Csv) {
    payload = render_csv({"suite", "result", "detail"}, rows);
  } else {
    payload = render_table({"suite", "result", "detail"}, rows);
  }
  emit(c.out_path, with_meta("check", f, payload), out);
  return all ? kExitOk : kExitCheckFailed;
}

int cmd_bench(const Common& c, std::ostream& out) {
  const ConfigFile cfg = resolve(c);
  const Format f = parse_format(c.format);
  const Model model = load_model(c);
  std::vector<ExecMode> modes;
  if (c.mode.empty()) {
    modes = {ExecMode::NaivePerSite, ExecMode::NaivePerBlock, ExecMode::PreGatedNaive, ExecMode::SimpleMerge,
             ExecMode::FusedSwitch};
  } else {
    modes = {parse_mode(c.mode)};
  }
  const auto rows = run_bench(model, modes, cfg.run);

  const std::vector<std::string> header = {"mode",          "dispatches_per_token", "modeled_us_per_token",
                                           "wall_us_per_token", "modeled_overhead_pct", "wall_overhead_pct",
                                           "counts"};
  std::vector<std::vector<std::string>> cells;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    cells.push_back({std::string(to_string(r.mode)), fixed(r.dispatches_per_token, 1), fixed(r.modeled_us_per_token, 3),
                     fixed(r.wall_us_per_token, 1), fixed(r.modeled_overhead_pct, 1), fixed(r.wall_overhead_pct, 1),
                     r.counts_ok ? "ok" : "MISMATCH"});
    j.push_back({{"mode", std::string(to_string(r.mode))},
                 {"tokens", r.tokens},
                 {"dispatches_per_token", r.dispatches_per_token},
                 {"modeled_us_per_token", r.modeled_us_per_token},
                 {"wall_us_per_token", r.wall_us_per_token},
                 {"modeled_overhead_pct", r.modeled_overhead_pct},
                 {"wall_overhead_pct", r.wall_overhead_pct},
                 {"counts_ok", r.counts_ok}});
  }
  // Wall-clock figures vary run to run; the JSON form carries them too, but
  // only the modeled columns are reproducible.
  std::string payload;
  if (f == Format::Json) {
    nlohmann::json doc;
    doc["params"] = {{"launch_overhead_us", cfg.run.cost.launch_overhead_us},
                     {"throughput_gflops", cfg.run.cost.throughput_gflops},
                     {"injected_delay", cfg.run.cost.injected_delay}};
    doc["modes"] = j;
    payload = doc.dump(2) + "\n";
  } else if (f == Format::Csv) {
    payload = render_csv(header, cells);
  } else {
    payload = render_table(header, cells);
  }
  emit(c.out_path, with_meta("bench", f, payload), out);
  bool ok = true;
  for (const auto& r : rows) ok = ok && r.counts_ok;
  return ok ? kExitOk : kExitCheckFailed;
}

int cmd_profile(const Common& c, std::ostream& out) {
  const ConfigFile cfg = resolve(c);
  const Format f = parse_format(c.format);
  const ExecMode mode = mode_or(c, ExecMode::FusedSwitch);
  Model model = load_model(c);
  if (mode != ExecMode::BackboneOnly && model.config.routing != routing_for(mode)) reroute(model, routing_for(mode));
  SessionOptions so;
  so.cost = cfg.run.cost;
  so.tile = cfg.run.tile;
  DecodeSession session(model, mode, so);
  for (const auto& p : make_prompts(cfg.run.n_queries, cfg.run.prompt_len, model.config.vocab, cfg.run.prompt_seed)) {
    session.generate(p, cfg.run.n_new);
  }
  session.restore();
  const Breakdown b = breakdown_report(session.profiler().log(), so.cost);
  std::string payload;
  switch (f) {
    case Format::Csv: payload = breakdown_csv(b); break;
    case Format::Json: payload = breakdown_json(b); break;
    case Format::Table: payload = "mode " + std::string(to_string(mode)) + "\n" + breakdown_table(b); break;
  }
  emit(c.out_path, with_meta("profile", f, payload), out);
  return kExitOk;
}

int cmd_train(const Common& c, const std::string& report_path, std::ostream& out, std::ostream& err) {
  const ConfigFile cfg = c.config_path.empty() ? ConfigFile{} : load_config(c.config_path);
  TrainConfig tc = cfg.train;
  if (c.seed) tc.seed = *c.seed;
  if (c.out_path.empty()) throw ConfigError("train: --out is required");
  Model model = load_model(c);
  if (model.config.routing != RoutingPolicy::PreGated) {
    err << "note: rerouting model to PreGated for training\n";
    reroute(model, RoutingPolicy::PreGated);
  }
  const TrainReport report = train(model, tc);
  save(model, c.out_path);
  emit(report_path, report.to_json(), out);
  return kExitOk;
}

int cmd_ablate(const Common& c, std::ostream& out) {
  const ConfigFile cfg = resolve(c);
  const Format f = parse_format(c.format);
  ModelConfig base = c.model_path.empty() ? cfg.model : load(c.model_path).config;
  const ExecMode modes[] = {ExecMode::NaivePerSite, ExecMode::NaivePerBlock, ExecMode::PreGatedNaive,
                            ExecMode::SimpleMerge, ExecMode::FusedSwitch};
  const std::vector<std::string> header = {"n_experts", "rank",  "top_k",   "mode",
                                           "dispatches", "adapter", "sgmm", "modeled_us_per_token"};
  std::vector<std::vector<std::string>> cells;
  nlohmann::json j = nlohmann::json::array();
  for (int n : {8, 16}) {
    for (int r : {8, 16, 32, 64}) {
      for (int k : {1, 2}) {
        ModelConfig mc = base;
        mc.n_experts = n;
        mc.rank = r;
        mc.top_k = k;
        mc.validate();
        for (ExecMode mode : modes) {
          const KindCounts counts = count_per_token(mc, mode);
          const double us = estimate_latency(counts, flops_per_token(mc, mode), cfg.run.cost);
          auto get = [&](DispatchKind kind) {
            const auto it = counts.find(kind);
            return it == counts.end() ? std::int64_t{0} : it->second;
          };
          cells.push_back({std::to_string(n), std::to_string(r), std::to_string(k), std::string(to_string(mode)),
                           std::to_string(total(counts)), std::to_string(get(DispatchKind::AdapterGemm)),
                           std::to_string(get(DispatchKind::SgmmDispatch)), fixed(us, 3)});
          j.push_back({{"n_experts", n},
                       {"rank", r},
                       {"top_k", k},
                       {"mode", std::string(to_string(mode))},
                       {"dispatches", total(counts)},
                       {"adapter", get(DispatchKind::AdapterGemm)},
                       {"sgmm", get(DispatchKind::SgmmDispatch)},
                       {"modeled_us_per_token", us}});
        }
      }
    }
  }
  std::string payload;
  if (f == Format::Json) {
    payload = j.dump(2) + "\n";
  } else if (f == Format::Csv) {
    payload = render_csv(header, cells);
  } else {
    payload = render_table(header, cells);
  }
  emit(c.out_path, with_meta("ablate", f, payload), out);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic LoRA adapter switching: generation, decoding, checks, benchmarks and training"};
  app.require_subcommand(1);
  Common c;
  std::string log_path;
  std::string report_path;

  auto add_io = [&](CLI::App* sub) {
    sub->add_option("--out", c.out_path, "Output path (default stdout)");
    sub->add_option("--format", c.format, "csv, json or table")->check(CLI::IsMember({"csv", "json", "table"}));
  };
  auto add_run = [&](CLI::App* sub) {
    sub->add_option("--config", c.config_path, "key=value config file");
    sub->add_option("--seed", c.seed, "Prompt seed");
    sub->add_option("--overhead-us", c.overhead_us, "Launch overhead per dispatch (us)");
    sub->add_option("--throughput-gflops", c.throughput_gflops, "Modeled compute rate");
    sub->add_option("--inject-delay", c.inject_delay, "Spin for the launch overhead on every dispatch (true/false)");
    sub->add_option("--workers", c.workers, "SGMM worker threads");
    sub->add_option("--tile", c.tile, "SGMM tile size RxC");
    sub->add_option("--queries", c.queries, "Number of prompts");
    sub->add_option("--new-tokens", c.new_tokens, "Tokens generated per prompt");
    sub->add_option("--prompt-len", c.prompt_len, "Prompt length");
  };
  auto add_model = [&](CLI::App* sub, bool required) {
    auto* o = sub->add_option("--model", c.model_path, "Model file");
    if (required) o->required();
  };

  auto* gen = app.add_subcommand("gen", "Generate a seeded model file");
  gen->add_option("--config", c.config_path, "key=value config file");
  gen->add_option("--seed", c.seed, "Model seed (overrides the config)");
  gen->add_option("--out", c.out_path, "Model output path")->required();

  auto* decode = app.add_subcommand("decode", "Greedy-decode seeded prompts");
  add_model(decode, true);
  decode->add_option("--mode", c.mode, "Execution mode");
  decode->add_option("--log", log_path, "Write the dispatch log here (in --format)");
  add_io(decode);
  add_run(decode);

  auto* check = app.add_subcommand("check", "Run the equivalence, roundtrip, sign and SGMM suites");
  add_model(check, true);
  add_io(check);
  check->add_option("--seed", c.seed, "Check seed");
  check->add_option("--workers", c.workers, "SGMM worker threads");
  check->add_option("--tile", c.tile, "SGMM tile size RxC");
  check->add_option("--queries", c.queries, "Number of prompts");
  check->add_option("--new-tokens", c.new_tokens, "Tokens generated per prompt");
  check->add_option("--prompt-len", c.prompt_len, "Prompt length");

  auto* bench = app.add_subcommand("bench", "Per-mode dispatches, modeled and wall-clock latency");
  add_model(bench, true);
  bench->add_option("--mode", c.mode, "Single mode (default: all)");
  add_io(bench);
  add_run(bench);

  auto* profile = app.add_subcommand("profile", "Per-kind latency breakdown of one mode");
  add_model(profile, true);
  profile->add_option("--mode", c.mode, "Execution mode");
  add_io(profile);
  add_run(profile);

  auto* trn = app.add_subcommand("train", "Fine-tune experts and router on the synthetic task");
  add_model(trn, true);
  trn->add_option("--config", c.config_path, "key=value config file (training keys)");
  trn->add_option("--seed", c.seed, "Training seed");
  trn->add_option("--out", c.out_path, "Trained model output path")->required();
  trn->add_option("--report", report_path, "TrainReport JSON path (default stdout)");

  auto* ablate = app.add_subcommand("ablate", "Sweep experts, rank and top-k");
  add_model(ablate, false);
  add_io(ablate);
  add_run(ablate);

  std::vector<std::string> argv_store{"dynlora"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen(c, out);
    if (decode->parsed()) return cmd_decode(c, log_path, out);
    if (check->parsed()) return cmd_check(c, out);
    if (bench->parsed()) return cmd_bench(c, out);
    if (profile->parsed()) return cmd_profile(c, out);
    if (trn->parsed()) return cmd_train(c, report_path, out, err);
    if (ablate->parsed()) return cmd_ablate(c, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  return kExitUsage;
}

}  // namespace dynlora
