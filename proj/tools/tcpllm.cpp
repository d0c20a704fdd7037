#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "tcpllm/config.hpp"
#include "tcpllm/errors.hpp"
#include "tcpllm/evaluate.hpp"
#include "tcpllm/report.hpp"
#include "tcpllm/trainer.hpp"

namespace fs = std::filesystem;
using namespace tcpllm;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitIntegrity = 4;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("tcpllm");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("%^[%l]%$ %v");
  const char* env = std::getenv("TCPLLM_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else spdlog::set_level(spdlog::level::info);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << text;
  if (!os.good()) throw IoError("write failed for " + path);
}

std::string join(const fs::path& dir, const std::string& name) { return (dir / name).string(); }

config::RunConfig config_or_default(const std::string& path) {
  return path.empty() ? config::default_config() : config::load_config(path);
}

// --ckpt may name the directory written by `train` or the .tcpl file.
std::pair<std::string, std::string> checkpoint_paths(const std::string& ckpt) {
  fs::path p(ckpt);
  if (fs::is_directory(p)) return {join(p, "model.tcpl"), join(p, "model.json")};
  fs::path meta = p;
  meta.replace_extension(".json");
  return {p.string(), meta.string()};
}

struct SimulateArgs {
  std::string config;
  std::int64_t seed = -1;
  std::string out;
};

int cmd_simulate(const SimulateArgs& a) {
  const auto cfg = config::load_config(a.config);
  const std::uint64_t seed = a.seed >= 0 ? static_cast<std::uint64_t>(a.seed) : cfg.seed;
  const auto flows = cfg.resolve_flows(seed);
  spdlog::debug("simulate: {} flows, controller {}, seed {}", flows.size(), config::controller_name(cfg.controller),
                seed);
  const sim::ScenarioTrace trace = cfg.controller == config::Controller::Oracle
                                       ? eval::run_oracle(cfg.sim, flows, seed, cfg.arm)
                                       : sim::run_scenario(cfg.sim, flows, seed);
  ensure_dir(a.out);
  sim::write_trace_files(join(a.out, "trace.csv"), join(a.out, "switches.csv"), trace);
  std::size_t rows = 0;
  for (const auto& s : trace.samples) rows += s.size();
  std::cout << "wrote " << rows << " samples for " << trace.flow_ids.size() << " flows and "
            << trace.switch_events.size() << " switch events to " << a.out << "\n";
  return 0;
}

struct CollectArgs {
  std::vector<std::string> traces;
  std::string source = "trace";
  std::string out;
};

int cmd_collect(const CollectArgs& a) {
  if (a.traces.empty()) throw ConfigError("collect needs at least one --traces file");
  telemetry::ExperiencePool pool;
  for (const auto& path : a.traces) {
    const sim::ScenarioTrace trace = sim::read_trace_file(path);
    fs::path episode(path);
    episode.replace_extension();
    pool.append(telemetry::collect_experience(trace, a.source, episode.generic_string()));
    spdlog::debug("collect: {} -> {} flows", path, trace.flow_ids.size());
  }
  if (const auto parent = fs::path(a.out).parent_path(); !parent.empty()) ensure_dir(parent.string());
  pool.save(a.out);
  std::cout << "wrote " << pool.size() << " trajectories to " << a.out << "\n";
  for (const auto& [src, n] : pool.source_counts()) std::cout << "  " << src << ": " << n << "\n";
  return 0;
}

struct TrainArgs {
  std::string mode;
  std::string pool;
  std::string config;
  std::string out;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = config_or_default(a.config);
  if (!a.mode.empty()) cfg.train.mode = train::mode_from_name(a.mode);
  cfg.train.validate(cfg.model);
  const auto pool = telemetry::ExperiencePool::load(a.pool);
  spdlog::info("train: {} mode on {} trajectories, {} epochs", train::mode_name(cfg.train.mode), pool.size(),
               cfg.train.epochs);
  model::Policy policy(cfg.model);
  const auto report = train::train(policy, pool, cfg.train, [](const train::EpochRecord& e) {
    spdlog::info("epoch {:3d}  train_loss {:.4f}  test_loss {:.4f}  train_acc {:.4f}  test_acc {:.4f}", e.epoch,
                 e.train_loss, e.test_loss, e.train_acc, e.test_acc);
  });
  ensure_dir(a.out);
  train::save_checkpoint(policy, cfg.train, join(a.out, "model.tcpl"), join(a.out, "model.json"));
  std::ofstream rep(join(a.out, "report.jsonl"), std::ios::binary | std::ios::trunc);
  if (!rep) throw IoError("cannot open " + join(a.out, "report.jsonl") + " for writing");
  report.write_jsonl(rep);
  if (!rep.good()) throw IoError("write failed for report.jsonl");
  const auto& last = report.epochs.back();
  std::cout << "final train_loss " << last.train_loss << " test_loss " << last.test_loss << " train_acc "
            << last.train_acc << " test_acc " << last.test_acc << "\n";
  std::cout << "trainable parameters " << policy.params().trainable_count() << ", checkpoint in " << a.out << "\n";
  return 0;
}

struct CompareArgs {
  std::string scenario;
  std::string ckpt;
  std::string config;
  std::int64_t seed = -1;
  std::string out;
};

int cmd_compare(const CompareArgs& a) {
  const auto scenario = eval::scenario_by_name(a.scenario);
  const auto cfg = config_or_default(a.config);
  const std::uint64_t seed = a.seed >= 0 ? static_cast<std::uint64_t>(a.seed) : cfg.seed;
  const auto [bin, meta] = checkpoint_paths(a.ckpt);
  const auto policy = train::load_checkpoint(bin, meta);
  spdlog::info("compare: scenario {}, seed {}", scenario.name, seed);
  const auto c = eval::compare(policy.get(), cfg.sim, scenario, seed, cfg.arm);
  ensure_dir(a.out);
  for (const auto& arm : c.arms) {
    const fs::path dir = fs::path(a.out) / arm.arm;
    ensure_dir(dir.string());
    sim::write_trace_files(join(dir, "trace.csv"), join(dir, "switches.csv"), arm.trace);
    eval::write_cdf_csvs(dir.string(), arm);
    if (arm.arm == "policy") {
      std::ofstream os(join(dir, "decisions.csv"), std::ios::binary | std::ios::trunc);
      if (!os) throw IoError("cannot open decisions.csv for writing");
      eval::write_decisions_csv(os, arm.decisions);
    }
  }
  write_text(join(a.out, "summary.json"), eval::comparison_json(c) + "\n");
  std::cout << eval::summary_table(c.arms);
  return 0;
}

struct ReportArgs {
  std::string in;
  std::string emit;
  std::string config;
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  const auto cfg = config_or_default(a.config);
  if (!fs::is_directory(a.in)) throw ConfigError("report input " + a.in + " is not a directory");
  const auto arms = eval::load_arms(a.in, cfg.arm, cfg.sim.link);
  const std::string out = a.out.empty() ? a.in : a.out;
  ensure_dir(out);
  if (a.emit == "cdf") {
    std::size_t n = 0;
    for (const auto& arm : arms) n += eval::write_cdf_csvs(join(out, "cdf_" + arm.arm), arm).size();
    std::cout << "wrote " << n << " CDF files under " << out << "\n";
  } else if (a.emit == "box") {
    eval::write_box_csv(join(out, "box.csv"), arms);
    std::cout << "wrote " << join(out, "box.csv") << "\n";
  } else {
    const std::string table = eval::summary_table(arms);
    write_text(join(out, "summary.txt"), table);
    std::cout << table;
  }
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"TCP congestion-control switching with a LoRA-adapted sequence model"};
  app.require_subcommand(1);

  SimulateArgs sa;
  auto* sim_cmd = app.add_subcommand("simulate", "Run one scenario and write trace.csv and switches.csv");
  sim_cmd->add_option("--config", sa.config, "Config file")->required();
  sim_cmd->add_option("--seed", sa.seed, "Seed (defaults to [meta] seed)");
  sim_cmd->add_option("--out", sa.out, "Output directory")->required();

  CollectArgs ca;
  auto* col_cmd = app.add_subcommand("collect", "Build an experience pool from traces");
  col_cmd->add_option("--traces", ca.traces, "Trace CSV files")->required();
  col_cmd->add_option("--source", ca.source, "Source label stored with each trajectory");
  col_cmd->add_option("--out", ca.out, "Pool file (JSON lines)")->required();

  TrainArgs ta;
  auto* tr_cmd = app.add_subcommand("train", "Fine-tune the adapters on an experience pool");
  tr_cmd->add_option("--mode", ta.mode, "sl or rl (defaults to [train] mode)")
      ->check(CLI::IsMember({"sl", "rl"}));
  tr_cmd->add_option("--pool,--dataset", ta.pool, "Experience pool (JSON lines)")->required();
  tr_cmd->add_option("--config", ta.config, "Config file");
  tr_cmd->add_option("--out", ta.out, "Checkpoint directory")->required();

  CompareArgs pa;
  auto* cmp_cmd = app.add_subcommand("compare", "Run static, oracle and policy arms on a scenario");
  cmp_cmd->add_option("--scenario", pa.scenario, "cubic-bbr, pcc-bbr or bbr-pcc")->required();
  cmp_cmd->add_option("--ckpt", pa.ckpt, "Checkpoint directory or .tcpl file")->required();
  cmp_cmd->add_option("--config", pa.config, "Config file");
  cmp_cmd->add_option("--seed", pa.seed, "Seed (defaults to [meta] seed)");
  cmp_cmd->add_option("--out", pa.out, "Output directory")->required();

  ReportArgs ra;
  auto* rep_cmd = app.add_subcommand("report", "Emit CDF, box-plot or summary files from compare outputs");
  rep_cmd->add_option("--in", ra.in, "Directory written by compare")->required();
  rep_cmd->add_option("--emit", ra.emit, "cdf, box or summary")->required()->check(CLI::IsMember({"cdf", "box", "summary"}));
  rep_cmd->add_option("--config", ra.config, "Config file");
  rep_cmd->add_option("--out", ra.out, "Output directory (defaults to --in)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (*sim_cmd) return cmd_simulate(sa);
  if (*col_cmd) return cmd_collect(ca);
  if (*tr_cmd) return cmd_train(ta);
  if (*cmp_cmd) return cmd_compare(pa);
  return cmd_report(ra);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  try {
    return run(argc, argv);
  } catch (const IntegrityError& e) {
    spdlog::error("{}", e.what());
    return kExitIntegrity;
  } catch (const IoError& e) {
    spdlog::error("{}", e.what());
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  }
}
