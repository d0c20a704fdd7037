#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tcpllm/evaluate.hpp"
#include "tcpllm/policy.hpp"
#include "tcpllm/sim.hpp"
#include "tcpllm/trainer.hpp"

namespace tcpllm::config {

inline constexpr int kSchemaVersion = 1;

enum class Controller { Static, Oracle };

struct FlowSpec {
  int flow_id = 0;
  std::optional<sim::CcaId> cca;  // empty: drawn per seed ("random")
  double start_time = 0.0;
  std::vector<sim::SwitchCommand> schedule;
};

// Everything a subcommand needs, parsed from one INI-style file:
// [meta] [link] [sim] [cubic] [bbr] [pcc] [controller] [oracle] [detector]
// [flowN]... [encoder] [backbone] [lora] [model] [train].
struct RunConfig {
  std::string scenario = "cubic-bbr";
  std::uint64_t seed = 1;
  sim::SimConfig sim;
  std::vector<FlowSpec> flows;
  Controller controller = Controller::Static;
  eval::ArmConfig arm;
  model::ModelConfig model;
  train::TrainConfig train;

  // Throws ConfigError on any invalid or inconsistent value.
  void validate() const;
  // Flow list for one run; "random" CCAs come from a generator keyed on
  // (seed, flow_id).
  std::vector<sim::FlowConfig> resolve_flows(std::uint64_t seed) const;
};

RunConfig default_config();
// Unknown sections or keys, a missing or wrong schema_version, and
// unparsable values raise ConfigError naming the section and key.
RunConfig parse_config(std::istream& is, const std::string& origin);
RunConfig load_config(const std::string& path);
// Every key, in the order parse_config documents them.
std::string render_config(const RunConfig& cfg);

std::string controller_name(Controller c);

}  // namespace tcpllm::config
