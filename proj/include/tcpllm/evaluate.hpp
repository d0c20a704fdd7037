#pragma once

#include <cstdint>
#include <iosfwd>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tcpllm/policy.hpp"
#include "tcpllm/sim.hpp"
#include "tcpllm/telemetry.hpp"

namespace tcpllm::eval {

struct Scenario {
  std::string name;
  std::vector<sim::FlowConfig> flows;
};

inline const std::vector<std::string> kScenarioNames{"cubic-bbr", "pcc-bbr", "bbr-pcc"};
// Two flows starting at t = 0 running the named CCAs, no schedule.
Scenario scenario_by_name(const std::string& name);

struct ArmConfig {
  double switch_interval_s = 5.0;
  double settle_s = 10.0;
  telemetry::OracleConfig oracle;
  telemetry::DetectorConfig detector;
};

struct FlowSummary {
  int flow_id = 0;
  sim::CcaId initial = sim::CcaId::Cubic;
  sim::CcaId final = sim::CcaId::Cubic;
  double median_throughput = 0.0;
  double median_rtt = 0.0;
  double median_loss = 0.0;
  double mean_throughput = 0.0;
  double mean_rtt = 0.0;
  double mean_loss = 0.0;
  bool starved = false;
};

struct ArmResult {
  std::string arm;
  sim::ScenarioTrace trace;
  std::vector<model::Decision> decisions;
  // Metrics use samples with time > segment_start: the first realized
  // switch (or 0) plus the settle time.
  double segment_start = 0.0;
  double jain_mean = 0.0;
  std::vector<std::pair<double, double>> jain_series;
  std::set<telemetry::CcaPair> incompatible;
  std::set<int> starved;
  std::vector<FlowSummary> flows;
};

struct Comparison {
  std::string scenario;
  std::vector<ArmResult> arms;  // static, oracle, policy
  const ArmResult& arm(const std::string& name) const;
};

sim::ScenarioTrace run_oracle(const sim::SimConfig& cfg, const std::vector<sim::FlowConfig>& flows, std::uint64_t seed,
                              const ArmConfig& arm);

// Closed loop: every switch interval each active flow's history is fed to
// decide() and the chosen CCA deployed.
ArmResult evaluate_policy(const model::Policy& policy, const sim::SimConfig& cfg,
                          const std::vector<sim::FlowConfig>& flows, std::uint64_t seed, const ArmConfig& arm);

ArmResult summarize(const std::string& arm_name, sim::ScenarioTrace trace, const ArmConfig& arm,
                    std::vector<model::Decision> decisions = {});

// Runs the static, oracle and (when `policy` is non-null) policy arms on
// separate threads.
Comparison compare(const model::Policy* policy, const sim::SimConfig& cfg, const Scenario& scenario,
                   std::uint64_t seed, const ArmConfig& arm);

std::string comparison_json(const Comparison& c);
void write_decisions_csv(std::ostream& os, const std::vector<model::Decision>& decisions);

// Sorted values with cumulative fraction i/n.
std::vector<std::pair<double, double>> empirical_cdf(std::vector<double> values);
// Linear-interpolated quantile of unsorted values.
double quantile(std::vector<double> values, double q);
double median(std::vector<double> values);

// Oracle-arm episodes over every ordered pair of CCAs, `seeds` seeds each.
telemetry::ExperiencePool oracle_pool(const sim::SimConfig& cfg, std::size_t seeds, std::uint64_t base_seed,
                                      const ArmConfig& arm);

}  // namespace tcpllm::eval
