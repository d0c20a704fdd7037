#pragma once

#include <array>
#include <cstddef>
#include <deque>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tcpllm/sim.hpp"

namespace tcpllm::telemetry {

using sim::CcaId;
using sim::MetricSample;
using sim::ScenarioTrace;

// throughput_mbps / (rtt_ms + 1) - loss_rate
double compute_reward(double throughput_mbps, double rtt_ms, double loss_rate);
double compute_reward(const MetricSample& s);

// Suffix sums: R_t = sum_{i >= t} r_i.
std::vector<double> compute_returns(std::span<const double> rewards);

// (sum x)^2 / (n * sum x^2); throws DegenerateInputError on all-zero input.
double jains_index(std::span<const double> throughputs);

class FlowWindow {
 public:
  explicit FlowWindow(int flow_id, std::size_t capacity = 5);
  void push(const MetricSample& s);
  bool full() const { return samples_.size() == capacity_; }
  int flow_id() const { return flow_id_; }
  std::size_t capacity() const { return capacity_; }
  const std::deque<MetricSample>& samples() const { return samples_; }
  double mean_throughput() const;

 private:
  int flow_id_;
  std::size_t capacity_;
  std::deque<MetricSample> samples_;
};

struct FairnessVerdict {
  bool applicable = false;
  bool unfair = false;
  double jain = 1.0;
  std::vector<std::pair<int, double>> shares;  // flow_id, fraction of total window-mean throughput
};

struct DetectorConfig {
  double theta_fair = 0.8;
  double theta_starve = 0.1;
  std::size_t window = 5;
};

FairnessVerdict detect_unfairness(std::span<const FlowWindow> windows, double theta_fair = 0.8);
std::set<int> detect_starvation(std::span<const FlowWindow> windows, double capacity_mbps, double theta_starve = 0.1);

using CcaPair = std::pair<CcaId, CcaId>;  // ordered so that first <= second
// Considers non-overlapping aligned windows of `window` samples whose end
// time lies in (t_begin, t_end]. A pair is flagged iff it coexists in at
// least one window and every such window has pairwise Jain < theta_fair.
std::set<CcaPair> detect_incompatibility(const ScenarioTrace& trace, const DetectorConfig& cfg = {},
                                         double t_begin = 0.0, double t_end = 1e300);

// Flows starved in any full window ending in (t_begin, t_end].
std::set<int> starved_flows(const ScenarioTrace& trace, const DetectorConfig& cfg, double t_begin = 0.0,
                            double t_end = 1e300);

// Jain index across flows at every sample time where all flows report.
std::vector<std::pair<double, double>> jain_series(const ScenarioTrace& trace);

struct Trajectory {
  std::string source;
  std::string episode;
  int flow_id = 0;
  std::vector<double> returns;
  std::vector<std::array<double, 4>> states;  // throughput, loss, rtt, sending
  std::vector<CcaId> actions;

  std::size_t horizon() const { return states.size(); }
  std::vector<double> rewards() const;
  void validate() const;
  bool operator==(const Trajectory&) const = default;
};

// One trajectory per flow. actions[t] is the CCA in force during the interval
// after sample t, i.e. the choice made once s_t was observed.
std::vector<Trajectory> collect_experience(const ScenarioTrace& trace, const std::string& source,
                                           const std::string& episode);

class ExperiencePool {
 public:
  void append(Trajectory t);
  void append(std::vector<Trajectory> ts);
  const std::vector<Trajectory>& trajectories() const { return items_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::map<std::string, std::size_t> source_counts() const;

  void write_jsonl(std::ostream& os) const;
  void save(const std::string& path) const;
  static ExperiencePool read_jsonl(std::istream& is, const std::string& origin);
  static ExperiencePool load(const std::string& path);

 private:
  std::vector<Trajectory> items_;
};

std::string trajectory_to_json(const Trajectory& t);
Trajectory trajectory_from_json(const std::string& line);

// Exhaustive per-flow lookahead used as the oracle switcher and label source.
struct OracleConfig {
  double horizon_s = 10.0;
  // A candidate is acceptable when its score is within this fraction of the
  // best; the current CCA is kept if acceptable, else the lowest index wins.
  double tolerance = 0.2;
};

std::array<double, sim::kNumCcas> oracle_scores(const sim::Simulation& state, int flow_id, const OracleConfig& cfg);
CcaId oracle_choose(const std::array<double, sim::kNumCcas>& scores, CcaId current, double tolerance);
// Decisions for every active flow, evaluated against the same state.
std::vector<std::pair<int, CcaId>> oracle_decisions(const sim::Simulation& state, const OracleConfig& cfg);

bool is_decision_time(double t, double interval);

}  // namespace tcpllm::telemetry
