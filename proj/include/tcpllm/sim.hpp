#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "tcpllm/cca.hpp"

namespace tcpllm::sim {

struct SwitchCommand {
  double time;
  CcaId cca;
};

struct FlowConfig {
  int flow_id = 0;
  CcaId initial_cca = CcaId::Cubic;
  double start_time = 0.0;
  std::vector<SwitchCommand> switch_schedule;
};

struct SimConfig {
  LinkConfig link;
  CcaParams cca;
  double duration_s = 100.0;
  double dt_s = 0.01;
  double sample_interval_s = 1.0;

  void validate() const;
  std::int64_t steps_per_sample() const;
  std::int64_t total_steps() const;
};

struct MetricSample {
  double time = 0.0;
  int flow_id = 0;
  CcaId cca = CcaId::Cubic;
  double throughput = 0.0;  // Mbps
  double loss_rate = 0.0;   // fraction
  double rtt = 0.0;         // ms
  double sending_rate = 0.0;  // Mbps
};

struct SwitchEvent {
  double time;
  int flow_id;
  CcaId from;
  CcaId to;
};

struct ScenarioTrace {
  LinkConfig link;
  double duration_s = 0.0;
  double sample_interval_s = 1.0;
  std::vector<int> flow_ids;
  std::vector<std::vector<MetricSample>> samples;  // parallel to flow_ids
  std::vector<SwitchEvent> switch_events;

  const std::vector<MetricSample>& flow(int flow_id) const;  // throws LookupError
  std::size_t flow_index(int flow_id) const;
};

// Per-flow result of one fluid step.
struct StepStats {
  bool active = false;
  double sent_mbit = 0.0;
  double delivered_mbit = 0.0;
  double dropped_mbit = 0.0;
};

struct Accounting {
  double sent_mbit = 0.0;
  double delivered_mbit = 0.0;
  double dropped_mbit = 0.0;
  double queued_mbit = 0.0;
};

// One bottleneck FIFO shared by N flows, advanced in fixed dt steps. The
// object is a plain value: copying it forks an independent simulation.
class Simulation {
 public:
  Simulation(SimConfig cfg, std::vector<FlowConfig> flows, std::uint64_t seed);

  // Advances one dt step and returns per-flow stats (indexed like flows).
  const std::vector<StepStats>& step();
  // Steps until the next sampling boundary; returns false once finished.
  bool advance_sample();
  bool finished() const { return step_index_ >= cfg_.total_steps(); }

  // Replaces the flow's controller before the next step; the event is
  // recorded at the current boundary.
  void switch_cca(int flow_id, CcaId cca);

  double now() const;
  const SimConfig& config() const { return cfg_; }
  std::size_t num_flows() const { return flows_.size(); }
  int flow_id(std::size_t index) const { return flows_[index].cfg.flow_id; }
  std::size_t flow_index(int flow_id) const;
  bool active(int flow_id) const;
  CcaId current_cca(int flow_id) const;
  double current_rate(int flow_id) const;
  double queue_mbit() const;
  double rtt_ms() const;
  Accounting accounting() const;

  const ScenarioTrace& trace() const { return trace_; }
  ScenarioTrace take_trace() { return std::move(trace_); }

 private:
  struct FlowState {
    FlowConfig cfg;
    bool active = false;
    CcaId cca;
    Controller ctl;
    std::mt19937_64 rng;
    double queue = 0.0;
    double last_rtt = 0.0;
    double min_rtt = 1e300;
    std::size_t next_scheduled = 0;
    double acc_sent = 0.0;
    double acc_delivered = 0.0;
    double acc_dropped = 0.0;
    double acc_rtt = 0.0;
    std::int64_t acc_steps = 0;
  };

  Controller make_controller(FlowState& f, CcaId cca, bool handover);
  void apply_switch(FlowState& f, CcaId cca);
  void emit_samples();

  SimConfig cfg_;
  std::vector<FlowState> flows_;
  std::int64_t step_index_ = 0;
  double rtt_ms_;
  std::vector<StepStats> last_;
  Accounting totals_;
  ScenarioTrace trace_;
};

// Runs `flows` with their switch schedules only.
ScenarioTrace run_scenario(const SimConfig& cfg, const std::vector<FlowConfig>& flows, std::uint64_t seed);

// Runs with a hook invoked at every sampling boundary; the hook may switch CCAs.
ScenarioTrace run_closed_loop(const SimConfig& cfg, const std::vector<FlowConfig>& flows, std::uint64_t seed,
                              const std::function<void(Simulation&)>& on_sample);

// Trace CSV (`time_s,flow_id,cca,...`) and switch-event sidecar CSV.
void write_trace_csv(std::ostream& os, const ScenarioTrace& trace);
void write_switch_csv(std::ostream& os, const ScenarioTrace& trace);
void write_trace_files(const std::string& trace_path, const std::string& switch_path, const ScenarioTrace& trace);
// Parses a trace CSV; errors name the offending line.
ScenarioTrace read_trace_csv(std::istream& is, const std::string& origin);
ScenarioTrace read_trace_file(const std::string& path);
std::vector<SwitchEvent> read_switch_csv(std::istream& is, const std::string& origin);
ScenarioTrace read_trace_files(const std::string& trace_path, const std::string& switch_path);

std::string format_double(double v);

}  // namespace tcpllm::sim
