#pragma once

#include <string>
#include <vector>

#include "tcpllm/evaluate.hpp"

namespace tcpllm::eval {

inline const std::vector<std::string> kArmNames{"static", "oracle", "policy"};
inline const std::vector<std::string> kMetricNames{"throughput_mbps", "rtt_ms", "loss_rate"};

// Segment samples of one flow for a metric name above.
std::vector<double> segment_values(const ArmResult& arm, int flow_id, const std::string& metric);

// Writes `<dir>/cdf_<metric>_flow<id>.csv` (value,fraction) for every flow
// and metric plus `<dir>/cdf_jain.csv`; returns the paths written.
std::vector<std::string> write_cdf_csvs(const std::string& dir, const ArmResult& arm);

// arm,flow_id,final_cca,metric,min,q1,median,q3,max
void write_box_csv(const std::string& path, const std::vector<ArmResult>& arms);

// Fixed-width table: one row per arm and flow with the three metric
// medians, plus per-arm Jain mean, starved flows and incompatible pairs.
std::string summary_table(const std::vector<ArmResult>& arms);

// Loads `<dir>/<arm>/trace.csv` and `switches.csv` for each arm name and
// summarizes it; missing files raise ConfigError.
std::vector<ArmResult> load_arms(const std::string& dir, const ArmConfig& arm, const sim::LinkConfig& link);

}  // namespace tcpllm::eval
