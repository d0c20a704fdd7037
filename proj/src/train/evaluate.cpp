#include "tcpllm/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <ostream>

#include <json.hpp>

#include "tcpllm/errors.hpp"

namespace tcpllm::eval {

using nlohmann::json;
using sim::CcaId;

Scenario scenario_by_name(const std::string& name) {
  auto make = [&](CcaId a, CcaId b) {
    Scenario s;
    s.name = name;
    s.flows = {sim::FlowConfig{0, a, 0.0, {}}, sim::FlowConfig{1, b, 0.0, {}}};
    return s;
  };
  if (name == "cubic-bbr") return make(CcaId::Cubic, CcaId::Bbr);
  if (name == "pcc-bbr") return make(CcaId::Pcc, CcaId::Bbr);
  if (name == "bbr-pcc") return make(CcaId::Bbr, CcaId::Pcc);
  throw ConfigError("unknown scenario '" + name + "' (expected cubic-bbr, pcc-bbr or bbr-pcc)");
}

const ArmResult& Comparison::arm(const std::string& name) const {
  for (const auto& a : arms) {
    if (a.arm == name) return a;
  }
  throw LookupError("comparison has no arm '" + name + "'");
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw DegenerateInputError("quantile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

std::vector<std::pair<double, double>> empirical_cdf(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  std::vector<std::pair<double, double>> out;
  const double n = static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out.emplace_back(values[i], static_cast<double>(i + 1) / n);
  return out;
}

sim::ScenarioTrace run_oracle(const sim::SimConfig& cfg, const std::vector<sim::FlowConfig>& flows, std::uint64_t seed,
                              const ArmConfig& arm) {
  return sim::run_closed_loop(cfg, flows, seed, [&](sim::Simulation& s) {
    if (!telemetry::is_decision_time(s.now(), arm.switch_interval_s)) return;
    for (const auto& [id, cca] : telemetry::oracle_decisions(s, arm.oracle)) {
      if (cca != s.current_cca(id)) s.switch_cca(id, cca);
    }
  });
}

ArmResult evaluate_policy(const model::Policy& policy, const sim::SimConfig& cfg,
                          const std::vector<sim::FlowConfig>& flows, std::uint64_t seed, const ArmConfig& arm) {
  std::vector<model::Decision> decisions;
  auto trace = sim::run_closed_loop(cfg, flows, seed, [&](sim::Simulation& s) {
    if (!telemetry::is_decision_time(s.now(), arm.switch_interval_s)) return;
    std::vector<std::pair<int, CcaId>> chosen;
    for (std::size_t i = 0; i < s.num_flows(); ++i) {
      const int id = s.flow_id(i);
      if (!s.active(id)) continue;
      const auto& series = s.trace().samples[i];
      if (series.empty()) continue;
      std::vector<std::array<double, 4>> states;
      std::vector<CcaId> ccas;
      for (const auto& m : series) {
        states.push_back({m.throughput, m.loss_rate, m.rtt, m.sending_rate});
        ccas.push_back(m.cca);
      }
      const auto w = model::decision_window(policy, states, ccas);
      model::Decision d = policy.decide(w, id, s.now());
      chosen.emplace_back(id, d.chosen);
      decisions.push_back(d);
    }
    for (const auto& [id, cca] : chosen) {
      if (cca != s.current_cca(id)) s.switch_cca(id, cca);
    }
  });
  return summarize("policy", std::move(trace), arm, std::move(decisions));
}

ArmResult summarize(const std::string& arm_name, sim::ScenarioTrace trace, const ArmConfig& arm,
                    std::vector<model::Decision> decisions) {
  ArmResult r;
  r.arm = arm_name;
  r.decisions = std::move(decisions);
  double first_switch = 0.0;
  if (!trace.switch_events.empty()) {
    first_switch = trace.switch_events.front().time;
    for (const auto& e : trace.switch_events) first_switch = std::min(first_switch, e.time);
  }
  r.segment_start = first_switch + arm.settle_s;
  r.jain_series = telemetry::jain_series(trace);
  double js = 0.0;
  std::size_t jn = 0;
  for (const auto& [t, j] : r.jain_series) {
    if (t > r.segment_start + 1e-9) {
      js += j;
      ++jn;
    }
  }
  r.jain_mean = jn ? js / static_cast<double>(jn) : 0.0;
  r.incompatible = telemetry::detect_incompatibility(trace, arm.detector, r.segment_start, trace.duration_s);
  r.starved = telemetry::starved_flows(trace, arm.detector, r.segment_start, trace.duration_s);
  for (std::size_t i = 0; i < trace.flow_ids.size(); ++i) {
    const auto& series = trace.samples[i];
    FlowSummary f;
    f.flow_id = trace.flow_ids[i];
    if (!series.empty()) {
      f.initial = series.front().cca;
      f.final = series.back().cca;
    }
    std::vector<double> thr, rtt, loss;
    for (const auto& m : series) {
      if (m.time <= r.segment_start + 1e-9) continue;
      thr.push_back(m.throughput);
      rtt.push_back(m.rtt);
      loss.push_back(m.loss_rate);
    }
    if (!thr.empty()) {
      auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
      };
      f.median_throughput = median(thr);
      f.median_rtt = median(rtt);
      f.median_loss = median(loss);
      f.mean_throughput = mean(thr);
      f.mean_rtt = mean(rtt);
      f.mean_loss = mean(loss);
    }
    f.starved = r.starved.count(f.flow_id) != 0;
    r.flows.push_back(f);
  }
  r.trace = std::move(trace);
  return r;
}

Comparison compare(const model::Policy* policy, const sim::SimConfig& cfg, const Scenario& scenario,
                   std::uint64_t seed, const ArmConfig& arm) {
  Comparison c;
  c.scenario = scenario.name;
  auto st = std::async(std::launch::async,
                       [&] { return summarize("static", sim::run_scenario(cfg, scenario.flows, seed), arm); });
  auto orc = std::async(std::launch::async,
                        [&] { return summarize("oracle", run_oracle(cfg, scenario.flows, seed, arm), arm); });
  std::future<ArmResult> pol;
  if (policy) {
    pol = std::async(std::launch::async, [&] { return evaluate_policy(*policy, cfg, scenario.flows, seed, arm); });
  }
  c.arms.push_back(st.get());
  c.arms.push_back(orc.get());
  if (policy) c.arms.push_back(pol.get());
  return c;
}

std::string comparison_json(const Comparison& c) {
  json j;
  j["scenario"] = c.scenario;
  json arms = json::object();
  for (const auto& a : c.arms) {
    json ja;
    ja["segment_start_s"] = a.segment_start;
    ja["jain_mean"] = a.jain_mean;
    json series = json::array();
    for (const auto& [t, v] : a.jain_series) series.push_back({t, v});
    ja["jain_series"] = std::move(series);
    json inc = json::array();
    for (const auto& [x, y] : a.incompatible) {
      inc.push_back({std::string(sim::cca_name(x)), std::string(sim::cca_name(y))});
    }
    ja["incompatible_pairs"] = std::move(inc);
    ja["starved_flows"] = a.starved;
    json flows = json::array();
    for (const auto& f : a.flows) {
      flows.push_back({{"flow_id", f.flow_id},
                       {"initial_cca", std::string(sim::cca_name(f.initial))},
                       {"final_cca", std::string(sim::cca_name(f.final))},
                       {"median_throughput_mbps", f.median_throughput},
                       {"median_rtt_ms", f.median_rtt},
                       {"median_loss_rate", f.median_loss},
                       {"mean_throughput_mbps", f.mean_throughput},
                       {"mean_rtt_ms", f.mean_rtt},
                       {"mean_loss_rate", f.mean_loss},
                       {"starved", f.starved}});
    }
    ja["flows"] = std::move(flows);
    json sw = json::array();
    for (const auto& e : a.trace.switch_events) {
      sw.push_back({{"time_s", e.time},
                    {"flow_id", e.flow_id},
                    {"from", std::string(sim::cca_name(e.from))},
                    {"to", std::string(sim::cca_name(e.to))}});
    }
    ja["switch_events"] = std::move(sw);
    ja["decisions"] = a.decisions.size();
    arms[a.arm] = std::move(ja);
  }
  j["arms"] = std::move(arms);
  return j.dump(2);
}

void write_decisions_csv(std::ostream& os, const std::vector<model::Decision>& decisions) {
  os << "time_s,flow_id,chosen_cca,logit_cubic,logit_bbr,logit_pcc,latency_s\n";
  for (const auto& d : decisions) {
    os << sim::format_double(d.time_s) << ',' << d.flow_id << ',' << sim::cca_name(d.chosen);
    for (float l : d.logits) os << ',' << sim::format_double(l);
    os << ',' << sim::format_double(d.wall_time_s) << '\n';
  }
}

telemetry::ExperiencePool oracle_pool(const sim::SimConfig& cfg, std::size_t seeds, std::uint64_t base_seed,
                                      const ArmConfig& arm) {
  telemetry::ExperiencePool pool;
  for (std::size_t s = 0; s < seeds; ++s) {
    for (CcaId a : sim::kAllCcas) {
      for (CcaId b : sim::kAllCcas) {
        const std::uint64_t seed = base_seed + s;
        const std::vector<sim::FlowConfig> flows{{0, a, 0.0, {}}, {1, b, 0.0, {}}};
        const std::string episode = "oracle-" + std::string(sim::cca_name(a)) + "-" + std::string(sim::cca_name(b)) +
                                    "-s" + std::to_string(seed);
        pool.append(telemetry::collect_experience(run_oracle(cfg, flows, seed, arm), "oracle", episode));
      }
    }
  }
  return pool;
}

}  // namespace tcpllm::eval
