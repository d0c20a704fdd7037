#include "tcpllm/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "tcpllm/errors.hpp"

namespace tcpllm::telemetry {

using nlohmann::json;

double compute_reward(double throughput_mbps, double rtt_ms, double loss_rate) {
  return throughput_mbps / (rtt_ms + 1.0) - loss_rate;
}

double compute_reward(const MetricSample& s) { return compute_reward(s.throughput, s.rtt, s.loss_rate); }

std::vector<double> compute_returns(std::span<const double> rewards) {
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    out[i] = acc;
  }
  return out;
}

double jains_index(std::span<const double> x) {
  if (x.empty()) throw DegenerateInputError("jains_index: empty input");
  double s = 0.0, s2 = 0.0;
  for (double v : x) {
    if (v < 0.0) throw DegenerateInputError("jains_index: negative throughput");
    s += v;
    s2 += v * v;
  }
  if (s2 == 0.0) throw DegenerateInputError("jains_index: all throughputs are zero");
  return s * s / (static_cast<double>(x.size()) * s2);
}

FlowWindow::FlowWindow(int flow_id, std::size_t capacity) : flow_id_(flow_id), capacity_(capacity) {
  if (capacity == 0) throw ContractError("FlowWindow: capacity must be >= 1");
}

void FlowWindow::push(const MetricSample& s) {
  if (!samples_.empty() && !(s.time > samples_.back().time)) {
    throw ContractError("FlowWindow: samples must be time-ordered");
  }
  samples_.push_back(s);
  if (samples_.size() > capacity_) samples_.pop_front();
}

double FlowWindow::mean_throughput() const {
  if (samples_.empty()) return 0.0;
  double s = 0.0;
  for (const auto& m : samples_) s += m.throughput;
  return s / static_cast<double>(samples_.size());
}

FairnessVerdict detect_unfairness(std::span<const FlowWindow> windows, double theta_fair) {
  FairnessVerdict v;
  std::vector<double> means;
  for (const auto& w : windows) {
    if (!w.full()) continue;
    means.push_back(w.mean_throughput());
    v.shares.emplace_back(w.flow_id(), means.back());
  }
  if (means.size() < 2) return v;
  double total = 0.0;
  for (double m : means) total += m;
  for (auto& [id, share] : v.shares) share = total > 0.0 ? share / total : 0.0;
  if (total <= 0.0) return v;
  v.applicable = true;
  v.jain = jains_index(means);
  v.unfair = v.jain < theta_fair;
  return v;
}

std::set<int> detect_starvation(std::span<const FlowWindow> windows, double capacity_mbps, double theta_starve) {
  std::set<int> starved;
  if (windows.empty()) return starved;
  const double threshold = theta_starve * capacity_mbps / static_cast<double>(windows.size());
  for (const auto& w : windows) {
    if (!w.full()) continue;
    const bool all_below = std::all_of(w.samples().begin(), w.samples().end(),
                                       [&](const MetricSample& s) { return s.throughput < threshold; });
    if (all_below) starved.insert(w.flow_id());
  }
  return starved;
}

namespace {

struct WindowSlice {
  double end_time;
  // Per flow: mean throughput and the CCA if constant over the window.
  std::vector<std::optional<std::pair<double, CcaId>>> flows;
};

std::vector<WindowSlice> slice_windows(const ScenarioTrace& trace, std::size_t w, double t_begin, double t_end) {
  const double iv = trace.sample_interval_s > 0.0 ? trace.sample_interval_s : 1.0;
  const double span = iv * static_cast<double>(w);
  double last = 0.0;
  for (const auto& f : trace.samples) {
    if (!f.empty()) last = std::max(last, f.back().time);
  }
  std::vector<WindowSlice> out;
  for (std::size_t k = 1;; ++k) {
    const double end = span * static_cast<double>(k);
    const double begin = end - span;
    if (end > last + 1e-9) break;
    if (begin < t_begin - 1e-9 || end > t_end + 1e-9) continue;
    WindowSlice ws{end, {}};
    for (const auto& f : trace.samples) {
      std::vector<const MetricSample*> in;
      for (const auto& s : f) {
        if (s.time > begin + 1e-9 && s.time <= end + 1e-9) in.push_back(&s);
      }
      if (in.size() != w) {
        ws.flows.emplace_back(std::nullopt);
        continue;
      }
      const CcaId c = in.front()->cca;
      bool constant = true;
      double sum = 0.0;
      for (const auto* s : in) {
        constant = constant && s->cca == c;
        sum += s->throughput;
      }
      if (!constant) {
        ws.flows.emplace_back(std::nullopt);
      } else {
        ws.flows.emplace_back(std::make_pair(sum / static_cast<double>(w), c));
      }
    }
    out.push_back(std::move(ws));
  }
  return out;
}

}  // namespace

std::set<CcaPair> detect_incompatibility(const ScenarioTrace& trace, const DetectorConfig& cfg, double t_begin,
                                         double t_end) {
  std::map<CcaPair, std::pair<int, int>> tally;  // windows seen, windows unfair
  for (const auto& ws : slice_windows(trace, cfg.window, t_begin, t_end)) {
    std::map<CcaPair, bool> all_unfair;
    for (std::size_t i = 0; i < ws.flows.size(); ++i) {
      for (std::size_t j = i + 1; j < ws.flows.size(); ++j) {
        if (!ws.flows[i] || !ws.flows[j]) continue;
        const auto [ti, ci] = *ws.flows[i];
        const auto [tj, cj] = *ws.flows[j];
        if (ci == cj) continue;
        const CcaPair key = ci < cj ? CcaPair{ci, cj} : CcaPair{cj, ci};
        const std::array<double, 2> x{ti, tj};
        const bool unfair = (ti + tj) > 0.0 ? jains_index(x) < cfg.theta_fair : false;
        auto it = all_unfair.find(key);
        if (it == all_unfair.end()) {
          all_unfair[key] = unfair;
        } else {
          it->second = it->second && unfair;
        }
      }
    }
    for (const auto& [key, unfair] : all_unfair) {
      auto& t = tally[key];
      ++t.first;
      if (unfair) ++t.second;
    }
  }
  std::set<CcaPair> flagged;
  for (const auto& [key, t] : tally) {
    if (t.first > 0 && t.first == t.second) flagged.insert(key);
  }
  return flagged;
}

std::set<int> starved_flows(const ScenarioTrace& trace, const DetectorConfig& cfg, double t_begin, double t_end) {
  std::set<int> out;
  const auto slices = slice_windows(trace, cfg.window, t_begin, t_end);
  for (const auto& ws : slices) {
    std::vector<FlowWindow> windows;
    for (std::size_t i = 0; i < trace.samples.size(); ++i) {
      FlowWindow fw(trace.flow_ids[i], cfg.window);
      for (const auto& s : trace.samples[i]) {
        if (s.time > ws.end_time - cfg.window * trace.sample_interval_s + 1e-9 && s.time <= ws.end_time + 1e-9) {
          fw.push(s);
        }
      }
      if (fw.full()) windows.push_back(std::move(fw));
    }
    for (int id : detect_starvation(windows, trace.link.capacity_mbps, cfg.theta_starve)) out.insert(id);
  }
  return out;
}

std::vector<std::pair<double, double>> jain_series(const ScenarioTrace& trace) {
  std::map<double, std::vector<double>> by_time;
  for (const auto& f : trace.samples) {
    for (const auto& s : f) by_time[s.time].push_back(s.throughput);
  }
  std::vector<std::pair<double, double>> out;
  for (const auto& [t, xs] : by_time) {
    if (xs.size() != trace.samples.size()) continue;
    double sum = 0.0;
    for (double x : xs) sum += x;
    out.emplace_back(t, sum > 0.0 ? jains_index(xs) : 1.0);
  }
  return out;
}

std::vector<double> Trajectory::rewards() const {
  std::vector<double> r;
  r.reserve(states.size());
  for (const auto& s : states) r.push_back(compute_reward(s[0], s[2], s[1]));
  return r;
}

void Trajectory::validate() const {
  if (returns.size() != states.size() || actions.size() != states.size()) {
    throw ContractError("trajectory " + episode + "/" + std::to_string(flow_id) + ": misaligned lengths (returns " +
                        std::to_string(returns.size()) + ", states " + std::to_string(states.size()) + ", actions " +
                        std::to_string(actions.size()) + ")");
  }
}

std::vector<Trajectory> collect_experience(const ScenarioTrace& trace, const std::string& source,
                                           const std::string& episode) {
  if (trace.samples.size() != trace.flow_ids.size()) throw ContractError("collect_experience: misaligned trace");
  std::vector<Trajectory> out;
  for (std::size_t i = 0; i < trace.samples.size(); ++i) {
    const auto& f = trace.samples[i];
    Trajectory t;
    t.source = source;
    t.episode = episode;
    t.flow_id = trace.flow_ids[i];
    for (std::size_t k = 0; k < f.size(); ++k) {
      const auto& s = f[k];
      t.states.push_back({s.throughput, s.loss_rate, s.rtt, s.sending_rate});
      t.actions.push_back(k + 1 < f.size() ? f[k + 1].cca : s.cca);
    }
    t.returns = compute_returns(t.rewards());
    out.push_back(std::move(t));
  }
  return out;
}

void ExperiencePool::append(Trajectory t) {
  t.validate();
  items_.push_back(std::move(t));
}

void ExperiencePool::append(std::vector<Trajectory> ts) {
  for (auto& t : ts) append(std::move(t));
}

std::map<std::string, std::size_t> ExperiencePool::source_counts() const {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : items_) ++counts[t.source];
  return counts;
}

std::string trajectory_to_json(const Trajectory& t) {
  json j;
  j["source"] = t.source;
  j["episode"] = t.episode;
  j["flow_id"] = t.flow_id;
  j["returns"] = t.returns;
  json states = json::array();
  for (const auto& s : t.states) states.push_back({s[0], s[1], s[2], s[3]});
  j["states"] = std::move(states);
  json actions = json::array();
  for (CcaId a : t.actions) actions.push_back(sim::cca_index(a));
  j["actions"] = std::move(actions);
  return j.dump();
}

Trajectory trajectory_from_json(const std::string& line) {
  const json j = json::parse(line);
  Trajectory t;
  t.source = j.at("source").get<std::string>();
  t.episode = j.value("episode", std::string());
  t.flow_id = j.value("flow_id", 0);
  t.returns = j.at("returns").get<std::vector<double>>();
  for (const auto& s : j.at("states")) {
    if (!s.is_array() || s.size() != 4) throw ContractError("state entries must be 4-tuples");
    t.states.push_back({s[0].get<double>(), s[1].get<double>(), s[2].get<double>(), s[3].get<double>()});
  }
  for (const auto& a : j.at("actions")) t.actions.push_back(sim::cca_from_index(a.get<int>()));
  t.validate();
  return t;
}

void ExperiencePool::write_jsonl(std::ostream& os) const {
  for (const auto& t : items_) os << trajectory_to_json(t) << '\n';
}

void ExperiencePool::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_jsonl(os);
  if (!os.good()) throw IoError("write failed for " + path);
}

ExperiencePool ExperiencePool::read_jsonl(std::istream& is, const std::string& origin) {
  ExperiencePool pool;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      pool.append(trajectory_from_json(line));
    } catch (const std::exception& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return pool;
}

ExperiencePool ExperiencePool::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open pool " + path);
  return read_jsonl(is, path);
}

std::array<double, sim::kNumCcas> oracle_scores(const sim::Simulation& state, int flow_id, const OracleConfig& cfg) {
  std::array<double, sim::kNumCcas> scores{};
  const std::size_t idx = state.flow_index(flow_id);
  const double horizon_end = state.now() + cfg.horizon_s;
  for (std::size_t c = 0; c < sim::kNumCcas; ++c) {
    sim::Simulation fork = state;
    fork.switch_cca(flow_id, sim::kAllCcas[c]);
    const std::size_t before = fork.trace().samples[idx].size();
    while (fork.now() < horizon_end - 1e-9 && fork.advance_sample()) {
    }
    const auto& series = fork.trace().samples[idx];
    double total = 0.0;
    for (std::size_t k = before; k < series.size(); ++k) total += compute_reward(series[k]);
    scores[c] = total;
  }
  return scores;
}

CcaId oracle_choose(const std::array<double, sim::kNumCcas>& scores, CcaId current, double tolerance) {
  const double best = *std::max_element(scores.begin(), scores.end());
  const double floor = best - tolerance * std::abs(best);
  if (scores[static_cast<std::size_t>(sim::cca_index(current))] >= floor) return current;
  for (std::size_t c = 0; c < sim::kNumCcas; ++c) {
    if (scores[c] >= floor) return sim::kAllCcas[c];
  }
  return current;
}

std::vector<std::pair<int, CcaId>> oracle_decisions(const sim::Simulation& state, const OracleConfig& cfg) {
  std::vector<std::pair<int, CcaId>> out;
  for (std::size_t i = 0; i < state.num_flows(); ++i) {
    const int id = state.flow_id(i);
    if (!state.active(id)) continue;
    out.emplace_back(id, oracle_choose(oracle_scores(state, id, cfg), state.current_cca(id), cfg.tolerance));
  }
  return out;
}

bool is_decision_time(double t, double interval) {
  if (!(interval > 0.0) || t <= 0.0) return false;
  const double k = t / interval;
  return std::abs(k - std::round(k)) < 1e-6;
}

}  // namespace tcpllm::telemetry
