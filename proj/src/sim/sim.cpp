#include "tcpllm/sim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "tcpllm/errors.hpp"

namespace tcpllm::sim {

namespace {

constexpr double kTimeEps = 1e-9;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void SimConfig::validate() const {
  link.validate();
  if (!(duration_s > 0.0)) throw ConfigError("duration must be > 0");
  if (!(dt_s > 0.0)) throw ConfigError("dt must be > 0");
  if (!(sample_interval_s > 0.0)) throw ConfigError("sample interval must be > 0");
  const double ratio = sample_interval_s / dt_s;
  if (std::abs(ratio - std::round(ratio)) > 1e-6 || std::round(ratio) < 1.0) {
    throw ConfigError("dt must divide the sampling interval");
  }
  if (cca.bbr.probe_gains.empty()) throw ConfigError("bbr probe_gains must not be empty");
  if (cca.bbr.bw_window_steps < 1) throw ConfigError("bbr bw_window_steps must be >= 1");
  if (cca.pcc.monitor_steps < 1) throw ConfigError("pcc monitor_steps must be >= 1");
  if (!(cca.cubic.beta > 0.0 && cca.cubic.beta < 1.0)) throw ConfigError("cubic beta must lie in (0, 1)");
  if (!(cca.cubic.c > 0.0)) throw ConfigError("cubic c must be > 0");
  if (!(cca.min_rate_mbps > 0.0)) throw ConfigError("min_rate must be > 0");
}

std::int64_t SimConfig::steps_per_sample() const {
  return static_cast<std::int64_t>(std::llround(sample_interval_s / dt_s));
}

std::int64_t SimConfig::total_steps() const {
  const auto per = steps_per_sample();
  const auto samples = static_cast<std::int64_t>(std::floor(duration_s / sample_interval_s + kTimeEps));
  return samples * per;
}

const std::vector<MetricSample>& ScenarioTrace::flow(int flow_id) const { return samples[flow_index(flow_id)]; }

std::size_t ScenarioTrace::flow_index(int flow_id) const {
  for (std::size_t i = 0; i < flow_ids.size(); ++i) {
    if (flow_ids[i] == flow_id) return i;
  }
  throw LookupError("unknown flow_id " + std::to_string(flow_id));
}

Simulation::Simulation(SimConfig cfg, std::vector<FlowConfig> flows, std::uint64_t seed)
    : cfg_(std::move(cfg)), rtt_ms_(cfg_.link.base_rtt_ms) {
  cfg_.validate();
  for (std::size_t i = 0; i < flows.size(); ++i) {
    const auto& fc = flows[i];
    for (std::size_t j = 0; j < i; ++j) {
      if (flows[j].flow_id == fc.flow_id) throw ConfigError("duplicate flow_id " + std::to_string(fc.flow_id));
    }
    if (fc.start_time < 0.0 || fc.start_time >= cfg_.duration_s) {
      throw ConfigError("flow " + std::to_string(fc.flow_id) + " start_time outside the episode");
    }
    for (std::size_t k = 0; k < fc.switch_schedule.size(); ++k) {
      const double t = fc.switch_schedule[k].time;
      if (k > 0 && !(t > fc.switch_schedule[k - 1].time)) {
        throw ConfigError("flow " + std::to_string(fc.flow_id) + " switch times must be strictly increasing");
      }
      if (t < fc.start_time) {
        throw ConfigError("flow " + std::to_string(fc.flow_id) + " switch scheduled before the flow starts");
      }
    }
  }
  trace_.link = cfg_.link;
  trace_.duration_s = cfg_.duration_s;
  trace_.sample_interval_s = cfg_.sample_interval_s;
  for (auto& fc : flows) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(fc.flow_id) + 1)));
    CcaId cca = fc.initial_cca;
    FlowState f{std::move(fc), false, cca, Cubic(cfg_.cca.cubic, cfg_.link, 0.0), std::move(rng)};
    f.last_rtt = cfg_.link.base_rtt_ms;
    trace_.flow_ids.push_back(f.cfg.flow_id);
    flows_.push_back(std::move(f));
  }
  trace_.samples.resize(flows_.size());
  last_.resize(flows_.size());
}

double Simulation::now() const { return static_cast<double>(step_index_) * cfg_.dt_s; }

std::size_t Simulation::flow_index(int flow_id) const {
  for (std::size_t i = 0; i < flows_.size(); ++i) {
    if (flows_[i].cfg.flow_id == flow_id) return i;
  }
  throw LookupError("unknown flow_id " + std::to_string(flow_id));
}

bool Simulation::active(int flow_id) const { return flows_[flow_index(flow_id)].active; }
CcaId Simulation::current_cca(int flow_id) const { return flows_[flow_index(flow_id)].cca; }

double Simulation::current_rate(int flow_id) const {
  const auto& f = flows_[flow_index(flow_id)];
  if (!f.active) return 0.0;
  return std::visit([](const auto& c) { return c.rate_mbps(); }, f.ctl);
}

double Simulation::queue_mbit() const {
  double q = 0.0;
  for (const auto& f : flows_) q += f.queue;
  return q;
}

double Simulation::rtt_ms() const { return rtt_ms_; }

Accounting Simulation::accounting() const {
  Accounting a = totals_;
  a.queued_mbit = queue_mbit();
  return a;
}

Controller Simulation::make_controller(FlowState& f, CcaId cca, bool handover) {
  const double t = now();
  const auto& p = cfg_.cca;
  if (!handover) {
    switch (cca) {
      case CcaId::Cubic:
        return Cubic(p.cubic, cfg_.link, t);
      case CcaId::Bbr:
        return Bbr(p.bbr, cfg_.link, p.min_rate_mbps, t, f.rng);
      case CcaId::Pcc:
        return Pcc(p.pcc, p.min_rate_mbps, f.rng);
    }
  }
  const double rate = std::visit([](const auto& c) { return c.rate_mbps(); }, f.ctl);
  const double min_rtt = f.min_rtt < 1e299 ? f.min_rtt : f.last_rtt;
  switch (cca) {
    case CcaId::Cubic:
      return Cubic::handover(p.cubic, cfg_.link, t, rate, f.last_rtt);
    case CcaId::Bbr:
      return Bbr::handover(p.bbr, cfg_.link, p.min_rate_mbps, t, f.rng, rate, f.last_rtt, min_rtt);
    case CcaId::Pcc:
      return Pcc::handover(p.pcc, p.min_rate_mbps, f.rng, rate);
  }
  throw ContractError("unreachable CCA");
}

void Simulation::apply_switch(FlowState& f, CcaId cca) {
  trace_.switch_events.push_back({now(), f.cfg.flow_id, f.cca, cca});
  if (cca == f.cca) return;
  f.ctl = make_controller(f, cca, true);
  f.cca = cca;
}

void Simulation::switch_cca(int flow_id, CcaId cca) {
  auto& f = flows_[flow_index(flow_id)];
  if (!f.active) throw ContractError("switch_cca: flow " + std::to_string(flow_id) + " is not active");
  apply_switch(f, cca);
}

const std::vector<StepStats>& Simulation::step() {
  if (finished()) throw ContractError("step: simulation already finished");
  const double t0 = now();
  const double dt = cfg_.dt_s;
  for (auto& f : flows_) {
    if (!f.active && f.cfg.start_time <= t0 + kTimeEps) {
      f.active = true;
      f.ctl = make_controller(f, f.cca, false);
    }
    while (f.active && f.next_scheduled < f.cfg.switch_schedule.size() &&
           f.cfg.switch_schedule[f.next_scheduled].time <= t0 + kTimeEps) {
      apply_switch(f, f.cfg.switch_schedule[f.next_scheduled].cca);
      ++f.next_scheduled;
    }
  }

  const double cap = cfg_.link.capacity_mbps;
  const double bmax = cfg_.link.buffer_mbit();
  const std::size_t n = flows_.size();
  std::vector<double> arrive(n, 0.0);
  double q_total = 0.0;
  double a_total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& f = flows_[i];
    if (f.active) arrive[i] = std::visit([](const auto& c) { return c.rate_mbps(); }, f.ctl) * dt;
    q_total += f.queue;
    a_total += arrive[i];
  }
  const double served = std::min(cap * dt, q_total + a_total);
  const double dropped = std::max(0.0, q_total + a_total - served - bmax);
  std::vector<double> drop(n, 0.0), backlog(n, 0.0);
  double b_total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    drop[i] = a_total > 0.0 ? dropped * (arrive[i] / a_total) : 0.0;
    backlog[i] = flows_[i].queue + arrive[i] - drop[i];
    b_total += backlog[i];
  }
  const double share = b_total > 0.0 ? std::min(1.0, served / b_total) : 0.0;
  double q_after = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double out = backlog[i] * share;
    flows_[i].queue = backlog[i] - out;
    q_after += flows_[i].queue;
    last_[i] = StepStats{flows_[i].active, arrive[i], out, drop[i]};
  }
  rtt_ms_ = cfg_.link.base_rtt_ms + q_after / cap * 1000.0;
  ++step_index_;
  const double t1 = now();

  for (std::size_t i = 0; i < n; ++i) {
    auto& f = flows_[i];
    const auto& s = last_[i];
    totals_.sent_mbit += s.sent_mbit;
    totals_.delivered_mbit += s.delivered_mbit;
    totals_.dropped_mbit += s.dropped_mbit;
    if (!f.active) continue;
    const Feedback fb{s.delivered_mbit / dt, s.sent_mbit > 0.0 ? s.dropped_mbit / s.sent_mbit : 0.0, rtt_ms_};
    f.last_rtt = rtt_ms_;
    f.min_rtt = std::min(f.min_rtt, rtt_ms_);
    std::visit(
        [&](auto& c) {
          using T = std::decay_t<decltype(c)>;
          if constexpr (std::is_same_v<T, Pcc>) {
            c.update(fb, f.rng);
          } else {
            c.update(fb, t1, dt);
          }
        },
        f.ctl);
    f.acc_sent += s.sent_mbit;
    f.acc_delivered += s.delivered_mbit;
    f.acc_dropped += s.dropped_mbit;
    f.acc_rtt += rtt_ms_;
    ++f.acc_steps;
  }
  if (step_index_ % cfg_.steps_per_sample() == 0) emit_samples();
  return last_;
}

void Simulation::emit_samples() {
  const double interval = cfg_.sample_interval_s;
  const double t = static_cast<double>(step_index_ / cfg_.steps_per_sample()) * interval;
  for (std::size_t i = 0; i < flows_.size(); ++i) {
    auto& f = flows_[i];
    if (f.acc_steps > 0) {
      MetricSample s;
      s.time = t;
      s.flow_id = f.cfg.flow_id;
      s.cca = f.cca;
      s.throughput = std::min(f.acc_delivered, f.acc_sent) / interval;
      s.loss_rate = f.acc_sent > 0.0 ? std::clamp(f.acc_dropped / f.acc_sent, 0.0, 1.0) : 0.0;
      s.rtt = f.acc_rtt / static_cast<double>(f.acc_steps);
      s.sending_rate = f.acc_sent / interval;
      trace_.samples[i].push_back(s);
    }
    f.acc_sent = f.acc_delivered = f.acc_dropped = f.acc_rtt = 0.0;
    f.acc_steps = 0;
  }
}

bool Simulation::advance_sample() {
  if (finished()) return false;
  do {
    step();
  } while (step_index_ % cfg_.steps_per_sample() != 0);
  return true;
}

ScenarioTrace run_closed_loop(const SimConfig& cfg, const std::vector<FlowConfig>& flows, std::uint64_t seed,
                              const std::function<void(Simulation&)>& on_sample) {
  Simulation sim(cfg, flows, seed);
  while (sim.advance_sample()) {
    if (on_sample && !sim.finished()) on_sample(sim);
  }
  return sim.take_trace();
}

ScenarioTrace run_scenario(const SimConfig& cfg, const std::vector<FlowConfig>& flows, std::uint64_t seed) {
  return run_closed_loop(cfg, flows, seed, {});
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_trace_csv(std::ostream& os, const ScenarioTrace& trace) {
  os << "time_s,flow_id,cca,throughput_mbps,loss_rate,rtt_ms,sending_rate_mbps\n";
  // Rows ordered by time, then by flow order.
  std::vector<const MetricSample*> rows;
  for (const auto& f : trace.samples) {
    for (const auto& s : f) rows.push_back(&s);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const MetricSample* a, const MetricSample* b) { return a->time < b->time; });
  for (const auto* s : rows) {
    os << format_double(s->time) << ',' << s->flow_id << ',' << cca_name(s->cca) << ',' << format_double(s->throughput)
       << ',' << format_double(s->loss_rate) << ',' << format_double(s->rtt) << ',' << format_double(s->sending_rate)
       << '\n';
  }
}

void write_switch_csv(std::ostream& os, const ScenarioTrace& trace) {
  os << "time_s,flow_id,from_cca,to_cca\n";
  for (const auto& e : trace.switch_events) {
    os << format_double(e.time) << ',' << e.flow_id << ',' << cca_name(e.from) << ',' << cca_name(e.to) << '\n';
  }
}

void write_trace_files(const std::string& trace_path, const std::string& switch_path, const ScenarioTrace& trace) {
  std::ofstream t(trace_path, std::ios::binary);
  if (!t) throw IoError("cannot open " + trace_path + " for writing");
  write_trace_csv(t, trace);
  std::ofstream s(switch_path, std::ios::binary);
  if (!s) throw IoError("cannot open " + switch_path + " for writing");
  write_switch_csv(s, trace);
  if (!t.good() || !s.good()) throw IoError("write failed for " + trace_path);
}

namespace {

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_number(std::string_view field, const std::string& where) {
  T v{};
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
    throw ConfigError(where + ": cannot parse '" + std::string(field) + "' as a number");
  }
  return v;
}

}  // namespace

ScenarioTrace read_trace_csv(std::istream& is, const std::string& origin) {
  static const std::string kHeader = "time_s,flow_id,cca,throughput_mbps,loss_rate,rtt_ms,sending_rate_mbps";
  std::string line;
  if (!std::getline(is, line)) throw ConfigError(origin + ":1: empty trace file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kHeader) throw ConfigError(origin + ":1: unexpected header");
  ScenarioTrace trace;
  std::map<int, std::size_t> index;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto f = split_csv(line);
    if (f.size() != 7) throw ConfigError(where + ": expected 7 fields, got " + std::to_string(f.size()));
    MetricSample s;
    s.time = parse_number<double>(f[0], where);
    s.flow_id = parse_number<int>(f[1], where);
    try {
      s.cca = cca_from_name(f[2]);
    } catch (const ConfigError&) {
      throw ConfigError(where + ": unknown CCA '" + std::string(f[2]) + "'");
    }
    s.throughput = parse_number<double>(f[3], where);
    s.loss_rate = parse_number<double>(f[4], where);
    s.rtt = parse_number<double>(f[5], where);
    s.sending_rate = parse_number<double>(f[6], where);
    if (s.loss_rate < 0.0 || s.loss_rate > 1.0) throw ConfigError(where + ": loss_rate outside [0, 1]");
    auto it = index.find(s.flow_id);
    if (it == index.end()) {
      it = index.emplace(s.flow_id, trace.flow_ids.size()).first;
      trace.flow_ids.push_back(s.flow_id);
      trace.samples.emplace_back();
    }
    auto& series = trace.samples[it->second];
    if (!series.empty() && !(s.time > series.back().time)) {
      throw ConfigError(where + ": samples for flow " + std::to_string(s.flow_id) + " are not time-ordered");
    }
    series.push_back(s);
    trace.duration_s = std::max(trace.duration_s, s.time);
  }
  for (const auto& series : trace.samples) {
    if (series.size() >= 2) {
      trace.sample_interval_s = series[1].time - series[0].time;
      break;
    }
  }
  return trace;
}

ScenarioTrace read_trace_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open trace " + path);
  return read_trace_csv(is, path);
}

std::vector<SwitchEvent> read_switch_csv(std::istream& is, const std::string& origin) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigError(origin + ":1: empty switch file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "time_s,flow_id,from_cca,to_cca") throw ConfigError(origin + ":1: unexpected header");
  std::vector<SwitchEvent> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto f = split_csv(line);
    if (f.size() != 4) throw ConfigError(where + ": expected 4 fields, got " + std::to_string(f.size()));
    try {
      out.push_back({parse_number<double>(f[0], where), parse_number<int>(f[1], where), cca_from_name(f[2]),
                     cca_from_name(f[3])});
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return out;
}

ScenarioTrace read_trace_files(const std::string& trace_path, const std::string& switch_path) {
  ScenarioTrace trace = read_trace_file(trace_path);
  std::ifstream is(switch_path, std::ios::binary);
  if (!is) throw IoError("cannot open switch events " + switch_path);
  trace.switch_events = read_switch_csv(is, switch_path);
  return trace;
}

}  // namespace tcpllm::sim
