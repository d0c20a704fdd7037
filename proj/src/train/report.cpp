#include "tcpllm/report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tcpllm/errors.hpp"

namespace tcpllm::eval {

namespace fs = std::filesystem;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << text;
  if (!os.good()) throw IoError("write failed for " + path);
}

std::string cdf_text(const std::vector<std::pair<double, double>>& cdf) {
  std::string out = "value,fraction\n";
  for (const auto& [v, f] : cdf) out += sim::format_double(v) + "," + sim::format_double(f) + "\n";
  return out;
}

std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}

std::string num(double v, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

}  // namespace

std::vector<double> segment_values(const ArmResult& arm, int flow_id, const std::string& metric) {
  std::vector<double> out;
  for (const auto& m : arm.trace.flow(flow_id)) {
    if (m.time <= arm.segment_start + 1e-9) continue;
    if (metric == "throughput_mbps") out.push_back(m.throughput);
    else if (metric == "rtt_ms") out.push_back(m.rtt);
    else if (metric == "loss_rate") out.push_back(m.loss_rate);
    else throw LookupError("unknown metric '" + metric + "'");
  }
  return out;
}

std::vector<std::string> write_cdf_csvs(const std::string& dir, const ArmResult& arm) {
  fs::create_directories(dir);
  std::vector<std::string> paths;
  for (int id : arm.trace.flow_ids) {
    for (const auto& metric : kMetricNames) {
      const std::string path = (fs::path(dir) / ("cdf_" + metric + "_flow" + std::to_string(id) + ".csv")).string();
      write_text(path, cdf_text(empirical_cdf(segment_values(arm, id, metric))));
      paths.push_back(path);
    }
  }
  std::vector<double> jain;
  for (const auto& [t, j] : arm.jain_series) {
    if (t > arm.segment_start + 1e-9) jain.push_back(j);
  }
  const std::string path = (fs::path(dir) / "cdf_jain.csv").string();
  write_text(path, cdf_text(empirical_cdf(jain)));
  paths.push_back(path);
  return paths;
}

void write_box_csv(const std::string& path, const std::vector<ArmResult>& arms) {
  std::string out = "arm,flow_id,final_cca,metric,min,q1,median,q3,max\n";
  for (const auto& a : arms) {
    for (const auto& f : a.flows) {
      for (const auto& metric : kMetricNames) {
        const auto v = segment_values(a, f.flow_id, metric);
        if (v.empty()) continue;
        out += a.arm + "," + std::to_string(f.flow_id) + "," + std::string(sim::cca_name(f.final)) + "," + metric;
        for (double q : {0.0, 0.25, 0.5, 0.75, 1.0}) out += "," + sim::format_double(quantile(v, q));
        out += "\n";
      }
    }
  }
  write_text(path, out);
}

std::string summary_table(const std::vector<ArmResult>& arms) {
  std::ostringstream os;
  os << pad("arm", 8) << pad("flow", 6) << pad("cca", 12) << pad("thr_med_mbps", 14) << pad("rtt_med_ms", 12)
     << pad("loss_med", 10) << "starved\n";
  for (const auto& a : arms) {
    for (const auto& f : a.flows) {
      const std::string cca = std::string(sim::cca_name(f.initial)) +
                              (f.final != f.initial ? "->" + std::string(sim::cca_name(f.final)) : "");
      os << pad(a.arm, 8) << pad(std::to_string(f.flow_id), 6) << pad(cca, 12) << pad(num(f.median_throughput, 2), 14)
         << pad(num(f.median_rtt, 2), 12) << pad(num(f.median_loss, 4), 10) << (f.starved ? "yes" : "no") << '\n';
    }
  }
  os << '\n' << pad("arm", 8) << pad("segment_s", 11) << pad("jain_mean", 11) << "incompatible\n";
  for (const auto& a : arms) {
    std::string inc;
    for (const auto& [x, y] : a.incompatible) {
      inc += (inc.empty() ? "" : " ") + std::string(sim::cca_name(x)) + "/" + std::string(sim::cca_name(y));
    }
    os << pad(a.arm, 8) << pad(num(a.segment_start, 0), 11) << pad(num(a.jain_mean, 3), 11)
       << (inc.empty() ? "-" : inc) << '\n';
  }
  return os.str();
}

std::vector<ArmResult> load_arms(const std::string& dir, const ArmConfig& arm, const sim::LinkConfig& link) {
  std::vector<ArmResult> out;
  for (const auto& name : kArmNames) {
    const fs::path base = fs::path(dir) / name;
    const fs::path trace = base / "trace.csv", switches = base / "switches.csv";
    if (!fs::exists(trace) || !fs::exists(switches)) {
      throw ConfigError("missing " + name + " arm outputs under " + dir + " (run compare first)");
    }
    sim::ScenarioTrace t = sim::read_trace_files(trace.string(), switches.string());
    t.link = link;
    out.push_back(summarize(name, std::move(t), arm));
  }
  return out;
}

}  // namespace tcpllm::eval
