#include "tcpllm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <regex>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "tcpllm/errors.hpp"

namespace tcpllm::config {

namespace pt = boost::property_tree;

std::string controller_name(Controller c) { return c == Controller::Static ? "static" : "oracle"; }

namespace {

std::string fmt(double v) { return sim::format_double(v); }

std::string fmt(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

// One section's keys, each bound to a parser and a renderer. Parsing a key
// not listed here is an error.
class Section {
 public:
  explicit Section(std::string name) : name_(std::move(name)) {}

  Section& num(const std::string& key, double& v) {
    add(key, [&v, sec = name_, key](const std::string& s) { v = to_double(sec, key, s); }, [&v] { return fmt(v); });
    return *this;
  }
  Section& num(const std::string& key, float& v) {
    add(key, [&v, sec = name_, key](const std::string& s) { v = static_cast<float>(to_double(sec, key, s)); },
        [&v] { return fmt(v); });
    return *this;
  }
  template <class Int>
  Section& integer(const std::string& key, Int& v) {
    add(key,
        [&v, sec = name_, key](const std::string& s) {
          Int out{};
          const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
          if (s.empty() || ec != std::errc() || p != s.data() + s.size()) bad(sec, key, s, "an integer");
          v = out;
        },
        [&v] { return std::to_string(v); });
    return *this;
  }
  Section& flag(const std::string& key, bool& v) {
    add(key,
        [&v, sec = name_, key](const std::string& s) {
          if (s == "true") v = true;
          else if (s == "false") v = false;
          else bad(sec, key, s, "true or false");
        },
        [&v] { return std::string(v ? "true" : "false"); });
    return *this;
  }
  Section& text(const std::string& key, std::function<void(const std::string&)> parse,
                std::function<std::string()> render) {
    add(key, std::move(parse), std::move(render));
    return *this;
  }

  void parse(const pt::ptree& tree, const std::string& origin) const {
    for (const auto& [key, node] : tree) {
      auto it = parsers_.find(key);
      if (it == parsers_.end()) throw ConfigError(origin + ": unknown key '" + key + "' in [" + name_ + "]");
      if (!node.empty()) throw ConfigError(origin + ": [" + name_ + "] " + key + " must be a plain value");
      try {
        it->second(trim(node.data()));
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ": " + e.what());
      }
    }
  }

  void render(std::ostream& os) const {
    os << '[' << name_ << "]\n";
    for (const auto& k : order_) os << k << " = " << renderers_.at(k)() << '\n';
    os << '\n';
  }

  const std::string& name() const { return name_; }

 private:
  void add(const std::string& key, std::function<void(const std::string&)> p, std::function<std::string()> r) {
    order_.push_back(key);
    parsers_[key] = std::move(p);
    renderers_[key] = std::move(r);
  }
  [[noreturn]] static void bad(const std::string& sec, const std::string& key, const std::string& value,
                               const char* expected) {
    throw ConfigError("[" + sec + "] " + key + " = '" + value + "' is not " + expected);
  }
  static double to_double(const std::string& sec, const std::string& key, const std::string& s) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) bad(sec, key, s, "a number");
    return out;
  }

  std::string name_;
  std::vector<std::string> order_;
  std::map<std::string, std::function<void(const std::string&)>> parsers_;
  std::map<std::string, std::function<std::string()>> renderers_;
};

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    double v = 0.0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
      throw ConfigError("'" + s + "' is not a comma-separated list of numbers");
    }
    out.push_back(v);
  }
  return out;
}

std::string render_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

// "30:bbr,60:pcc"
std::vector<sim::SwitchCommand> parse_schedule(const std::string& s) {
  std::vector<sim::SwitchCommand> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("switch entry '" + item + "' is not time:cca");
    const std::string t = trim(item.substr(0, colon));
    double time = 0.0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), time);
    if (t.empty() || ec != std::errc() || p != t.data() + t.size()) {
      throw ConfigError("switch entry '" + item + "' has a bad time");
    }
    out.push_back({time, sim::cca_from_name(trim(item.substr(colon + 1)))});
  }
  return out;
}

std::string render_schedule(const std::vector<sim::SwitchCommand>& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += (i ? "," : "") + fmt(s[i].time) + ":" + std::string(sim::cca_name(s[i].cca));
  }
  return out;
}

// Sections other than [flowN], bound to the fields of `c`.
std::vector<Section> sections_for(RunConfig& c, int& schema_version) {
  std::vector<Section> s;
  s.emplace_back("meta");
  s.back()
      .integer("schema_version", schema_version)
      .text("scenario", [&c](const std::string& v) { c.scenario = v; }, [&c] { return c.scenario; })
      .integer("seed", c.seed);

  auto& link = c.sim.link;
  s.emplace_back("link");
  s.back()
      .num("capacity_mbps", link.capacity_mbps)
      .num("buffer_pkts", link.buffer_pkts)
      .num("base_rtt_ms", link.base_rtt_ms)
      .num("packet_size_bytes", link.packet_size_bytes);

  s.emplace_back("sim");
  s.back()
      .num("duration_s", c.sim.duration_s)
      .num("dt_s", c.sim.dt_s)
      .num("sample_interval_s", c.sim.sample_interval_s)
      .num("min_rate_mbps", c.sim.cca.min_rate_mbps);

  auto& cu = c.sim.cca.cubic;
  s.emplace_back("cubic");
  s.back().num("c", cu.c).num("beta", cu.beta).num("initial_window", cu.initial_window).num("min_window", cu.min_window);

  auto& bb = c.sim.cca.bbr;
  s.emplace_back("bbr");
  s.back()
      .text("probe_gains", [&bb](const std::string& v) { bb.probe_gains = parse_list(v); },
            [&bb] { return render_list(bb.probe_gains); })
      .num("startup_gain", bb.startup_gain)
      .num("cwnd_gain", bb.cwnd_gain)
      .integer("bw_window_steps", bb.bw_window_steps)
      .num("min_rtt_window_s", bb.min_rtt_window_s)
      .num("min_cwnd_pkts", bb.min_cwnd_pkts)
      .num("initial_bw_mbps", bb.initial_bw_mbps)
      .integer("full_bw_rounds", bb.full_bw_rounds)
      .num("full_bw_growth", bb.full_bw_growth);

  auto& pc = c.sim.cca.pcc;
  s.emplace_back("pcc");
  s.back()
      .num("epsilon", pc.epsilon)
      .num("lambda", pc.lambda)
      .num("theta", pc.theta)
      .num("max_step_fraction", pc.max_step_fraction)
      .integer("monitor_steps", pc.monitor_steps)
      .num("initial_rate_mbps", pc.initial_rate_mbps);

  s.emplace_back("controller");
  s.back()
      .text("mode",
            [&c](const std::string& v) {
              if (v == "static") c.controller = Controller::Static;
              else if (v == "oracle") c.controller = Controller::Oracle;
              else throw ConfigError("[controller] mode = '" + v + "' is not static or oracle");
            },
            [&c] { return controller_name(c.controller); })
      .num("switch_interval_s", c.arm.switch_interval_s)
      .num("settle_s", c.arm.settle_s);

  s.emplace_back("oracle");
  s.back().num("horizon_s", c.arm.oracle.horizon_s).num("tolerance", c.arm.oracle.tolerance);

  s.emplace_back("detector");
  s.back()
      .num("theta_fair", c.arm.detector.theta_fair)
      .num("theta_starve", c.arm.detector.theta_starve)
      .integer("window", c.arm.detector.window);

  auto& enc = c.model.encoder;
  s.emplace_back("encoder");
  s.back()
      .text("variant", [&enc](const std::string& v) { enc.variant = model::encoder_variant_from_name(v); },
            [&enc] { return std::string(model::encoder_variant_name(enc.variant)); })
      .integer("cnn_kernel", enc.cnn_kernel)
      .num("eps", enc.eps);

  auto& bk = c.model.backbone;
  s.emplace_back("backbone");
  s.back()
      .integer("layers", bk.layers)
      .integer("heads", bk.heads)
      .integer("token_dim", bk.token_dim)
      .integer("context_len", bk.context_len)
      .integer("ff_dim", bk.ff_dim)
      .text("positional", [&bk](const std::string& v) { bk.positional = v; }, [&bk] { return bk.positional; })
      .num("init_std", bk.init_std)
      .integer("pretrain_steps", c.model.pretrain_steps);

  s.emplace_back("lora");
  s.back().integer("rank", c.model.lora_rank);

  s.emplace_back("model");
  s.back()
      .integer("context_steps", c.model.context_steps)
      .flag("regression_head", c.model.regression_head)
      .integer("seed", c.model.seed);

  auto& tr = c.train;
  s.emplace_back("train");
  s.back()
      .text("mode", [&tr](const std::string& v) { tr.mode = train::mode_from_name(v); },
            [&tr] { return train::mode_name(tr.mode); })
      .text("sl_task", [&tr](const std::string& v) { tr.sl_task = train::sl_task_from_name(v); },
            [&tr] { return train::sl_task_name(tr.sl_task); })
      .num("lr", tr.lr)
      .integer("epochs", tr.epochs)
      .integer("batch_size", tr.batch_size)
      .integer("grad_accum_steps", tr.grad_accum_steps)
      .num("clip_max_norm", tr.clip_max_norm)
      .integer("window_stride", tr.window_stride)
      .integer("window_min_len", tr.window_min_len)
      .num("test_fraction", tr.test_fraction)
      .num("target_return_quantile", tr.target_return_quantile)
      .integer("seed", tr.seed)
      .flag("record_wall_time", tr.record_wall_time)
      .num("stop_test_acc", tr.stop_test_acc)
      .num("stop_test_loss", tr.stop_test_loss);
  return s;
}

Section flow_section(FlowSpec& f) {
  Section s("flow" + std::to_string(f.flow_id));
  s.text("cca",
         [&f](const std::string& v) {
           if (v == "random") f.cca.reset();
           else f.cca = sim::cca_from_name(v);
         },
         [&f] { return f.cca ? std::string(sim::cca_name(*f.cca)) : std::string("random"); })
      .num("start_time", f.start_time)
      .text("switch", [&f](const std::string& v) { f.schedule = parse_schedule(v); },
            [&f] { return render_schedule(f.schedule); });
  return s;
}

const std::regex kFlowSection("flow(0|[1-9][0-9]{0,3})");

}  // namespace

RunConfig default_config() {
  RunConfig c;
  c.flows = {FlowSpec{0, sim::CcaId::Cubic, 0.0, {}}, FlowSpec{1, sim::CcaId::Bbr, 0.0, {}}};
  return c;
}

void RunConfig::validate() const {
  if (flows.empty()) throw ConfigError("config declares no [flowN] sections");
  if (!(arm.switch_interval_s > 0.0)) throw ConfigError("[controller] switch_interval_s must be > 0");
  if (arm.settle_s < 0.0) throw ConfigError("[controller] settle_s must be >= 0");
  if (!(arm.oracle.horizon_s > 0.0)) throw ConfigError("[oracle] horizon_s must be > 0");
  if (!(arm.oracle.tolerance >= 0.0)) throw ConfigError("[oracle] tolerance must be >= 0");
  if (!(arm.detector.theta_fair > 0.0 && arm.detector.theta_fair <= 1.0)) {
    throw ConfigError("[detector] theta_fair must lie in (0, 1]");
  }
  if (!(arm.detector.theta_starve >= 0.0)) throw ConfigError("[detector] theta_starve must be >= 0");
  if (arm.detector.window == 0) throw ConfigError("[detector] window must be >= 1");
  if (model.backbone.positional != "learned") {
    throw ConfigError("[backbone] positional = '" + model.backbone.positional + "' (only 'learned' is supported)");
  }
  model.validate();
  train.validate(model);
  sim::Simulation probe(sim, resolve_flows(seed), seed);
}

std::vector<sim::FlowConfig> RunConfig::resolve_flows(std::uint64_t run_seed) const {
  std::vector<sim::FlowConfig> out;
  for (const auto& f : flows) {
    sim::FlowConfig fc;
    fc.flow_id = f.flow_id;
    fc.start_time = f.start_time;
    fc.switch_schedule = f.schedule;
    if (f.cca) {
      fc.initial_cca = *f.cca;
    } else {
      std::seed_seq sq{static_cast<std::uint32_t>(run_seed), static_cast<std::uint32_t>(run_seed >> 32),
                       static_cast<std::uint32_t>(f.flow_id), 0x43434155u};
      std::mt19937_64 rng(sq);
      fc.initial_cca = sim::cca_from_index(static_cast<int>(rng() % sim::kNumCcas));
    }
    out.push_back(fc);
  }
  return out;
}

RunConfig parse_config(std::istream& is, const std::string& origin) {
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  c.flows.clear();
  int schema = 0;
  auto sections = sections_for(c, schema);
  std::map<int, FlowSpec> flows;
  bool saw_meta = false;
  for (const auto& [name, node] : tree) {
    if (node.empty() && !node.data().empty()) {
      throw ConfigError(origin + ": key '" + name + "' appears outside any section");
    }
    std::smatch m;
    if (std::regex_match(name, m, kFlowSection)) {
      const int id = std::stoi(m[1].str());
      FlowSpec& f = flows[id];
      f.flow_id = id;
      f.cca = sim::CcaId::Cubic;
      flow_section(f).parse(node, origin);
      continue;
    }
    auto it = std::find_if(sections.begin(), sections.end(), [&](const Section& s) { return s.name() == name; });
    if (it == sections.end()) throw ConfigError(origin + ": unknown section [" + name + "]");
    it->parse(node, origin);
    if (name == "meta") saw_meta = true;
  }
  if (!saw_meta || schema == 0) throw ConfigError(origin + ": [meta] schema_version is required");
  if (schema != kSchemaVersion) {
    throw ConfigError(origin + ": schema_version " + std::to_string(schema) + " is not supported (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  for (auto& [id, f] : flows) c.flows.push_back(f);
  c.model.encoder.token_dim = c.model.backbone.token_dim;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  return parse_config(is, path);
}

std::string render_config(const RunConfig& cfg) {
  RunConfig c = cfg;
  int schema = kSchemaVersion;
  std::ostringstream os;
  auto sections = sections_for(c, schema);
  // Flows go after [detector], ahead of the model sections.
  for (const auto& s : sections) {
    s.render(os);
    if (s.name() == "detector") {
      for (auto& f : c.flows) flow_section(f).render(os);
    }
  }
  std::string out = os.str();
  while (out.size() >= 2 && out[out.size() - 1] == '\n' && out[out.size() - 2] == '\n') out.pop_back();
  return out;
}

}  // namespace tcpllm::config
