#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace tcpllm::sim {

enum class CcaId : std::uint8_t { Cubic = 0, Bbr = 1, Pcc = 2 };

inline constexpr std::size_t kNumCcas = 3;
inline constexpr std::array<CcaId, kNumCcas> kAllCcas{CcaId::Cubic, CcaId::Bbr, CcaId::Pcc};

std::string_view cca_name(CcaId id);
CcaId cca_from_name(std::string_view name);  // throws ConfigError
CcaId cca_from_index(int index);             // throws IndexError
inline int cca_index(CcaId id) { return static_cast<int>(id); }

struct LinkConfig {
  double capacity_mbps = 100.0;
  double buffer_pkts = 50.0;
  double base_rtt_ms = 4.0;
  double packet_size_bytes = 1500.0;

  void validate() const;
  double mss_mbit() const { return packet_size_bytes * 8.0 / 1e6; }
  double buffer_mbit() const { return buffer_pkts * mss_mbit(); }
  // Seconds for an empty buffer to fill when arrivals exceed service by `excess_mbps`.
  double fill_time_s(double excess_mbps) const { return buffer_mbit() / excess_mbps; }
};

struct CubicParams {
  double c = 0.4;
  double beta = 0.7;
  double initial_window = 10.0;
  double min_window = 2.0;
};

struct BbrParams {
  std::vector<double> probe_gains{1.25, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
  double startup_gain = 2.885;
  double cwnd_gain = 2.0;
  int bw_window_steps = 10;
  double min_rtt_window_s = 1000.0;
  double min_cwnd_pkts = 3.0;
  double initial_bw_mbps = 1.0;
  int full_bw_rounds = 3;
  double full_bw_growth = 1.25;
};

struct PccParams {
  double epsilon = 0.05;
  double lambda = 10.0;
  double theta = 1.0;
  double max_step_fraction = 0.05;
  int monitor_steps = 1;
  double initial_rate_mbps = 2.0;
};

struct CcaParams {
  CubicParams cubic;
  BbrParams bbr;
  PccParams pcc;
  double min_rate_mbps = 0.1;
};

// What a flow observes at the end of one simulation step.
struct Feedback {
  double delivered_mbps = 0.0;
  double loss_rate = 0.0;
  double rtt_ms = 0.0;
};

class Cubic {
 public:
  Cubic(const CubicParams& p, const LinkConfig& link, double now);
  // Rate-continuous takeover: the window reproduces `rate_mbps` at `rtt_ms`.
  static Cubic handover(const CubicParams& p, const LinkConfig& link, double now, double rate_mbps, double rtt_ms);

  double rate_mbps() const;
  void update(const Feedback& fb, double now, double dt);
  double window() const { return w_; }
  bool in_slow_start() const { return slow_start_; }

 private:
  CubicParams p_;
  double mss_mbit_;
  double w_;
  double w_max_ = 0.0;
  double k_ = 0.0;
  double epoch_;
  double last_reduction_ = -1e300;
  double rtt_ms_;
  bool slow_start_ = true;
};

class Bbr {
 public:
  enum class Mode { Startup, Drain, ProbeBw };

  Bbr(const BbrParams& p, const LinkConfig& link, double min_rate, double now, std::mt19937_64& rng);
  static Bbr handover(const BbrParams& p, const LinkConfig& link, double min_rate, double now, std::mt19937_64& rng,
                      double rate_mbps, double rtt_ms, double min_rtt_ms);

  double rate_mbps() const;
  void update(const Feedback& fb, double now, double dt);
  Mode mode() const { return mode_; }
  double gain() const { return gain_; }
  double bw_estimate() const { return bw_; }
  double min_rtt() const { return min_rtt_; }

 private:
  BbrParams p_;
  double mss_mbit_;
  double min_rate_;
  Mode mode_ = Mode::Startup;
  std::vector<double> bw_samples_;
  double bw_;
  double full_bw_ = 0.0;
  int full_cnt_ = 0;
  double min_rtt_;
  double min_rtt_stamp_;
  double rtt_ms_;
  std::size_t phase_;
  double gain_;
};

class Pcc {
 public:
  Pcc(const PccParams& p, double min_rate, std::mt19937_64& rng);
  static Pcc handover(const PccParams& p, double min_rate, std::mt19937_64& rng, double rate_mbps);

  double rate_mbps() const;
  void update(const Feedback& fb, std::mt19937_64& rng);
  double utility(double sent, double delivered, double lost) const;
  double base_rate() const { return r_; }
  bool in_startup() const { return startup_; }

 private:
  void new_interval(std::mt19937_64& rng);

  PccParams p_;
  double min_rate_;
  double r_;
  bool startup_;
  std::optional<double> prev_u_;
  std::vector<double> plan_;
  std::vector<std::pair<double, double>> results_;
  double cur_;
  int steps_ = 0;
  double acc_sent_ = 0.0;
  double acc_delivered_ = 0.0;
  double acc_lost_ = 0.0;
};

using Controller = std::variant<Cubic, Bbr, Pcc>;

}  // namespace tcpllm::sim
