#include "tcpllm/cca.hpp"

#include <algorithm>
#include <cmath>

#include "tcpllm/errors.hpp"

namespace tcpllm::sim {

std::string_view cca_name(CcaId id) {
  switch (id) {
    case CcaId::Cubic:
      return "cubic";
    case CcaId::Bbr:
      return "bbr";
    case CcaId::Pcc:
      return "pcc";
  }
  return "?";
}

CcaId cca_from_name(std::string_view name) {
  for (CcaId id : kAllCcas) {
    if (cca_name(id) == name) return id;
  }
  throw ConfigError("unknown CCA '" + std::string(name) + "' (expected cubic, bbr or pcc)");
}

CcaId cca_from_index(int index) {
  if (index < 0 || index >= static_cast<int>(kNumCcas)) {
    throw IndexError("CCA index " + std::to_string(index) + " outside [0, 3)");
  }
  return static_cast<CcaId>(index);
}

void LinkConfig::validate() const {
  if (!(capacity_mbps > 0.0)) throw ConfigError("link capacity must be > 0");
  if (!(buffer_pkts >= 1.0)) throw ConfigError("link buffer must be >= 1 packet");
  if (!(base_rtt_ms > 0.0)) throw ConfigError("link base_rtt must be > 0");
  if (!(packet_size_bytes > 0.0)) throw ConfigError("link packet_size must be > 0");
}

// ---- Cubic ----

Cubic::Cubic(const CubicParams& p, const LinkConfig& link, double now)
    : p_(p), mss_mbit_(link.mss_mbit()), w_(p.initial_window), epoch_(now), rtt_ms_(link.base_rtt_ms) {}

Cubic Cubic::handover(const CubicParams& p, const LinkConfig& link, double now, double rate_mbps, double rtt_ms) {
  Cubic c(p, link, now);
  c.rtt_ms_ = rtt_ms;
  c.w_ = std::max(p.min_window, rate_mbps * rtt_ms / 1000.0 / c.mss_mbit_);
  c.w_max_ = c.w_;
  c.slow_start_ = false;
  return c;
}

double Cubic::rate_mbps() const { return w_ * mss_mbit_ / (rtt_ms_ / 1000.0); }

void Cubic::update(const Feedback& fb, double now, double dt) {
  rtt_ms_ = fb.rtt_ms;
  const double rtt_s = rtt_ms_ / 1000.0;
  if (fb.loss_rate > 0.0 && now - last_reduction_ >= rtt_s) {
    w_max_ = w_;
    w_ = std::max(p_.min_window, w_ * p_.beta);
    slow_start_ = false;
    epoch_ = now;
    k_ = std::cbrt(w_max_ * (1.0 - p_.beta) / p_.c);
    last_reduction_ = now;
    return;
  }
  if (slow_start_) {
    w_ *= 1.0 + dt / rtt_s;
    return;
  }
  const double t = now - epoch_;
  const double w_cubic = p_.c * std::pow(t - k_, 3.0) + w_max_;
  const double w_tcp = w_max_ * p_.beta + 3.0 * (1.0 - p_.beta) / (1.0 + p_.beta) * t / rtt_s;
  w_ = std::max({w_cubic, w_tcp, p_.min_window});
}

// ---- BBR ----

Bbr::Bbr(const BbrParams& p, const LinkConfig& link, double min_rate, double now, std::mt19937_64& rng)
    : p_(p),
      mss_mbit_(link.mss_mbit()),
      min_rate_(min_rate),
      bw_(p.initial_bw_mbps),
      min_rtt_(link.base_rtt_ms),
      min_rtt_stamp_(now),
      rtt_ms_(link.base_rtt_ms),
      phase_(static_cast<std::size_t>(rng() % p.probe_gains.size())),
      gain_(p.startup_gain) {}

Bbr Bbr::handover(const BbrParams& p, const LinkConfig& link, double min_rate, double now, std::mt19937_64& rng,
                  double rate_mbps, double rtt_ms, double min_rtt_ms) {
  Bbr b(p, link, min_rate, now, rng);
  b.mode_ = Mode::ProbeBw;
  b.bw_ = std::max(rate_mbps, min_rate);
  b.rtt_ms_ = rtt_ms;
  b.min_rtt_ = min_rtt_ms;
  b.gain_ = p.probe_gains[b.phase_];
  return b;
}

double Bbr::rate_mbps() const {
  const double inflight_cap = std::max(p_.cwnd_gain * bw_ * min_rtt_, p_.min_cwnd_pkts * mss_mbit_ * 1000.0);
  return std::max(min_rate_, std::min(gain_ * bw_, inflight_cap / rtt_ms_));
}

void Bbr::update(const Feedback& fb, double now, double /*dt*/) {
  rtt_ms_ = fb.rtt_ms;
  bw_samples_.push_back(fb.delivered_mbps);
  if (bw_samples_.size() > static_cast<std::size_t>(p_.bw_window_steps)) bw_samples_.erase(bw_samples_.begin());
  bw_ = std::max(*std::max_element(bw_samples_.begin(), bw_samples_.end()), min_rate_);
  if (fb.rtt_ms <= min_rtt_ || now - min_rtt_stamp_ > p_.min_rtt_window_s) {
    min_rtt_ = fb.rtt_ms;
    min_rtt_stamp_ = now;
  }
  if (mode_ == Mode::Startup) {
    if (bw_ > full_bw_ * p_.full_bw_growth) {
      full_bw_ = bw_;
      full_cnt_ = 0;
    } else {
      ++full_cnt_;
    }
    if (full_cnt_ >= p_.full_bw_rounds) mode_ = Mode::Drain;
    gain_ = p_.startup_gain;
  }
  if (mode_ == Mode::Drain) {
    gain_ = 1.0 / p_.startup_gain;
    if (rtt_ms_ <= min_rtt_ * 1.05 || gain_ * bw_ * rtt_ms_ <= bw_ * min_rtt_) mode_ = Mode::ProbeBw;
  }
  if (mode_ == Mode::ProbeBw) {
    phase_ = (phase_ + 1) % p_.probe_gains.size();
    gain_ = p_.probe_gains[phase_];
  }
}

// ---- PCC ----

Pcc::Pcc(const PccParams& p, double min_rate, std::mt19937_64& rng)
    : p_(p), min_rate_(min_rate), r_(p.initial_rate_mbps), startup_(true), cur_(r_) {
  new_interval(rng);
}

Pcc Pcc::handover(const PccParams& p, double min_rate, std::mt19937_64& rng, double rate_mbps) {
  Pcc c(p, min_rate, rng);
  c.r_ = std::max(rate_mbps, min_rate);
  c.startup_ = false;
  c.new_interval(rng);
  return c;
}

void Pcc::new_interval(std::mt19937_64& rng) {
  if (startup_) {
    plan_ = {r_};
  } else {
    const double up = r_ * (1.0 + p_.epsilon);
    const double down = r_ * (1.0 - p_.epsilon);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (coin(rng) < 0.5) {
      plan_ = {up, down};
    } else {
      plan_ = {down, up};
    }
  }
  results_.clear();
  cur_ = plan_.front();
  steps_ = 0;
  acc_sent_ = acc_delivered_ = acc_lost_ = 0.0;
}

double Pcc::rate_mbps() const { return std::max(min_rate_, cur_); }

double Pcc::utility(double sent, double delivered, double lost) const {
  const double loss = sent > 0.0 ? lost / sent : 0.0;
  return delivered * (1.0 - loss) - p_.lambda * loss * sent;
}

void Pcc::update(const Feedback& fb, std::mt19937_64& rng) {
  const double sent = rate_mbps();
  acc_sent_ += sent;
  acc_delivered_ += fb.delivered_mbps;
  acc_lost_ += sent * fb.loss_rate;
  if (++steps_ < p_.monitor_steps) return;
  const double n = steps_;
  const double u = utility(acc_sent_ / n, acc_delivered_ / n, acc_lost_ / n);
  results_.emplace_back(cur_, u);
  steps_ = 0;
  acc_sent_ = acc_delivered_ = acc_lost_ = 0.0;
  if (results_.size() < plan_.size()) {
    cur_ = plan_[results_.size()];
    return;
  }
  if (startup_) {
    if (prev_u_ && u <= *prev_u_) {
      startup_ = false;
      r_ /= 2.0;
    } else {
      prev_u_ = u;
      r_ *= 2.0;
    }
  } else {
    const auto [r1, u1] = results_[0];
    const auto [r2, u2] = results_[1];
    const double grad = (u1 - u2) / (r1 - r2);
    const double limit = p_.max_step_fraction * r_;
    const double step = std::clamp(p_.theta * grad, -limit, limit);
    r_ = std::max(min_rate_, r_ + step);
  }
  new_interval(rng);
}

}  // namespace tcpllm::sim
