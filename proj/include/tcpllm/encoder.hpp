#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <string>
#include <string_view>

#include "tcpllm/params.hpp"
#include "tcpllm/telemetry.hpp"

namespace tcpllm::model {

enum class EncoderVariant { PerMetricFc, TemporalCnn };
std::string_view encoder_variant_name(EncoderVariant v);
EncoderVariant encoder_variant_from_name(std::string_view name);

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::PerMetricFc;
  std::size_t token_dim = 64;
  std::size_t cnn_kernel = 3;
  float eps = 1e-5f;
  void validate() const;
};

inline constexpr std::array<const char*, 4> kMetricNames{"thrup", "loss", "rtt", "send"};

// throughput/capacity, loss as-is, rtt/rtt_ref, sending/capacity.
struct Normalizer {
  double capacity_mbps = 0.0;
  double rtt_ref_ms = 0.0;

  bool ready() const { return capacity_mbps > 0.0 && rtt_ref_ms > 0.0; }
  std::array<double, 4> scale(const std::array<double, 4>& raw) const;
  std::array<double, 4> unscale(const std::array<double, 4>& scaled) const;

  // Capacity = largest throughput seen, rtt_ref = smallest rtt seen.
  static Normalizer fit(const telemetry::ExperiencePool& pool);
};

class Encoder {
 public:
  Encoder(EncoderConfig cfg, ParamStore& store, std::mt19937_64& rng);

  const EncoderConfig& config() const { return cfg_; }
  // Tokens emitted per timestep: 4 for the fc variant, 1 for the cnn variant.
  std::size_t tokens_per_step() const { return cfg_.variant == EncoderVariant::PerMetricFc ? 4 : 1; }

  // x: (b, seq, 4) normalized states, treated as data. Returns one
  // [b·seq × D] tensor per metric, in thrup, loss, rtt, send order.
  std::array<Tensor, 4> encode_metrics(const Tensor& x) const;
  // (b, seq, 4) -> (b, seq, 4, D)
  Tensor encode_state(const Tensor& x) const;
  // (b, seq, 4) -> (b, seq, D); needs seq >= kernel.
  Tensor encode_timeseries_cnn(const Tensor& x) const;

  std::size_t param_count() const;

 private:
  EncoderConfig cfg_;
  ParamStore* store_;
};

}  // namespace tcpllm::model
