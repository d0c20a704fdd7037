#include "tcpllm/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tcpllm/errors.hpp"
#include "tcpllm/ops.hpp"

namespace tcpllm::model {

std::string_view encoder_variant_name(EncoderVariant v) {
  return v == EncoderVariant::PerMetricFc ? "fc" : "cnn";
}

EncoderVariant encoder_variant_from_name(std::string_view name) {
  if (name == "fc") return EncoderVariant::PerMetricFc;
  if (name == "cnn") return EncoderVariant::TemporalCnn;
  throw ConfigError("unknown encoder variant '" + std::string(name) + "' (expected fc or cnn)");
}

void EncoderConfig::validate() const {
  if (token_dim == 0) throw ConfigError("encoder token_dim must be >= 1");
  if (cnn_kernel == 0) throw ConfigError("encoder cnn_kernel must be >= 1");
  if (!(eps > 0.0f)) throw ConfigError("encoder eps must be > 0");
}

std::array<double, 4> Normalizer::scale(const std::array<double, 4>& raw) const {
  if (!ready()) throw ConfigError("normalizer has no scaling constants");
  return {raw[0] / capacity_mbps, raw[1], raw[2] / rtt_ref_ms, raw[3] / capacity_mbps};
}

std::array<double, 4> Normalizer::unscale(const std::array<double, 4>& s) const {
  if (!ready()) throw ConfigError("normalizer has no scaling constants");
  return {s[0] * capacity_mbps, s[1], s[2] * rtt_ref_ms, s[3] * capacity_mbps};
}

Normalizer Normalizer::fit(const telemetry::ExperiencePool& pool) {
  Normalizer n;
  double cap = 0.0, rtt = std::numeric_limits<double>::infinity();
  for (const auto& t : pool.trajectories()) {
    for (const auto& s : t.states) {
      cap = std::max(cap, s[0]);
      if (s[2] > 0.0) rtt = std::min(rtt, s[2]);
    }
  }
  if (!(cap > 0.0) || !std::isfinite(rtt)) throw ConfigError("cannot fit normalizer: pool has no usable samples");
  n.capacity_mbps = cap;
  n.rtt_ref_ms = rtt;
  return n;
}

Encoder::Encoder(EncoderConfig cfg, ParamStore& store, std::mt19937_64& rng) : cfg_(cfg), store_(&store) {
  cfg_.validate();
  const std::size_t d = cfg_.token_dim;
  if (cfg_.variant == EncoderVariant::PerMetricFc) {
    for (const char* m : kMetricNames) {
      const std::string base = std::string("enc.fc_") + m;
      store.add(base + ".w", uniform_tensor({1, d}, 1.0f, rng, true), ParamRole::Trainable);
      store.add(base + ".b", uniform_tensor({d}, 1.0f, rng, true), ParamRole::Trainable);
    }
  } else {
    const float bound = 1.0f / std::sqrt(static_cast<float>(cfg_.cnn_kernel * 4));
    store.add("enc.cnn.w", uniform_tensor({cfg_.cnn_kernel, 4, d}, bound, rng, true), ParamRole::Trainable);
    store.add("enc.cnn.b", uniform_tensor({d}, bound, rng, true), ParamRole::Trainable);
  }
}

namespace {

void check_states(const Tensor& x, const char* op) {
  if (x.rank() != 3 || x.dim(2) != 4) {
    throw ShapeError(std::string(op) + ": expected (batch, seq, 4), got " + shape_str(x.shape()));
  }
}

}  // namespace

std::array<Tensor, 4> Encoder::encode_metrics(const Tensor& x) const {
  check_states(x, "encode_state");
  if (cfg_.variant != EncoderVariant::PerMetricFc) throw ContractError("encode_state needs the fc encoder variant");
  const std::size_t n = x.dim(0) * x.dim(1);
  const auto src = x.data();
  std::array<Tensor, 4> out;
  for (std::size_t m = 0; m < 4; ++m) {
    std::vector<float> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = src[i * 4 + m];
    const std::string base = std::string("enc.fc_") + kMetricNames[m];
    const Tensor xm = Tensor::from_data({n, 1}, std::move(col));
    out[m] = layer_norm(linear(xm, store_->get(base + ".w"), store_->get(base + ".b")), cfg_.eps);
  }
  return out;
}

Tensor Encoder::encode_state(const Tensor& x) const {
  const auto tokens = encode_metrics(x);
  const std::size_t n = x.dim(0) * x.dim(1);
  std::vector<RowRef> plan;
  plan.reserve(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    for (int m = 0; m < 4; ++m) plan.push_back({m, i});
  }
  const Tensor flat = assemble_rows(tokens, plan, cfg_.token_dim);
  return reshape(flat, {x.dim(0), x.dim(1), 4, cfg_.token_dim});
}

Tensor Encoder::encode_timeseries_cnn(const Tensor& x) const {
  check_states(x, "encode_timeseries_cnn");
  if (cfg_.variant != EncoderVariant::TemporalCnn) {
    throw ContractError("encode_timeseries_cnn needs the cnn encoder variant");
  }
  const Tensor y = causal_conv1d(x, store_->get("enc.cnn.w"), store_->get("enc.cnn.b"));
  return layer_norm(y, cfg_.eps);
}

std::size_t Encoder::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : store_->tensors()) {
    if (name.rfind("enc.", 0) == 0) n += t.numel();
  }
  return n;
}

}  // namespace tcpllm::model
