#include "tcpllm/head.hpp"

#include <cmath>
#include <vector>

#include "tcpllm/errors.hpp"
#include "tcpllm/ops.hpp"

namespace tcpllm::model {

void HeadConfig::validate() const {
  if (input_dim == 0) throw ConfigError("head input_dim must be >= 1");
  if (num_ccas != sim::kNumCcas) throw ConfigError("head must emit exactly one logit per CCA");
}

Head::Head(HeadConfig cfg, ParamStore& store, std::mt19937_64& rng) : cfg_(cfg), store_(&store) {
  cfg_.validate();
  store.add("head.w", normal_tensor({cfg_.input_dim, cfg_.num_ccas}, cfg_.init_std, rng, true), ParamRole::Trainable);
  store.add("head.b", Tensor::zeros({cfg_.num_ccas}, true), ParamRole::Trainable);
}

Tensor Head::logits(const Tensor& hidden_rows) const {
  return linear(hidden_rows, store_->get("head.w"), store_->get("head.b"));
}

Tensor Head::predict_logits(const Tensor& hidden, std::span<const std::size_t> readout) const {
  if (hidden.rank() != 3 || hidden.dim(2) != cfg_.input_dim) {
    throw ShapeError("predict_logits: hidden " + shape_str(hidden.shape()) + " is not (b, L, " +
                     std::to_string(cfg_.input_dim) + ")");
  }
  const std::size_t b = hidden.dim(0), len = hidden.dim(1);
  if (readout.size() != b) throw ShapeError("predict_logits: need one readout position per batch row");
  std::vector<std::size_t> rows(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (readout[i] >= len) {
      throw ShapeError("predict_logits: readout position " + std::to_string(readout[i]) + " outside sequence of " +
                       std::to_string(len));
    }
    rows[i] = i * len + readout[i];
  }
  return logits(gather_rows(reshape(hidden, {b * len, cfg_.input_dim}), rows));
}

Tensor Head::predict_logits(const Tensor& hidden, std::size_t readout) const {
  const std::vector<std::size_t> pos(hidden.rank() == 3 ? hidden.dim(0) : 0, readout);
  return predict_logits(hidden, pos);
}

sim::CcaId select_cca(std::span<const float> logits) {
  if (logits.size() != sim::kNumCcas) {
    throw DecisionError("select_cca: expected " + std::to_string(sim::kNumCcas) + " logits, got " +
                        std::to_string(logits.size()));
  }
  std::size_t best = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw DecisionError("select_cca: non-finite logit at index " + std::to_string(i));
    if (logits[i] > logits[best]) best = i;
  }
  return sim::kAllCcas[best];
}

}  // namespace tcpllm::model
