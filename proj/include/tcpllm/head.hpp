#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>

#include "tcpllm/cca.hpp"
#include "tcpllm/params.hpp"

namespace tcpllm::model {

struct HeadConfig {
  std::size_t input_dim = 64;
  std::size_t num_ccas = sim::kNumCcas;
  float init_std = 0.02f;
  void validate() const;
};

struct Decision {
  int flow_id = 0;
  double time_s = 0.0;
  sim::CcaId chosen = sim::CcaId::Cubic;
  std::array<float, sim::kNumCcas> logits{};
  std::size_t inference_steps = 0;
  double wall_time_s = 0.0;
};

class Head {
 public:
  Head(HeadConfig cfg, ParamStore& store, std::mt19937_64& rng);
  const HeadConfig& config() const { return cfg_; }

  // hidden: [rows × D] -> [rows × 3]
  Tensor logits(const Tensor& hidden_rows) const;
  // hidden: (b, L, D); one readout position per batch row -> (b, 3)
  Tensor predict_logits(const Tensor& hidden, std::span<const std::size_t> readout) const;
  Tensor predict_logits(const Tensor& hidden, std::size_t readout) const;

 private:
  HeadConfig cfg_;
  ParamStore* store_;
};

// argmax with ties going to the lowest index; NaN -> DecisionError.
sim::CcaId select_cca(std::span<const float> logits);

}  // namespace tcpllm::model
