#pragma once
// Gradient check of encoder -> backbone -> head -> cross-entropy for one
// seed. Weights are redrawn at N(0, 0.5) so that every path, LoRA A
// included, carries gradients far above float rounding.

#include <cstdint>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "tcpllm/ops.hpp"
#include "tcpllm/policy.hpp"

namespace tcpllm::testing {

inline model::ModelConfig small_model_config(std::uint64_t seed, bool cnn) {
  model::ModelConfig mc;
  mc.seed = seed;
  mc.backbone.token_dim = 8;
  mc.encoder.token_dim = 8;
  mc.backbone.ff_dim = 16;
  mc.backbone.context_len = 32;
  mc.context_steps = 3;
  mc.lora_rank = 2;
  if (cnn) mc.encoder.variant = model::EncoderVariant::TemporalCnn;
  return mc;
}

inline GradCheck pipeline_check(std::uint64_t seed) {
  const model::ModelConfig mc = small_model_config(1000 + seed, seed % 2 == 1);
  model::Policy pol(mc);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f), wd(0.0f, 0.5f);
  for (const auto& [name, t] : pol.params().tensors()) {
    Tensor tt = t;
    for (auto& v : tt.data_mut()) v = wd(rng);
  }
  std::vector<model::Window> batch(2);
  for (auto& w : batch) {
    w.pad = 1;
    for (int t = 0; t < 3; ++t) {
      w.returns.push_back(nd(rng));
      w.states.push_back({nd(rng), nd(rng), nd(rng), nd(rng)});
      w.actions.push_back(t == 0 ? -1 : static_cast<int>(rng() % 3));
    }
  }
  auto loss = [&] {
    std::vector<int> labels;
    const Tensor logits = pol.forward_logits(batch, &labels);
    return softmax_cross_entropy(logits, labels);
  };
  NamedTensors params;
  for (const auto& n : pol.params().trainable_names()) params.emplace_back(n, pol.params().get(n));
  const RefParams base = ref_params(pol.params());
  auto ref = [&](const RefParams& tp) {
    RefParams all = base;
    for (const auto& [n, m] : tp) all[n] = m;
    return ref_policy_loss(mc, all, batch);
  };
  return grad_check(loss, params, ref);
}

}  // namespace tcpllm::testing
