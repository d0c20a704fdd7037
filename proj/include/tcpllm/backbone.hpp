#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tcpllm/params.hpp"

namespace tcpllm::model {

struct BackboneConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t token_dim = 64;
  std::size_t context_len = 128;
  std::size_t ff_dim = 256;
  std::string positional = "learned";
  float init_std = 0.02f;
  void validate() const;
};

inline constexpr std::array<const char*, 4> kAttentionProjections{"attn_q", "attn_k", "attn_v", "attn_o"};

struct LoraAdapter {
  std::string target;  // e.g. "layer0.attn_q"
  std::size_t rank = 0;
  Tensor a;  // d × r
  Tensor b;  // r × k
  bool merged = false;
  std::size_t param_count() const { return a.numel() + b.numel(); }
};

// W0 + A·B. Shapes: W0 d×k, A d×r, B r×k.
Tensor effective_weight(const Tensor& w0, const Tensor& a, const Tensor& b);

// Pre-LN causal transformer over token rows. Base tensors live in the
// shared ParamStore under base.*; adapters under lora.*.
class Backbone {
 public:
  Backbone(BackboneConfig cfg, ParamStore& store, std::mt19937_64& rng);
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;

  const BackboneConfig& config() const { return cfg_; }

  const std::string& freeze_base() { return store_->freeze_base(); }
  // target is "layer{i}.{attn_q,attn_k,attn_v,attn_o,ff1,ff2}".
  const LoraAdapter& attach_lora(const std::string& target, std::size_t rank, std::mt19937_64& rng);
  void attach_attention_lora(std::size_t rank, std::mt19937_64& rng);
  // Writes W0 + A·B into an inference-only copy and retires the adapter.
  void merge_lora(const std::string& target);
  const std::map<std::string, LoraAdapter>& adapters() const { return adapters_; }
  std::size_t lora_param_count() const;

  // tokens: [batch·len × D]. key_valid marks real (non-pad) tokens.
  Tensor forward(const Tensor& tokens, std::size_t batch, std::size_t len,
                 std::span<const std::uint8_t> key_valid) const;
  // (b, L, D) -> (b, L, D), every token real.
  Tensor forward(const Tensor& tokens) const;

  // Weight used for `target` in forward: merged copy, W0 + A·B, or W0.
  Tensor weight(const std::string& target) const;
  std::size_t forward_count() const { return forwards_.load(); }

 private:
  Tensor linear_for(const Tensor& x, const std::string& target) const;

  BackboneConfig cfg_;
  ParamStore* store_;
  std::map<std::string, LoraAdapter> adapters_;
  std::map<std::string, Tensor> merged_;
  mutable std::atomic<std::size_t> forwards_{0};
};

}  // namespace tcpllm::model
