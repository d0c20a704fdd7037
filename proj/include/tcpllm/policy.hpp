#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "tcpllm/backbone.hpp"
#include "tcpllm/encoder.hpp"
#include "tcpllm/head.hpp"
#include "tcpllm/telemetry.hpp"

namespace tcpllm::model {

struct ModelConfig {
  EncoderConfig encoder;
  BackboneConfig backbone;
  std::size_t lora_rank = 4;
  std::size_t context_steps = 10;  // K
  std::size_t pretrain_steps = 0;
  bool regression_head = false;  // head.reg: D -> 1, used by SL regression
  std::uint64_t seed = 1;
  void validate() const;
  // Token slots per timestep: return, state token(s), action.
  std::size_t slots_per_step() const { return encoder.variant == EncoderVariant::PerMetricFc ? 6 : 3; }
};

// K timesteps of one flow, left-padded. Pad steps have action -1 and
// contribute neither tokens nor loss.
struct Window {
  std::size_t pad = 0;
  std::vector<float> returns;                // normalized R_t
  std::vector<std::array<float, 4>> states;  // normalized s_t
  std::vector<int> actions;                  // a_t, or -1

  std::size_t steps() const { return states.size(); }
  std::size_t real() const { return steps() - pad; }
  std::size_t label_count() const;
};

struct TokenLayout {
  std::size_t slots = 6;
  std::size_t window_tokens(std::size_t k) const { return slots * k; }
  std::size_t pad_tokens(const Window& w) const { return slots * w.pad; }
  // The last state token of step t, immediately before its action slot.
  std::size_t readout(std::size_t t) const { return slots * t + slots - 2; }
  std::size_t action_slot(std::size_t t) const { return slots * t + slots - 1; }
};

struct TokenizeOptions {
  std::size_t stride = 1;
  // Earliest window end (in timesteps); defaults to K when 0.
  std::size_t min_len = 0;
};

// Sliding windows over the last K timesteps. Window ends are
// min_len, min_len + stride, ... <= T; a trajectory shorter than every end
// yields one padded window ending at T.
std::vector<Window> tokenize(const telemetry::Trajectory& traj, std::size_t k, const Normalizer& norm,
                             double return_scale, const TokenizeOptions& opt = {});

class Policy {
 public:
  explicit Policy(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const Encoder& encoder() const { return *encoder_; }
  Backbone& backbone() { return *backbone_; }
  const Backbone& backbone() const { return *backbone_; }
  const Head& head() const { return *head_; }
  TokenLayout layout() const { return {cfg_.slots_per_step()}; }

  // Logits at every labelled step of every window, in window order, as
  // [n × 3]. When `labels` is non-null the matching a_t are appended.
  Tensor forward_logits(std::span<const Window> batch, std::vector<int>* labels = nullptr) const;
  // Hidden states (b, L, D) for the assembled token sequences.
  Tensor hidden(std::span<const Window> batch) const;
  // [b × D] hidden rows at the readout of each window's last step.
  Tensor last_step_hidden(std::span<const Window> batch) const;
  // [b × 1] through head.reg.
  Tensor regress(std::span<const Window> batch) const;

  // One backbone forward and one head evaluation at the last real step.
  Decision decide(const Window& context, int flow_id = 0, double time_s = 0.0) const;

  Normalizer normalizer;
  double return_scale = 1.0;
  double target_return = 0.0;  // raw units

 private:
  struct Assembled {
    Tensor tokens;
    std::vector<std::uint8_t> valid;
    std::size_t batch = 0;
    std::size_t len = 0;
  };
  Assembled assemble(std::span<const Window> batch) const;
  void pretrain_base(std::mt19937_64& rng);

  ModelConfig cfg_;
  ParamStore store_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<Head> head_;
};

// Context window for an online decision from a flow's full history of raw
// states and the CCA in force at each sample, most recent last. The
// return-to-go counts down from target_return by the rewards observed
// before each step.
Window decision_window(const Policy& policy, std::span<const std::array<double, 4>> states,
                       std::span<const sim::CcaId> ccas);

}  // namespace tcpllm::model
