#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tcpllm/tensor.hpp"

namespace tcpllm {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Adam over a fixed, named parameter list. State is keyed by parameter name,
// so only parameters handed to the constructor ever get moment buffers.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  // Applies one bias-corrected update from the parameters' current grads.
  // Throws NumericError naming the first tensor with a non-finite gradient.
  void step();
  void zero_grad();

  std::int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<std::string> state_names() const;

 private:
  struct Moments {
    std::vector<float> m;
    std::vector<float> v;
  };
  std::vector<Tensor> params_;
  std::map<std::string, Moments> state_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

// Scales every grad by max_norm/norm when the global L2 norm exceeds
// max_norm. Returns the factor applied (1 when untouched).
float clip_global_norm(std::vector<Tensor>& params, float max_norm);

double global_grad_norm(const std::vector<Tensor>& params);

}  // namespace tcpllm
