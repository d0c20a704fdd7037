#include "tcpllm/optim.hpp"

#include <cmath>

#include "tcpllm/errors.hpp"

namespace tcpllm {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.requires_grad()) throw ContractError("Adam: parameter '" + p.name() + "' does not require grad");
    std::string key = p.name().empty() ? "#" + std::to_string(i) : p.name();
    if (state_.count(key)) throw ContractError("Adam: duplicate parameter name '" + key + "'");
    state_[key] = Moments{std::vector<float>(p.numel(), 0.0f), std::vector<float>(p.numel(), 0.0f)};
  }
}

void Adam::step() {
  for (const auto& p : params_) {
    for (float g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("Adam: non-finite gradient in tensor '" + p.name() + "'");
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto& st = state_.at(p.name().empty() ? "#" + std::to_string(i) : p.name());
    auto w = p.data_mut();
    auto g = p.grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      st.m[j] = cfg_.beta1 * st.m[j] + (1.0f - cfg_.beta1) * g[j];
      st.v[j] = cfg_.beta2 * st.v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
      const double mh = st.m[j] / bc1;
      const double vh = st.v[j] / bc2;
      w[j] -= static_cast<float>(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::vector<std::string> Adam::state_names() const {
  std::vector<std::string> names;
  for (const auto& [k, _] : state_) names.push_back(k);
  return names;
}

double global_grad_norm(const std::vector<Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    for (float g : p.grad()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

float clip_global_norm(std::vector<Tensor>& params, float max_norm) {
  if (!(max_norm > 0.0f)) throw ContractError("clip_global_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0f;
  const float factor = static_cast<float>(max_norm / norm);
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (float& g : p.grad_mut()) g *= factor;
  }
  return factor;
}

}  // namespace tcpllm
