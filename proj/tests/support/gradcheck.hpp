#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "reference.hpp"
#include "tcpllm/tensor.hpp"

namespace tcpllm::testing {

struct GradCheck {
  double max_rel = 0.0;       // worst per-tensor relative gradient error
  std::string worst;
  double forward_rel = 0.0;   // |float loss - reference loss| / max(1, |reference|)
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Analytic gradients come from backward() on the library's float graph;
// numeric ones from central differences (step h) of the double reference
// `ref` over the same values. Per tensor the error is
// ||analytic - numeric|| / max(||analytic||, ||numeric||).
inline GradCheck grad_check(const std::function<Tensor()>& loss_fn, const NamedTensors& params,
                            const std::function<double(const RefParams&)>& ref, double h = 1e-3) {
  RefParams values;
  for (const auto& [name, t] : params) {
    Tensor tt = t;
    tt.zero_grad();
    values[name] = to_mat(t);
  }
  const Tensor loss = loss_fn();
  backward(loss);
  GradCheck out;
  const double f0 = ref(values);
  out.forward_rel = std::abs(static_cast<double>(loss.item()) - f0) / std::max(1.0, std::abs(f0));
  for (const auto& [name, t] : params) {
    Mat& m = values[name];
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < m.v.size(); ++i) {
      const double x = m.v[i];
      m.v[i] = x + h;
      const double fp = ref(values);
      m.v[i] = x - h;
      const double fm = ref(values);
      m.v[i] = x;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = t.grad()[i];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
    const double rel = (diff2 == 0.0) ? 0.0 : std::sqrt(diff2) / denom;
    if (out.worst.empty() || rel > out.max_rel) {
      out.max_rel = rel;
      out.worst = name;
    }
  }
  return out;
}

}  // namespace tcpllm::testing
