#pragma once
// Finite-difference checks for each differentiable op. Every check draws
// O(1) inputs from its seed, reduces the op output with a fixed random
// projection and compares float backward() with central differences of a
// double re-implementation.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gradcheck.hpp"
#include "tcpllm/ops.hpp"

namespace tcpllm::testing {

using OpCheck = std::function<GradCheck(std::uint64_t seed)>;

namespace opcheck_detail {

inline Tensor rnd(const Shape& s, std::mt19937_64& rng, bool grad = true) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> v(numel_of(s));
  for (auto& x : v) x = nd(rng);
  return Tensor::from_data(s, std::move(v), grad);
}

inline double dot(const Mat& a, const Mat& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) s += a.v[i] * b.v[i];
  return s;
}

inline Mat ew(const Mat& a, const Mat& b, const std::function<double(double, double)>& f) {
  Mat c = a;
  for (std::size_t i = 0; i < c.v.size(); ++i) c.v[i] = f(a.v[i], b.v[i]);
  return c;
}

// Builds a check from the float op and its double counterpart, both fed
// the named inputs; `out_shape` sizes the projection.
inline GradCheck run(std::uint64_t seed, const std::vector<std::pair<std::string, Shape>>& inputs,
                     const Shape& out_shape, const std::function<Tensor(const std::vector<Tensor>&)>& op,
                     const std::function<Mat(const std::vector<const Mat*>&)>& ref) {
  std::mt19937_64 rng(seed);
  NamedTensors params;
  std::vector<Tensor> xs;
  for (const auto& [name, shape] : inputs) {
    xs.push_back(rnd(shape, rng));
    params.emplace_back(name, xs.back());
  }
  const Tensor proj = rnd(out_shape, rng, false);
  const Mat pm = to_mat(proj);
  auto loss = [&] { return sum(mul(op(xs), proj)); };
  auto ref_loss = [&](const RefParams& p) {
    std::vector<const Mat*> ms;
    for (const auto& [name, shape] : inputs) ms.push_back(&p.at(name));
    return dot(ref(ms), pm);
  };
  return grad_check(loss, params, ref_loss);
}

}  // namespace opcheck_detail

inline std::vector<std::pair<std::string, OpCheck>> op_checks() {
  using namespace opcheck_detail;
  std::vector<std::pair<std::string, OpCheck>> out;

  out.emplace_back("matmul", [](std::uint64_t s) {
    return run(s, {{"a", {3, 4}}, {"b", {4, 5}}}, {3, 5}, [](auto& x) { return matmul(x[0], x[1]); },
               [](auto& m) { return ref_matmul(*m[0], *m[1]); });
  });
  out.emplace_back("linear", [](std::uint64_t s) {
    return run(s, {{"x", {2, 3, 4}}, {"w", {4, 5}}, {"b", {5}}}, {2, 3, 5},
               [](auto& x) { return linear(x[0], x[1], x[2]); },
               [](auto& m) { return ref_linear(*m[0], *m[1], *m[2]); });
  });
  out.emplace_back("add", [](std::uint64_t s) {
    return run(s, {{"a", {3, 4}}, {"b", {3, 4}}}, {3, 4}, [](auto& x) { return add(x[0], x[1]); },
               [](auto& m) { return ew(*m[0], *m[1], [](double a, double b) { return a + b; }); });
  });
  out.emplace_back("sub", [](std::uint64_t s) {
    return run(s, {{"a", {3, 4}}, {"b", {3, 4}}}, {3, 4}, [](auto& x) { return sub(x[0], x[1]); },
               [](auto& m) { return ew(*m[0], *m[1], [](double a, double b) { return a - b; }); });
  });
  out.emplace_back("mul", [](std::uint64_t s) {
    return run(s, {{"a", {3, 4}}, {"b", {3, 4}}}, {3, 4}, [](auto& x) { return mul(x[0], x[1]); },
               [](auto& m) { return ew(*m[0], *m[1], [](double a, double b) { return a * b; }); });
  });
  out.emplace_back("scale", [](std::uint64_t s) {
    return run(s, {{"a", {3, 4}}}, {3, 4}, [](auto& x) { return scale(x[0], -1.75f); },
               [](auto& m) {
                 Mat c = *m[0];
                 for (double& v : c.v) v *= -1.75;
                 return c;
               });
  });
  out.emplace_back("gelu", [](std::uint64_t s) {
    return run(s, {{"a", {4, 6}}}, {4, 6}, [](auto& x) { return gelu(x[0]); },
               [](auto& m) { return ref_gelu(*m[0]); });
  });
  out.emplace_back("sum", [](std::uint64_t s) {
    return run(s, {{"a", {3, 4}}}, {1}, [](auto& x) { return reshape(sum(x[0]), {1}); },
               [](auto& m) {
                 Mat c(1, 1);
                 for (double v : m[0]->v) c.v[0] += v;
                 return c;
               });
  });
  out.emplace_back("reshape", [](std::uint64_t s) {
    return run(s, {{"a", {3, 4}}}, {2, 6}, [](auto& x) { return reshape(x[0], {2, 6}); },
               [](auto& m) { return *m[0]; });
  });
  out.emplace_back("layer_norm", [](std::uint64_t s) {
    return run(s, {{"a", {5, 8}}}, {5, 8}, [](auto& x) { return layer_norm(x[0]); },
               [](auto& m) { return ref_layer_norm(*m[0], 1e-5); });
  });
  out.emplace_back("layer_norm_affine", [](std::uint64_t s) {
    return run(s, {{"a", {5, 8}}, {"g", {8}}, {"b", {8}}}, {5, 8},
               [](auto& x) { return layer_norm(x[0], x[1], x[2]); },
               [](auto& m) { return ref_layer_norm(*m[0], 1e-5, m[1], m[2]); });
  });
  out.emplace_back("gather_rows", [](std::uint64_t s) {
    static const std::vector<std::size_t> idx{2, 0, 2, 3};
    return run(s, {{"t", {4, 3}}}, {4, 3}, [](auto& x) { return gather_rows(x[0], idx); },
               [](auto& m) {
                 Mat c(idx.size(), 3);
                 for (std::size_t r = 0; r < idx.size(); ++r)
                   for (std::size_t j = 0; j < 3; ++j) c.at(r, j) = m[0]->at(idx[r], j);
                 return c;
               });
  });
  out.emplace_back("assemble_rows", [](std::uint64_t s) {
    static const std::vector<RowRef> plan{{1, 0}, {0, 2}, {-1, 0}, {1, 1}, {0, 2}};
    return run(s, {{"a", {3, 4}}, {"b", {2, 4}}}, {5, 4},
               [](auto& x) {
                 const std::vector<Tensor> src{x[0], x[1]};
                 return assemble_rows(src, plan, 4);
               },
               [](auto& m) {
                 Mat c(plan.size(), 4);
                 for (std::size_t r = 0; r < plan.size(); ++r)
                   if (plan[r].source >= 0)
                     for (std::size_t j = 0; j < 4; ++j) c.at(r, j) = m[plan[r].source]->at(plan[r].row, j);
                 return c;
               });
  });
  out.emplace_back("causal_attention", [](std::uint64_t s) {
    // Two sequences of five tokens, two heads of width 3; some padded keys.
    static const std::vector<std::uint8_t> valid{0, 1, 1, 0, 1, 1, 1, 1, 1, 1};
    return run(s, {{"q", {10, 6}}, {"k", {10, 6}}, {"v", {10, 6}}}, {10, 6},
               [](auto& x) { return causal_attention(x[0], x[1], x[2], 2, 2, valid); },
               [](auto& m) { return ref_attention(*m[0], *m[1], *m[2], 2, 2, valid); });
  });
  out.emplace_back("causal_conv1d", [](std::uint64_t s) {
    return run(s, {{"x", {2, 6, 4}}, {"w", {3, 4, 5}}, {"b", {5}}}, {2, 6, 5},
               [](auto& x) { return causal_conv1d(x[0], x[1], x[2]); },
               [](auto& m) { return ref_conv1d(*m[0], 2, *m[1], *m[2], 3); });
  });
  out.emplace_back("softmax_cross_entropy", [](std::uint64_t s) {
    static const std::vector<int> labels{2, 0, 1, 2};
    return run(s, {{"z", {4, 3}}}, {1},
               [](auto& x) { return reshape(softmax_cross_entropy(x[0], labels), {1}); },
               [](auto& m) {
                 Mat c(1, 1);
                 c.v[0] = ref_cross_entropy(*m[0], labels);
                 return c;
               });
  });
  out.emplace_back("mse", [](std::uint64_t s) {
    return run(s, {{"p", {6}}, {"t", {6}}}, {1}, [](auto& x) { return reshape(mse(x[0], x[1]), {1}); },
               [](auto& m) {
                 Mat c(1, 1);
                 for (std::size_t i = 0; i < 6; ++i) c.v[0] += (m[0]->v[i] - m[1]->v[i]) * (m[0]->v[i] - m[1]->v[i]);
                 c.v[0] /= 6.0;
                 return c;
               });
  });
  return out;
}

}  // namespace tcpllm::testing
