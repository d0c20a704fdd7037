#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tcpllm/tensor.hpp"

namespace tcpllm {

Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] · w[in×out] + b[out]; `b` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor gelu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor layer_norm(const Tensor& x, float eps = 1e-5f);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// Rows of a [rows × width] view of `table`; output shape [idx.size(), width].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> idx);

struct RowRef {
  int source;  // index into the sources list, or -1 for a zero row
  std::size_t row;
};
// Builds [plan.size() × width] by copying one source row per output row.
Tensor assemble_rows(std::span<const Tensor> sources, std::span<const RowRef> plan, std::size_t width);

// q, k, v: [batch·len × width]; key_valid has batch·len entries.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch, std::size_t heads,
                        std::span<const std::uint8_t> key_valid);

// x: (b, seq, c), w: (kernel, c, out), bias: (out). Zero-padded on the left.
Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor mse(const Tensor& pred, const Tensor& target);

}  // namespace tcpllm
