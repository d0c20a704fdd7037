#pragma once

#include <cstddef>
#include <cstdint>

// Dense float kernels behind the differentiable ops. Every output element
// is produced by a single thread in a fixed order, so results do not depend
// on the OpenMP thread count.
namespace tcpllm::kernels {

struct AttnDims {
  std::size_t batch;
  std::size_t len;
  std::size_t heads;
  std::size_t head_dim;
  std::size_t width() const { return heads * head_dim; }
};

// c[m×p] = a[m×n]·b[n×p]
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t p);
// c[m×n] += g[m×p]·b[n×p]ᵀ
void gemm_nt_acc(const float* g, const float* b, float* c, std::size_t m, std::size_t n, std::size_t p);
// c[n×p] += a[m×n]ᵀ·g[m×p]
void gemm_tn_acc(const float* a, const float* g, float* c, std::size_t m, std::size_t n, std::size_t p);

// y = (x - mean) * inv_std per row; inv_std has `rows` entries.
void layer_norm_fwd(const float* x, float* y, float* inv_std, std::size_t rows, std::size_t d, float eps);
// gx += inv_std * (gy - mean(gy) - y * mean(gy*y))
void layer_norm_bwd(const float* gy, const float* y, const float* inv_std, float* gx, std::size_t rows,
                    std::size_t d);

// Causal softmax attention over [batch·len × heads·head_dim] row blocks.
// A key j is visible to query i iff j <= i and (key_valid[j] or j == i).
// probs receives batch·heads·len·len attention weights for the backward pass.
void attention_fwd(const AttnDims& dims, const float* q, const float* k, const float* v,
                   const std::uint8_t* key_valid, float* out, float* probs);
void attention_bwd(const AttnDims& dims, const float* q, const float* k, const float* v, const float* probs,
                   const float* gout, float* gq, float* gk, float* gv);

namespace serial {

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t p);
void gemm_nt_acc(const float* g, const float* b, float* c, std::size_t m, std::size_t n, std::size_t p);
void gemm_tn_acc(const float* a, const float* g, float* c, std::size_t m, std::size_t n, std::size_t p);
void layer_norm_fwd(const float* x, float* y, float* inv_std, std::size_t rows, std::size_t d, float eps);
void layer_norm_bwd(const float* gy, const float* y, const float* inv_std, float* gx, std::size_t rows,
                    std::size_t d);
void attention_fwd(const AttnDims& dims, const float* q, const float* k, const float* v,
                   const std::uint8_t* key_valid, float* out, float* probs);
void attention_bwd(const AttnDims& dims, const float* q, const float* k, const float* v, const float* probs,
                   const float* gout, float* gq, float* gk, float* gv);

}  // namespace serial

}  // namespace tcpllm::kernels
