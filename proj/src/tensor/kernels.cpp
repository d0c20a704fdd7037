#include "tcpllm/kernels.hpp"

#include "kernel_rows.hpp"

namespace tcpllm::kernels {

namespace {
// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1u << 15;
}

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t p) {
  const bool par = m * n * p >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t i = 0; i < m; ++i) rows::gemm_row(a, b, c, i, n, p);
}

void gemm_nt_acc(const float* g, const float* b, float* c, std::size_t m, std::size_t n, std::size_t p) {
  const bool par = m * n * p >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t i = 0; i < m; ++i) rows::gemm_nt_row(g, b, c, i, n, p);
}

void gemm_tn_acc(const float* a, const float* g, float* c, std::size_t m, std::size_t n, std::size_t p) {
  const bool par = m * n * p >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t k = 0; k < n; ++k) rows::gemm_tn_row(a, g, c, k, m, n, p);
}

void layer_norm_fwd(const float* x, float* y, float* inv_std, std::size_t rows, std::size_t d, float eps) {
  const bool par = rows * d >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t r = 0; r < rows; ++r) rows::layer_norm_row(x, y, inv_std, r, d, eps);
}

void layer_norm_bwd(const float* gy, const float* y, const float* inv_std, float* gx, std::size_t rows,
                    std::size_t d) {
  const bool par = rows * d >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t r = 0; r < rows; ++r) rows::layer_norm_bwd_row(gy, y, inv_std, gx, r, d);
}

void attention_fwd(const AttnDims& dims, const float* q, const float* k, const float* v,
                   const std::uint8_t* key_valid, float* out, float* probs) {
  const std::size_t slices = dims.batch * dims.heads;
  const bool par = slices * dims.len * dims.len * dims.head_dim >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t bh = 0; bh < slices; ++bh) rows::attention_fwd_slice(dims, q, k, v, key_valid, out, probs, bh);
}

void attention_bwd(const AttnDims& dims, const float* q, const float* k, const float* v, const float* probs,
                   const float* gout, float* gq, float* gk, float* gv) {
  const std::size_t slices = dims.batch * dims.heads;
  const bool par = slices * dims.len * dims.len * dims.head_dim >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t bh = 0; bh < slices; ++bh) rows::attention_bwd_slice(dims, q, k, v, probs, gout, gq, gk, gv, bh);
}

}  // namespace tcpllm::kernels
