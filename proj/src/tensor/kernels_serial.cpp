#include "kernel_rows.hpp"
#include "tcpllm/kernels.hpp"

namespace tcpllm::kernels::serial {

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) rows::gemm_row(a, b, c, i, n, p);
}

void gemm_nt_acc(const float* g, const float* b, float* c, std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) rows::gemm_nt_row(g, b, c, i, n, p);
}

void gemm_tn_acc(const float* a, const float* g, float* c, std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t k = 0; k < n; ++k) rows::gemm_tn_row(a, g, c, k, m, n, p);
}

void layer_norm_fwd(const float* x, float* y, float* inv_std, std::size_t rows, std::size_t d, float eps) {
  for (std::size_t r = 0; r < rows; ++r) rows::layer_norm_row(x, y, inv_std, r, d, eps);
}

void layer_norm_bwd(const float* gy, const float* y, const float* inv_std, float* gx, std::size_t rows,
                    std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) rows::layer_norm_bwd_row(gy, y, inv_std, gx, r, d);
}

void attention_fwd(const AttnDims& dims, const float* q, const float* k, const float* v,
                   const std::uint8_t* key_valid, float* out, float* probs) {
  for (std::size_t bh = 0; bh < dims.batch * dims.heads; ++bh) {
    rows::attention_fwd_slice(dims, q, k, v, key_valid, out, probs, bh);
  }
}

void attention_bwd(const AttnDims& dims, const float* q, const float* k, const float* v, const float* probs,
                   const float* gout, float* gq, float* gk, float* gv) {
  for (std::size_t bh = 0; bh < dims.batch * dims.heads; ++bh) {
    rows::attention_bwd_slice(dims, q, k, v, probs, gout, gq, gk, gv, bh);
  }
}

}  // namespace tcpllm::kernels::serial
