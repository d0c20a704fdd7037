#pragma once

// Per-row bodies shared by the serial and OpenMP kernel drivers. Keeping the
// arithmetic in one place is what makes the two drivers bit-identical.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "tcpllm/kernels.hpp"

namespace tcpllm::kernels::rows {

inline void gemm_row(const float* a, const float* b, float* c, std::size_t i, std::size_t n, std::size_t p) {
  float* ci = c + i * p;
  std::fill(ci, ci + p, 0.0f);
  const float* ai = a + i * n;
  for (std::size_t k = 0; k < n; ++k) {
    const float aik = ai[k];
    const float* bk = b + k * p;
    for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
  }
}

inline void gemm_nt_row(const float* g, const float* b, float* c, std::size_t i, std::size_t n, std::size_t p) {
  const float* gi = g + i * p;
  float* ci = c + i * n;
  for (std::size_t j = 0; j < n; ++j) {
    const float* bj = b + j * p;
    float s = 0.0f;
    for (std::size_t l = 0; l < p; ++l) s += gi[l] * bj[l];
    ci[j] += s;
  }
}

inline void gemm_tn_row(const float* a, const float* g, float* c, std::size_t k, std::size_t m, std::size_t n,
                        std::size_t p) {
  float* ck = c + k * p;
  for (std::size_t i = 0; i < m; ++i) {
    const float aik = a[i * n + k];
    if (aik == 0.0f) continue;
    const float* gi = g + i * p;
    for (std::size_t j = 0; j < p; ++j) ck[j] += aik * gi[j];
  }
}

inline void layer_norm_row(const float* x, float* y, float* inv_std, std::size_t r, std::size_t d, float eps) {
  const float* xr = x + r * d;
  float* yr = y + r * d;
  double mean = 0.0;
  for (std::size_t j = 0; j < d; ++j) mean += xr[j];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double c = xr[j] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const double is = 1.0 / std::sqrt(var + eps);
  inv_std[r] = static_cast<float>(is);
  for (std::size_t j = 0; j < d; ++j) yr[j] = static_cast<float>((xr[j] - mean) * is);
}

inline void layer_norm_bwd_row(const float* gy, const float* y, const float* inv_std, float* gx, std::size_t r,
                               std::size_t d) {
  const float* gr = gy + r * d;
  const float* yr = y + r * d;
  float* out = gx + r * d;
  double mg = 0.0;
  double mgy = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    mg += gr[j];
    mgy += static_cast<double>(gr[j]) * yr[j];
  }
  mg /= static_cast<double>(d);
  mgy /= static_cast<double>(d);
  const double is = inv_std[r];
  for (std::size_t j = 0; j < d; ++j) out[j] += static_cast<float>(is * (gr[j] - mg - yr[j] * mgy));
}

// One (batch, head) slice of causal attention.
inline void attention_fwd_slice(const AttnDims& dm, const float* q, const float* k, const float* v,
                                const std::uint8_t* key_valid, float* out, float* probs, std::size_t bh) {
  const std::size_t b = bh / dm.heads;
  const std::size_t h = bh % dm.heads;
  const std::size_t w = dm.width();
  const std::size_t off = h * dm.head_dim;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dm.head_dim));
  float* pbh = probs + bh * dm.len * dm.len;
  for (std::size_t i = 0; i < dm.len; ++i) {
    const float* qi = q + (b * dm.len + i) * w + off;
    float* pi = pbh + i * dm.len;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < dm.len; ++j) {
      const bool visible = j <= i && (j == i || key_valid[b * dm.len + j]);
      if (!visible) {
        pi[j] = 0.0f;
        continue;
      }
      const float* kj = k + (b * dm.len + j) * w + off;
      float s = 0.0f;
      for (std::size_t t = 0; t < dm.head_dim; ++t) s += qi[t] * kj[t];
      s *= scale;
      pi[j] = s;
      mx = std::max(mx, s);
    }
    float z = 0.0f;
    for (std::size_t j = 0; j <= i; ++j) {
      const bool visible = j == i || key_valid[b * dm.len + j];
      if (!visible) continue;
      pi[j] = std::exp(pi[j] - mx);
      z += pi[j];
    }
    const float inv = 1.0f / z;
    float* oi = out + (b * dm.len + i) * w + off;
    std::fill(oi, oi + dm.head_dim, 0.0f);
    for (std::size_t j = 0; j <= i; ++j) {
      pi[j] *= inv;
      const float pj = pi[j];
      if (pj == 0.0f) continue;
      const float* vj = v + (b * dm.len + j) * w + off;
      for (std::size_t t = 0; t < dm.head_dim; ++t) oi[t] += pj * vj[t];
    }
  }
}

inline void attention_bwd_slice(const AttnDims& dm, const float* q, const float* k, const float* v,
                                const float* probs, const float* gout, float* gq, float* gk, float* gv,
                                std::size_t bh) {
  const std::size_t b = bh / dm.heads;
  const std::size_t h = bh % dm.heads;
  const std::size_t w = dm.width();
  const std::size_t off = h * dm.head_dim;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dm.head_dim));
  const float* pbh = probs + bh * dm.len * dm.len;
  std::vector<float> dp(dm.len);
  for (std::size_t i = 0; i < dm.len; ++i) {
    const float* pi = pbh + i * dm.len;
    const float* goi = gout + (b * dm.len + i) * w + off;
    float dot = 0.0f;
    for (std::size_t j = 0; j <= i; ++j) {
      const float* vj = v + (b * dm.len + j) * w + off;
      float s = 0.0f;
      for (std::size_t t = 0; t < dm.head_dim; ++t) s += goi[t] * vj[t];
      dp[j] = s;
      dot += pi[j] * s;
      if (gv != nullptr && pi[j] != 0.0f) {
        float* gvj = gv + (b * dm.len + j) * w + off;
        for (std::size_t t = 0; t < dm.head_dim; ++t) gvj[t] += pi[j] * goi[t];
      }
    }
    const float* qi = q + (b * dm.len + i) * w + off;
    float* gqi = gq ? gq + (b * dm.len + i) * w + off : nullptr;
    for (std::size_t j = 0; j <= i; ++j) {
      if (pi[j] == 0.0f) continue;
      const float ds = pi[j] * (dp[j] - dot) * scale;
      const float* kj = k + (b * dm.len + j) * w + off;
      if (gqi) {
        for (std::size_t t = 0; t < dm.head_dim; ++t) gqi[t] += ds * kj[t];
      }
      if (gk) {
        float* gkj = gk + (b * dm.len + j) * w + off;
        for (std::size_t t = 0; t < dm.head_dim; ++t) gkj[t] += ds * qi[t];
      }
    }
  }
}

}  // namespace tcpllm::kernels::rows
