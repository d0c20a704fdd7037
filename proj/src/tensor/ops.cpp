#include "tcpllm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "tcpllm/errors.hpp"
#include "tcpllm/kernels.hpp"

namespace tcpllm {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) throw ShapeError(std::string(op) + ": tensor has no dimensions");
  return t.shape().back();
}

// Grad buffer of input `i` when it participates in differentiation.
float* input_grad(Node& out, std::size_t i) {
  Node& in = *out.inputs[i];
  if (!in.requires_grad) return nullptr;
  return in.ensure_grad().data();
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
  std::vector<float> out(m * p);
  kernels::gemm(a.data().data(), b.data().data(), out.data(), m, n, p);
  return detail::make_result({m, p}, std::move(out), {a, b}, [m, n, p](Node& o) {
    const float* A = o.inputs[0]->data.data();
    const float* B = o.inputs[1]->data.data();
    if (float* ga = input_grad(o, 0)) kernels::gemm_nt_acc(o.grad.data(), B, ga, m, n, p);
    if (float* gb = input_grad(o, 1)) kernels::gemm_tn_acc(A, o.grad.data(), gb, m, n, p);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t in = last_dim(x, "linear");
  if (w.rank() != 2 || w.dim(0) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const std::size_t out_dim = w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  std::vector<float> out(rows * out_dim);
  kernels::gemm(x.data().data(), w.data().data(), out.data(), rows, in, out_dim);
  if (b.defined()) {
    const float* bd = b.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += bd[j];
    }
  }
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::make_result(std::move(shape), std::move(out), std::move(inputs), [rows, in, out_dim](Node& o) {
    const float* X = o.inputs[0]->data.data();
    const float* W = o.inputs[1]->data.data();
    const float* g = o.grad.data();
    if (float* gx = input_grad(o, 0)) kernels::gemm_nt_acc(g, W, gx, rows, in, out_dim);
    if (float* gw = input_grad(o, 1)) kernels::gemm_tn_acc(X, g, gw, rows, in, out_dim);
    if (o.inputs.size() > 2) {
      if (float* gb = input_grad(o, 2)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& o) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (float* g = input_grad(o, k)) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& o) {
    if (float* g = input_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
    if (float* g = input_grad(o, 1)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& o) {
    const float* A = o.inputs[0]->data.data();
    const float* B = o.inputs[1]->data.data();
    if (float* g = input_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * B[i];
    }
    if (float* g = input_grad(o, 1)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * A[i];
    }
  });
}

Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return detail::make_result(a.shape(), std::move(out), {a}, [s](Node& o) {
    if (float* g = input_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * s;
    }
  });
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Tensor gelu(const Tensor& x) {
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = xd[i];
    out[i] = 0.5f * v * (1.0f + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [](Node& o) {
    float* g = input_grad(o, 0);
    if (!g) return;
    const float* X = o.inputs[0]->data.data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const float v = X[i];
      const float t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * kGeluA * v * v);
      g[i] += o.grad[i] * d;
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  return detail::make_result({1}, {static_cast<float>(s)}, {x}, [](Node& o) {
    if (float* g = input_grad(o, 0)) {
      const float go = o.grad[0];
      for (std::size_t i = 0; i < o.inputs[0]->data.size(); ++i) g[i] += go;
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), {x}, [](Node& o) {
    if (float* g = input_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor layer_norm(const Tensor& x, float eps) {
  const std::size_t d = last_dim(x, "layer_norm");
  if (d == 0) throw ShapeError("layer_norm: last dimension is 0");
  if (!(eps > 0.0f)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  std::vector<float> out(x.numel());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  kernels::layer_norm_fwd(x.data().data(), out.data(), inv_std->data(), rows, d, eps);
  return detail::make_result(x.shape(), std::move(out), {x}, [rows, d, inv_std](Node& o) {
    if (float* g = input_grad(o, 0)) kernels::layer_norm_bwd(o.grad.data(), o.data.data(), inv_std->data(), g, rows, d);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t d = last_dim(x, "layer_norm");
  if (d == 0) throw ShapeError("layer_norm: last dimension is 0");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match width " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  auto normed = std::make_shared<std::vector<float>>(x.numel());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  kernels::layer_norm_fwd(x.data().data(), normed->data(), inv_std->data(), rows, d, eps);
  std::vector<float> out(x.numel());
  const float* ga = gamma.data().data();
  const float* be = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (*normed)[r * d + j] * ga[j] + be[j];
  }
  return detail::make_result(x.shape(), std::move(out), {x, gamma, beta}, [rows, d, normed, inv_std](Node& o) {
    const float* ga = o.inputs[1]->data.data();
    const float* g = o.grad.data();
    if (float* gg = input_grad(o, 1)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*normed)[r * d + j];
      }
    }
    if (float* gb = input_grad(o, 2)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
    }
    if (float* gx = input_grad(o, 0)) {
      std::vector<float> gn(rows * d);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) gn[r * d + j] = g[r * d + j] * ga[j];
      }
      kernels::layer_norm_bwd(gn.data(), normed->data(), inv_std->data(), gx, rows, d);
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> idx) {
  const std::size_t width = last_dim(table, "gather_rows");
  const std::size_t rows = width ? table.numel() / width : 0;
  std::vector<float> out(idx.size() * width);
  const float* src = table.data().data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows) {
      throw IndexError("gather_rows: row " + std::to_string(idx[r]) + " out of range for " + shape_str(table.shape()));
    }
    std::copy_n(src + idx[r] * width, width, out.data() + r * width);
  }
  std::vector<std::size_t> rows_copy(idx.begin(), idx.end());
  return detail::make_result({idx.size(), width}, std::move(out), {table}, [width, rows_copy](Node& o) {
    float* g = input_grad(o, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows_copy.size(); ++r) {
      float* dst = g + rows_copy[r] * width;
      const float* gr = o.grad.data() + r * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += gr[j];
    }
  });
}

Tensor assemble_rows(std::span<const Tensor> sources, std::span<const RowRef> plan, std::size_t width) {
  for (const auto& s : sources) {
    if (last_dim(s, "assemble_rows") != width) {
      throw ShapeError("assemble_rows: source " + shape_str(s.shape()) + " is not " + std::to_string(width) + " wide");
    }
  }
  std::vector<float> out(plan.size() * width, 0.0f);
  for (std::size_t r = 0; r < plan.size(); ++r) {
    const RowRef ref = plan[r];
    if (ref.source < 0) continue;
    if (static_cast<std::size_t>(ref.source) >= sources.size()) throw IndexError("assemble_rows: bad source index");
    const Tensor& s = sources[static_cast<std::size_t>(ref.source)];
    if (ref.row >= s.numel() / width) throw IndexError("assemble_rows: row out of range");
    std::copy_n(s.data().data() + ref.row * width, width, out.data() + r * width);
  }
  std::vector<RowRef> plan_copy(plan.begin(), plan.end());
  std::vector<Tensor> inputs(sources.begin(), sources.end());
  return detail::make_result({plan.size(), width}, std::move(out), std::move(inputs), [width, plan_copy](Node& o) {
    for (std::size_t r = 0; r < plan_copy.size(); ++r) {
      const RowRef ref = plan_copy[r];
      if (ref.source < 0) continue;
      float* g = input_grad(o, static_cast<std::size_t>(ref.source));
      if (!g) continue;
      const float* gr = o.grad.data() + r * width;
      float* dst = g + ref.row * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += gr[j];
    }
  });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch, std::size_t heads,
                        std::span<const std::uint8_t> key_valid) {
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  if (q.rank() != 2 || batch == 0 || q.dim(0) % batch != 0) {
    throw ShapeError("causal_attention: expected [batch*len, width], got " + shape_str(q.shape()));
  }
  const std::size_t width = q.dim(1);
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(width) + " not divisible by heads " +
                     std::to_string(heads));
  }
  if (key_valid.size() != q.dim(0)) throw ShapeError("causal_attention: key mask length mismatch");
  const kernels::AttnDims dims{batch, q.dim(0) / batch, heads, width / heads};
  auto probs = std::make_shared<std::vector<float>>(batch * heads * dims.len * dims.len);
  std::vector<float> out(q.numel());
  kernels::attention_fwd(dims, q.data().data(), k.data().data(), v.data().data(), key_valid.data(), out.data(),
                         probs->data());
  return detail::make_result(q.shape(), std::move(out), {q, k, v}, [dims, probs](Node& o) {
    kernels::attention_bwd(dims, o.inputs[0]->data.data(), o.inputs[1]->data.data(), o.inputs[2]->data.data(),
                           probs->data(), o.grad.data(), input_grad(o, 0), input_grad(o, 1), input_grad(o, 2));
  });
}

Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 3 || w.rank() != 3 || w.dim(1) != x.dim(2)) {
    throw ShapeError("causal_conv1d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                     shape_str(w.shape()));
  }
  const std::size_t nb = x.dim(0), seq = x.dim(1), ch = x.dim(2);
  const std::size_t ks = w.dim(0), od = w.dim(2);
  if (seq < ks) {
    throw ShapeError("causal_conv1d: sequence length " + std::to_string(seq) + " shorter than kernel " +
                     std::to_string(ks));
  }
  if (bias.shape() != Shape{od}) throw ShapeError("causal_conv1d: bias " + shape_str(bias.shape()));
  std::vector<float> out(nb * seq * od);
  const float* X = x.data().data();
  const float* W = w.data().data();
  const float* B = bias.data().data();
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      float* o = out.data() + (b * seq + t) * od;
      std::copy_n(B, od, o);
      for (std::size_t j = 0; j < ks && j <= t; ++j) {
        const float* xr = X + (b * seq + t - j) * ch;
        for (std::size_t c = 0; c < ch; ++c) {
          const float xv = xr[c];
          const float* wr = W + (j * ch + c) * od;
          for (std::size_t e = 0; e < od; ++e) o[e] += xv * wr[e];
        }
      }
    }
  }
  return detail::make_result({nb, seq, od}, std::move(out), {x, w, bias}, [nb, seq, ch, ks, od](Node& o) {
    const float* X = o.inputs[0]->data.data();
    const float* W = o.inputs[1]->data.data();
    float* gx = input_grad(o, 0);
    float* gw = input_grad(o, 1);
    float* gb = input_grad(o, 2);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t t = 0; t < seq; ++t) {
        const float* g = o.grad.data() + (b * seq + t) * od;
        if (gb) {
          for (std::size_t e = 0; e < od; ++e) gb[e] += g[e];
        }
        for (std::size_t j = 0; j < ks && j <= t; ++j) {
          const std::size_t src = (b * seq + t - j) * ch;
          for (std::size_t c = 0; c < ch; ++c) {
            const float* wr = W + (j * ch + c) * od;
            if (gx) {
              float s = 0.0f;
              for (std::size_t e = 0; e < od; ++e) s += g[e] * wr[e];
              gx[src + c] += s;
            }
            if (gw) {
              float* gwr = gw + (j * ch + c) * od;
              const float xv = X[src + c];
              for (std::size_t e = 0; e < od; ++e) gwr[e] += xv * g[e];
            }
          }
        }
      }
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be 2-D, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " rows");
  }
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  auto probs = std::make_shared<std::vector<float>>(n * c);
  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  const float* L = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= c) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(lab[i]) + " outside [0, " + std::to_string(c) +
                       ")");
    }
    const float* row = L + i * c;
    const float mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double log_z = std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      (*probs)[i * c + j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx) - log_z));
    }
    total += log_z - static_cast<double>(row[lab[i]] - mx);
  }
  const float loss = static_cast<float>(total / static_cast<double>(n));
  return detail::make_result({1}, {loss}, {logits}, [n, c, probs, lab](Node& o) {
    float* g = input_grad(o, 0);
    if (!g) return;
    const float scale_g = o.grad[0] / static_cast<float>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const float target = static_cast<int>(j) == lab[i] ? 1.0f : 0.0f;
        g[i * c + j] += scale_g * ((*probs)[i * c + j] - target);
      }
    }
  });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mse");
  const std::size_t n = pred.numel();
  if (n == 0) throw ShapeError("mse: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.data()[i]) - target.data()[i];
    s += d * d;
  }
  return detail::make_result({1}, {static_cast<float>(s / static_cast<double>(n))}, {pred, target}, [n](Node& o) {
    const float* P = o.inputs[0]->data.data();
    const float* T = o.inputs[1]->data.data();
    const float k = 2.0f * o.grad[0] / static_cast<float>(n);
    if (float* g = input_grad(o, 0)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += k * (P[i] - T[i]);
    }
    if (float* g = input_grad(o, 1)) {
      for (std::size_t i = 0; i < n; ++i) g[i] -= k * (P[i] - T[i]);
    }
  });
}

}  // namespace tcpllm
