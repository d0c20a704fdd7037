#pragma once
// Double-precision re-implementation of the forward pass, written from the
// op definitions rather than from the library kernels. Finite differences
// are taken on this function.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tcpllm/policy.hpp"

namespace tcpllm::testing {

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

// Parameter values keyed by name; 1-D tensors become 1 × n.
using RefParams = std::map<std::string, Mat>;

inline Mat to_mat(const Tensor& t) {
  const std::size_t cols = t.shape().back();
  Mat m(t.numel() / cols, cols);
  for (std::size_t i = 0; i < t.numel(); ++i) m.v[i] = t.data()[i];
  return m;
}

inline RefParams ref_params(const model::ParamStore& store) {
  RefParams p;
  for (const auto& [name, t] : store.tensors()) p[name] = to_mat(t);
  return p;
}

inline Mat ref_matmul(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k)
      for (std::size_t j = 0; j < b.cols; ++j) c.at(i, j) += a.at(i, k) * b.at(k, j);
  return c;
}

inline Mat ref_add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

inline Mat ref_linear(const Mat& x, const Mat& w, const Mat& b) {
  Mat y = ref_matmul(x, w);
  for (std::size_t i = 0; i < y.rows; ++i)
    for (std::size_t j = 0; j < y.cols; ++j) y.at(i, j) += b.v[j];
  return y;
}

inline Mat ref_gelu(Mat x) {
  const double c = std::sqrt(2.0 / M_PI);
  for (double& v : x.v) v = 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
  return x;
}

inline Mat ref_layer_norm(Mat x, double eps, const Mat* gamma = nullptr, const Mat* beta = nullptr) {
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += x.at(r, j);
    mean /= static_cast<double>(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) var += (x.at(r, j) - mean) * (x.at(r, j) - mean);
    var /= static_cast<double>(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) {
      double y = (x.at(r, j) - mean) / std::sqrt(var + eps);
      if (gamma) y = y * gamma->v[j] + beta->v[j];
      x.at(r, j) = y;
    }
  }
  return x;
}

// Query i of sequence b sees keys j <= i that are valid, and always itself.
inline Mat ref_attention(const Mat& q, const Mat& k, const Mat& v, std::size_t batch, std::size_t heads,
                         std::span<const std::uint8_t> valid) {
  const std::size_t len = q.rows / batch, hd = q.cols / heads;
  Mat out(q.rows, q.cols);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> s(i + 1, -std::numeric_limits<double>::infinity());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          if (j != i && !valid[b * len + j]) continue;
          double dot = 0.0;
          for (std::size_t t = 0; t < hd; ++t) dot += q.at(b * len + i, h * hd + t) * k.at(b * len + j, h * hd + t);
          s[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (double& x : s) {
          x = std::exp(x - mx);
          z += x;
        }
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t t = 0; t < hd; ++t) out.at(b * len + i, h * hd + t) += s[j] / z * v.at(b * len + j, h * hd + t);
      }
  return out;
}

// x rows are (b, t) pairs of `channels` values; w is (kernel·channels) × out.
inline Mat ref_conv1d(const Mat& x, std::size_t batch, const Mat& w, const Mat& bias, std::size_t kernel) {
  const std::size_t seq = x.rows / batch, ch = x.cols, od = w.cols;
  Mat y(x.rows, od);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t e = 0; e < od; ++e) {
        double acc = bias.v[e];
        for (std::size_t j = 0; j < kernel && j <= t; ++j)
          for (std::size_t c = 0; c < ch; ++c) acc += x.at(b * seq + t - j, c) * w.at(j * ch + c, e);
        y.at(b * seq + t, e) = acc;
      }
  return y;
}

inline double ref_cross_entropy(const Mat& logits, std::span<const int> labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.cols; ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) z += std::exp(logits.at(i, j) - mx);
    total += std::log(z) + mx - logits.at(i, static_cast<std::size_t>(labels[i]));
  }
  return total / static_cast<double>(logits.rows);
}

inline Mat ref_weight(const RefParams& p, const std::string& target) {
  Mat w = p.at("base." + target + ".w");
  auto a = p.find("lora." + target + ".A");
  if (a != p.end()) w = ref_add(w, ref_matmul(a->second, p.at("lora." + target + ".B")));
  return w;
}

// Cross-entropy over every labelled step of `batch`, as Policy::forward_logits
// followed by softmax_cross_entropy.
inline double ref_policy_loss(const model::ModelConfig& mc, const RefParams& p, std::span<const model::Window> batch) {
  const std::size_t k = mc.context_steps, d = mc.backbone.token_dim, nb = batch.size();
  const bool fc = mc.encoder.variant == model::EncoderVariant::PerMetricFc;
  const std::size_t slots = mc.slots_per_step(), len = k * slots;
  const double eps_enc = mc.encoder.eps;

  // Per-step sources, indexed by window*k + t.
  Mat ret(nb * k, d), act(nb * k, d), cnn;
  std::vector<Mat> metric(4, Mat(nb * k, d));
  Mat states(nb * k, 4);
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t t = batch[i].pad; t < k; ++t)
      for (std::size_t m = 0; m < 4; ++m) states.at(i * k + t, m) = batch[i].states[t][m];
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      const std::size_t row = i * k + t;
      const bool real = t >= batch[i].pad;
      const double r = real ? batch[i].returns[t] : 0.0;
      const int a = real && batch[i].actions[t] >= 0 ? batch[i].actions[t] : 0;
      for (std::size_t j = 0; j < d; ++j) {
        ret.at(row, j) = r * p.at("emb.ret.w").v[j] + p.at("emb.ret.b").v[j];
        act.at(row, j) = p.at("emb.act.w").at(static_cast<std::size_t>(a), j);
      }
    }
  if (fc) {
    for (std::size_t m = 0; m < 4; ++m) {
      const std::string base = std::string("enc.fc_") + model::kMetricNames[m];
      Mat col(nb * k, 1);
      for (std::size_t r = 0; r < nb * k; ++r) col.at(r, 0) = states.at(r, m);
      metric[m] = ref_layer_norm(ref_linear(col, p.at(base + ".w"), p.at(base + ".b")), eps_enc);
    }
  } else {
    cnn = ref_layer_norm(ref_conv1d(states, nb, p.at("enc.cnn.w"), p.at("enc.cnn.b"), mc.encoder.cnn_kernel), eps_enc);
  }

  Mat h(nb * len, d);
  std::vector<std::uint8_t> valid(nb * len, 0);
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t t = batch[i].pad; t < k; ++t) {
      const std::size_t row = i * k + t;
      std::vector<const Mat*> src{&ret};
      if (fc) {
        for (auto& m : metric) src.push_back(&m);
      } else {
        src.push_back(&cnn);
      }
      for (std::size_t s = 0; s < slots; ++s) {
        const std::size_t tok = i * len + t * slots + s;
        valid[tok] = 1;
        const Mat* from = s + 1 < slots ? src[s] : (batch[i].actions[t] >= 0 ? &act : nullptr);
        if (!from) continue;
        for (std::size_t j = 0; j < d; ++j) h.at(tok, j) = from->at(row, j);
      }
    }

  const Mat& pos = p.at("base.pos.w");
  for (std::size_t r = 0; r < h.rows; ++r)
    for (std::size_t j = 0; j < d; ++j) h.at(r, j) += pos.at(r % len, j);
  const double eps = 1e-5;
  for (std::size_t l = 0; l < mc.backbone.layers; ++l) {
    const std::string pre = "base.layer" + std::to_string(l) + ".";
    const std::string tgt = "layer" + std::to_string(l) + ".";
    auto lin = [&](const Mat& x, const std::string& name) {
      return ref_linear(x, ref_weight(p, tgt + name), p.at(pre + name + ".b"));
    };
    const Mat a = ref_layer_norm(h, eps, &p.at(pre + "ln1.w"), &p.at(pre + "ln1.b"));
    const Mat att = ref_attention(lin(a, "attn_q"), lin(a, "attn_k"), lin(a, "attn_v"), nb, mc.backbone.heads, valid);
    h = ref_add(h, lin(att, "attn_o"));
    const Mat f = ref_layer_norm(h, eps, &p.at(pre + "ln2.w"), &p.at(pre + "ln2.b"));
    h = ref_add(h, lin(ref_gelu(lin(f, "ff1")), "ff2"));
  }
  h = ref_layer_norm(h, eps, &p.at("base.ln_f.w"), &p.at("base.ln_f.b"));

  std::vector<int> labels;
  Mat rows(0, d);
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t t = batch[i].pad; t < k; ++t) {
      if (batch[i].actions[t] < 0) continue;
      const std::size_t tok = i * len + t * slots + slots - 2;
      for (std::size_t j = 0; j < d; ++j) rows.v.push_back(h.at(tok, j));
      ++rows.rows;
      labels.push_back(batch[i].actions[t]);
    }
  return ref_cross_entropy(ref_linear(rows, p.at("head.w"), p.at("head.b")), labels);
}

}  // namespace tcpllm::testing
