#include "tcpllm/policy.hpp"

#include <algorithm>
#include <chrono>

#include "tcpllm/errors.hpp"
#include "tcpllm/ops.hpp"
#include "tcpllm/optim.hpp"

namespace tcpllm::model {

void ModelConfig::validate() const {
  encoder.validate();
  backbone.validate();
  if (encoder.token_dim != backbone.token_dim) throw ConfigError("encoder token_dim must equal backbone token_dim");
  if (context_steps == 0) throw ConfigError("context_steps must be >= 1");
  if (context_steps * slots_per_step() > backbone.context_len) {
    throw ConfigError("context_steps " + std::to_string(context_steps) + " needs " +
                      std::to_string(context_steps * slots_per_step()) + " tokens but context_len is " +
                      std::to_string(backbone.context_len));
  }
  if (encoder.variant == EncoderVariant::TemporalCnn && context_steps < encoder.cnn_kernel) {
    throw ConfigError("context_steps must be >= cnn_kernel");
  }
}

std::size_t Window::label_count() const {
  return static_cast<std::size_t>(std::count_if(actions.begin(), actions.end(), [](int a) { return a >= 0; }));
}

std::vector<Window> tokenize(const telemetry::Trajectory& traj, std::size_t k, const Normalizer& norm,
                             double return_scale, const TokenizeOptions& opt) {
  traj.validate();
  if (k == 0) throw ContractError("tokenize: K must be >= 1");
  if (!(return_scale > 0.0)) throw ContractError("tokenize: return_scale must be > 0");
  const std::size_t t_len = traj.horizon();
  if (t_len == 0) return {};
  const std::size_t stride = std::max<std::size_t>(1, opt.stride);
  const std::size_t first = opt.min_len == 0 ? k : opt.min_len;
  std::vector<std::size_t> ends;
  for (std::size_t e = first; e <= t_len; e += stride) ends.push_back(e);
  if (ends.empty()) ends.push_back(t_len);

  std::vector<Window> out;
  out.reserve(ends.size());
  for (std::size_t e : ends) {
    const std::size_t begin = e > k ? e - k : 0;
    Window w;
    w.pad = k - (e - begin);
    w.returns.assign(k, 0.0f);
    w.states.assign(k, {0.0f, 0.0f, 0.0f, 0.0f});
    w.actions.assign(k, -1);
    for (std::size_t i = begin; i < e; ++i) {
      const std::size_t slot = w.pad + (i - begin);
      const auto s = norm.scale(traj.states[i]);
      w.states[slot] = {static_cast<float>(s[0]), static_cast<float>(s[1]), static_cast<float>(s[2]),
                        static_cast<float>(s[3])};
      w.returns[slot] = static_cast<float>(traj.returns[i] / return_scale);
      w.actions[slot] = sim::cca_index(traj.actions[i]);
    }
    out.push_back(std::move(w));
  }
  return out;
}

Policy::Policy(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t d = cfg_.backbone.token_dim;
  backbone_ = std::make_unique<Backbone>(cfg_.backbone, store_, rng);
  if (cfg_.pretrain_steps > 0) pretrain_base(rng);
  backbone_->freeze_base();
  backbone_->attach_attention_lora(cfg_.lora_rank, rng);
  encoder_ = std::make_unique<Encoder>(cfg_.encoder, store_, rng);
  store_.add("emb.ret.w", uniform_tensor({1, d}, 1.0f, rng, true), ParamRole::Trainable);
  store_.add("emb.ret.b", uniform_tensor({d}, 1.0f, rng, true), ParamRole::Trainable);
  store_.add("emb.act.w", normal_tensor({sim::kNumCcas, d}, 0.02f, rng, true), ParamRole::Trainable);
  head_ = std::make_unique<Head>(HeadConfig{d, sim::kNumCcas, 0.02f}, store_, rng);
  if (cfg_.regression_head) {
    store_.add("head.reg.w", normal_tensor({d, 1}, 0.02f, rng, true), ParamRole::Trainable);
    store_.add("head.reg.b", Tensor::zeros({1}, true), ParamRole::Trainable);
  }
}

void Policy::pretrain_base(std::mt19937_64& rng) {
  // Next-token regression on random token sequences; touches base.* only.
  const std::size_t d = cfg_.backbone.token_dim;
  const std::size_t len = std::min<std::size_t>(cfg_.backbone.context_len, 32);
  const std::size_t batch = 4;
  std::vector<Tensor> base;
  for (const auto& [name, t] : store_.tensors()) base.push_back(t);
  Adam opt(base, AdamConfig{1e-3f});
  std::vector<std::size_t> cur, next;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t + 1 < len; ++t) {
      cur.push_back(b * len + t);
      next.push_back(b * len + t + 1);
    }
  }
  const std::vector<std::uint8_t> valid(batch * len, 1);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (std::size_t step = 0; step < cfg_.pretrain_steps; ++step) {
    std::vector<float> data(batch * len * d);
    // A slowly drifting walk so the next token is predictable from the past.
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<float> x(d);
      for (auto& v : x) v = nd(rng);
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
          x[j] = 0.9f * x[j] + 0.3f * nd(rng);
          data[(b * len + t) * d + j] = x[j];
        }
      }
    }
    const Tensor tokens = Tensor::from_data({batch * len, d}, std::move(data));
    const Tensor out = backbone_->forward(tokens, batch, len, valid);
    const Tensor loss = mse(gather_rows(out, cur), gather_rows(tokens, next));
    opt.zero_grad();
    backward(loss);
    opt.step();
  }
}

Policy::Assembled Policy::assemble(std::span<const Window> batch) const {
  const std::size_t k = cfg_.context_steps;
  const std::size_t d = cfg_.backbone.token_dim;
  const std::size_t slots = cfg_.slots_per_step();
  const std::size_t b = batch.size();
  if (b == 0) throw ContractError("policy: empty batch");
  const std::size_t n = b * k;
  std::vector<float> x(n * 4, 0.0f), r(n, 0.0f);
  std::vector<std::size_t> act_idx(n, 0);
  for (std::size_t i = 0; i < b; ++i) {
    const Window& w = batch[i];
    if (w.steps() != k || w.returns.size() != k || w.actions.size() != k || w.pad >= k) {
      throw ShapeError("policy: window has " + std::to_string(w.steps()) + " steps, expected " + std::to_string(k));
    }
    for (std::size_t t = w.pad; t < k; ++t) {
      const std::size_t row = i * k + t;
      for (std::size_t m = 0; m < 4; ++m) x[row * 4 + m] = w.states[t][m];
      r[row] = w.returns[t];
      if (w.actions[t] >= static_cast<int>(sim::kNumCcas)) throw IndexError("policy: action out of range");
      if (w.actions[t] >= 0) act_idx[row] = static_cast<std::size_t>(w.actions[t]);
    }
  }
  const Tensor states = Tensor::from_data({b, k, 4}, std::move(x));
  std::vector<Tensor> sources;
  sources.push_back(linear(Tensor::from_data({n, 1}, std::move(r)), store_.get("emb.ret.w"), store_.get("emb.ret.b")));
  if (cfg_.encoder.variant == EncoderVariant::PerMetricFc) {
    for (auto& t : encoder_->encode_metrics(states)) sources.push_back(t);
  } else {
    sources.push_back(reshape(encoder_->encode_timeseries_cnn(states), {n, d}));
  }
  sources.push_back(gather_rows(store_.get("emb.act.w"), act_idx));
  const int act_src = static_cast<int>(sources.size()) - 1;

  Assembled a;
  a.batch = b;
  a.len = k * slots;
  std::vector<RowRef> plan(b * a.len, RowRef{-1, 0});
  a.valid.assign(b * a.len, 0);
  for (std::size_t i = 0; i < b; ++i) {
    const Window& w = batch[i];
    for (std::size_t t = w.pad; t < k; ++t) {
      const std::size_t row = i * k + t;
      const std::size_t base = i * a.len + t * slots;
      for (std::size_t s = 0; s + 1 < slots; ++s) plan[base + s] = {static_cast<int>(s), row};
      if (w.actions[t] >= 0) plan[base + slots - 1] = {act_src, row};
      for (std::size_t s = 0; s < slots; ++s) a.valid[base + s] = 1;
    }
  }
  a.tokens = assemble_rows(sources, plan, d);
  return a;
}

Tensor Policy::hidden(std::span<const Window> batch) const {
  const auto a = assemble(batch);
  const Tensor h = backbone_->forward(a.tokens, a.batch, a.len, a.valid);
  return reshape(h, {a.batch, a.len, cfg_.backbone.token_dim});
}

Tensor Policy::last_step_hidden(std::span<const Window> batch) const {
  const auto a = assemble(batch);
  const Tensor h = backbone_->forward(a.tokens, a.batch, a.len, a.valid);
  std::vector<std::size_t> rows(a.batch);
  for (std::size_t i = 0; i < a.batch; ++i) rows[i] = i * a.len + layout().readout(cfg_.context_steps - 1);
  return gather_rows(h, rows);
}

Tensor Policy::regress(std::span<const Window> batch) const {
  if (!cfg_.regression_head) throw ContractError("policy was built without a regression head");
  return linear(last_step_hidden(batch), store_.get("head.reg.w"), store_.get("head.reg.b"));
}

Tensor Policy::forward_logits(std::span<const Window> batch, std::vector<int>* labels) const {
  const auto a = assemble(batch);
  const Tensor h = backbone_->forward(a.tokens, a.batch, a.len, a.valid);
  const TokenLayout lay = layout();
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Window& w = batch[i];
    for (std::size_t t = w.pad; t < w.steps(); ++t) {
      if (w.actions[t] < 0) continue;
      rows.push_back(i * a.len + lay.readout(t));
      if (labels) labels->push_back(w.actions[t]);
    }
  }
  return head_->logits(gather_rows(h, rows));
}

Decision Policy::decide(const Window& context, int flow_id, double time_s) const {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t before = backbone_->forward_count();
  NoGradGuard ng;
  const Tensor hid = hidden(std::span<const Window>(&context, 1));
  const Tensor logits = head_->predict_logits(hid, layout().readout(context.steps() - 1));
  Decision d;
  d.flow_id = flow_id;
  d.time_s = time_s;
  for (std::size_t i = 0; i < sim::kNumCcas; ++i) d.logits[i] = logits.data()[i];
  d.chosen = select_cca(d.logits);
  d.inference_steps = backbone_->forward_count() - before;
  d.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return d;
}

Window decision_window(const Policy& policy, std::span<const std::array<double, 4>> states,
                       std::span<const sim::CcaId> ccas) {
  if (states.empty() || states.size() != ccas.size()) {
    throw ContractError("decision_window: need equally long, non-empty state and CCA histories");
  }
  const std::size_t k = policy.config().context_steps;
  const std::size_t t_len = states.size();
  const std::size_t begin = t_len > k ? t_len - k : 0;
  Window w;
  w.pad = k - (t_len - begin);
  w.returns.assign(k, 0.0f);
  w.states.assign(k, {0.0f, 0.0f, 0.0f, 0.0f});
  w.actions.assign(k, -1);
  double observed = 0.0;
  for (std::size_t i = 0; i < t_len; ++i) {
    if (i >= begin) {
      const std::size_t slot = w.pad + (i - begin);
      const auto s = policy.normalizer.scale(states[i]);
      w.states[slot] = {static_cast<float>(s[0]), static_cast<float>(s[1]), static_cast<float>(s[2]),
                        static_cast<float>(s[3])};
      w.returns[slot] = static_cast<float>((policy.target_return - observed) / policy.return_scale);
      // The choice made after step i is the CCA seen at step i + 1.
      if (i + 1 < t_len) w.actions[slot] = sim::cca_index(ccas[i + 1]);
    }
    observed += telemetry::compute_reward(states[i][0], states[i][2], states[i][1]);
  }
  return w;
}

}  // namespace tcpllm::model
