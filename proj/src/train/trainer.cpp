#include "tcpllm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <random>
#include <set>

#include <json.hpp>

#include "tcpllm/errors.hpp"
#include "tcpllm/ops.hpp"

namespace tcpllm::train {

using nlohmann::json;

std::string mode_name(Mode m) { return m == Mode::Sl ? "sl" : "rl"; }

Mode mode_from_name(const std::string& s) {
  if (s == "sl") return Mode::Sl;
  if (s == "rl") return Mode::Rl;
  throw ConfigError("unknown training mode '" + s + "' (expected sl or rl)");
}

std::string sl_task_name(SlTask t) { return t == SlTask::Classify ? "classify" : "regress"; }

SlTask sl_task_from_name(const std::string& s) {
  if (s == "classify") return SlTask::Classify;
  if (s == "regress") return SlTask::Regress;
  throw ConfigError("unknown sl task '" + s + "' (expected classify or regress)");
}

bool TrainConfig::should_stop(const EpochRecord& rec) const {
  if (stop_test_acc <= 0.0 && stop_test_loss <= 0.0) return false;
  return (stop_test_acc <= 0.0 || rec.test_acc >= stop_test_acc) &&
         (stop_test_loss <= 0.0 || rec.test_loss < stop_test_loss);
}

void TrainConfig::validate(const model::ModelConfig& mc) const {
  if (!(lr > 0.0f)) throw ConfigError("train lr must be > 0");
  if (epochs == 0) throw ConfigError("train epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("train batch_size must be >= 1");
  if (grad_accum_steps == 0) throw ConfigError("train grad_accum_steps must be >= 1");
  if (window_stride == 0) throw ConfigError("train window_stride must be >= 1");
  if (stop_test_acc < 0.0 || stop_test_acc > 1.0) throw ConfigError("train stop_test_acc must be in [0, 1]");
  if (stop_test_loss < 0.0) throw ConfigError("train stop_test_loss must be >= 0");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("train test_fraction must be in [0, 1)");
  if (!(target_return_quantile >= 0.0 && target_return_quantile <= 1.0)) {
    throw ConfigError("train target_return_quantile must be in [0, 1]");
  }
  if (mc.context_steps * mc.slots_per_step() > mc.backbone.context_len) {
    throw ConfigError("context_steps exceed the backbone context");
  }
  if (mode == Mode::Sl && sl_task == SlTask::Regress && !mc.regression_head) {
    throw ConfigError("sl regression needs model regression_head = true");
  }
}

void TrainReport::write_jsonl(std::ostream& os) const {
  for (const auto& e : epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["test_loss"] = e.test_loss;
    j["train_acc"] = e.train_acc;
    j["test_acc"] = e.test_acc;
    j["wall_s"] = e.wall_s;
    os << j.dump() << '\n';
  }
}

double compute_accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("compute_accuracy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t c = logits.dim(1);
  const auto d = logits.data();
  std::size_t seen = 0, hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    ++seen;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (d[i * c + j] > d[i * c + best]) best = j;
    }
    if (static_cast<int>(best) == labels[i]) ++hit;
  }
  return seen ? static_cast<double>(hit) / static_cast<double>(seen) : -1.0;
}

GradAccumulator::GradAccumulator(std::vector<Tensor> params, AdamConfig opt, std::size_t accum, float clip_max_norm)
    : params_(params), opt_(std::move(params), opt), accum_(accum), clip_(clip_max_norm) {
  if (accum_ == 0) throw ConfigError("grad_accum_steps must be >= 1");
}

bool GradAccumulator::accumulate(const Tensor& batch_loss) {
  backward(scale(batch_loss, 1.0f / static_cast<float>(accum_)));
  if (++pending_ < accum_) return false;
  step();
  return true;
}

bool GradAccumulator::flush() {
  if (pending_ == 0) return false;
  step();
  return true;
}

void GradAccumulator::step() {
  last_clip_ = clip_ > 0.0f ? clip_global_norm(params_, clip_) : 1.0f;
  opt_.step();
  opt_.zero_grad();
  pending_ = 0;
  ++steps_;
}

void split_episodes(const telemetry::ExperiencePool& pool, double test_fraction, std::uint64_t seed,
                    std::vector<std::string>& train, std::vector<std::string>& test) {
  std::set<std::string> ids;
  for (const auto& t : pool.trajectories()) ids.insert(t.episode);
  std::vector<std::string> order(ids.begin(), ids.end());
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(order.size())));
  if (test_fraction > 0.0 && n_test == 0 && order.size() > 1) n_test = 1;
  if (n_test >= order.size()) n_test = order.size() > 1 ? order.size() - 1 : 0;
  test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
}

namespace {

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

telemetry::ExperiencePool subset(const telemetry::ExperiencePool& pool, const std::vector<std::string>& episodes) {
  const std::set<std::string> keep(episodes.begin(), episodes.end());
  telemetry::ExperiencePool out;
  for (const auto& t : pool.trajectories()) {
    if (keep.count(t.episode)) out.append(t);
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch, std::mt19937_64* rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (rng) std::shuffle(idx.begin(), idx.end(), *rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  }
  return out;
}

struct StepResult {
  Tensor loss;
  double acc = -1.0;
};

using StepFn = std::function<StepResult(const std::vector<std::size_t>&, bool test)>;

TrainReport run_epochs(model::Policy& policy, const TrainConfig& cfg, std::size_t n_train, std::size_t n_test,
                       const StepFn& step_fn, const std::function<void(const EpochRecord&)>& on_epoch) {
  TrainReport report;
  report.train_examples = n_train;
  report.test_examples = n_test;
  GradAccumulator acc(policy.params().trainable(), AdamConfig{cfg.lr}, cfg.grad_accum_steps, cfg.clip_max_norm);
  std::mt19937_64 rng(cfg.seed);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0, acc_sum = 0.0;
    std::size_t loss_n = 0, acc_n = 0;
    for (const auto& group : make_batches(n_train, cfg.batch_size, &rng)) {
      StepResult r = step_fn(group, false);
      loss_sum += r.loss.item();
      ++loss_n;
      if (r.acc >= 0.0) {
        acc_sum += r.acc;
        ++acc_n;
      }
      acc.accumulate(r.loss);
    }
    acc.flush();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0;
    rec.train_acc = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
    if (n_test > 0) {
      NoGradGuard ng;
      double tl = 0.0, ta = 0.0;
      std::size_t tn = 0, tan = 0;
      for (const auto& group : make_batches(n_test, 64, nullptr)) {
        StepResult r = step_fn(group, true);
        tl += r.loss.item();
        ++tn;
        if (r.acc >= 0.0) {
          ta += r.acc;
          ++tan;
        }
      }
      rec.test_loss = tl / static_cast<double>(tn);
      rec.test_acc = tan ? ta / static_cast<double>(tan) : 0.0;
    }
    rec.wall_s = cfg.record_wall_time
                     ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                     : 0.0;
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (n_test > 0 && cfg.should_stop(rec)) break;
  }
  report.optimizer_steps = acc.steps();
  return report;
}

void require_nonempty(const telemetry::ExperiencePool& pool, const char* what) {
  if (pool.empty()) throw ConfigError(std::string(what) + ": empty pool");
}

}  // namespace

void fit_conditioning(model::Policy& policy, const telemetry::ExperiencePool& pool, double q) {
  require_nonempty(pool, "fit_conditioning");
  policy.normalizer = model::Normalizer::fit(pool);
  double scale = 0.0;
  std::vector<double> heads;
  for (const auto& t : pool.trajectories()) {
    for (double r : t.returns) scale = std::max(scale, std::abs(r));
    if (!t.returns.empty()) heads.push_back(t.returns.front());
  }
  policy.return_scale = scale > 0.0 ? scale : 1.0;
  policy.target_return = heads.empty() ? 0.0 : quantile(heads, q);
}

TrainReport train_rl(model::Policy& policy, const telemetry::ExperiencePool& pool, const TrainConfig& cfg,
                     const std::function<void(const EpochRecord&)>& on_epoch) {
  require_nonempty(pool, "train_rl");
  cfg.validate(policy.config());
  std::vector<std::string> tr_ep, te_ep;
  split_episodes(pool, cfg.test_fraction, cfg.seed, tr_ep, te_ep);
  const auto train_pool = subset(pool, tr_ep);
  fit_conditioning(policy, train_pool, cfg.target_return_quantile);

  const std::size_t k = policy.config().context_steps;
  const model::TokenizeOptions opt{cfg.window_stride, cfg.window_min_len};
  auto windows_of = [&](const telemetry::ExperiencePool& p) {
    std::vector<model::Window> out;
    for (const auto& t : p.trajectories()) {
      for (auto& w : model::tokenize(t, k, policy.normalizer, policy.return_scale, opt)) out.push_back(std::move(w));
    }
    return out;
  };
  const auto train_w = windows_of(train_pool);
  const auto test_w = windows_of(subset(pool, te_ep));
  if (train_w.empty()) throw ConfigError("train_rl: no training windows");

  const StepFn step = [&](const std::vector<std::size_t>& idx, bool test) {
    const auto& src = test ? test_w : train_w;
    std::vector<model::Window> batch;
    batch.reserve(idx.size());
    for (std::size_t i : idx) batch.push_back(src[i]);
    std::vector<int> labels;
    const Tensor logits = policy.forward_logits(batch, &labels);
    StepResult r;
    r.loss = softmax_cross_entropy(logits, labels);
    r.acc = compute_accuracy(logits, labels);
    return r;
  };
  TrainReport rep = run_epochs(policy, cfg, train_w.size(), test_w.size(), step, on_epoch);
  rep.train_episodes = tr_ep;
  rep.test_episodes = te_ep;
  return rep;
}

std::vector<SlExample> build_sl_dataset(const telemetry::ExperiencePool& pool, const model::Policy& policy,
                                        const TrainConfig& cfg) {
  const std::size_t k = policy.config().context_steps;
  const model::TokenizeOptions opt{cfg.window_stride, cfg.window_min_len};
  std::vector<SlExample> out;
  for (const auto& t : pool.trajectories()) {
    const auto windows = model::tokenize(t, k, policy.normalizer, policy.return_scale, opt);
    const std::size_t first = cfg.window_min_len == 0 ? k : cfg.window_min_len;
    for (std::size_t wi = 0; wi < windows.size(); ++wi) {
      // Window wi ends at timestep `end` (exclusive).
      const std::size_t end = first <= t.horizon() ? first + wi * cfg.window_stride : t.horizon();
      SlExample ex;
      ex.window = windows[wi];
      ex.label = ex.window.actions.back();
      std::fill(ex.window.returns.begin(), ex.window.returns.end(), 0.0f);
      std::fill(ex.window.actions.begin(), ex.window.actions.end(), -1);
      ex.episode = t.episode;
      if (end < t.horizon()) {
        ex.target = static_cast<float>(t.states[end][0] / policy.normalizer.capacity_mbps);
      } else if (cfg.sl_task == SlTask::Regress) {
        continue;
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

TrainReport train_sl(model::Policy& policy, const telemetry::ExperiencePool& pool, const TrainConfig& cfg,
                     const std::function<void(const EpochRecord&)>& on_epoch) {
  require_nonempty(pool, "train_sl");
  cfg.validate(policy.config());
  std::vector<std::string> tr_ep, te_ep;
  split_episodes(pool, cfg.test_fraction, cfg.seed, tr_ep, te_ep);
  const auto train_pool = subset(pool, tr_ep);
  fit_conditioning(policy, train_pool, cfg.target_return_quantile);
  const auto train_x = build_sl_dataset(train_pool, policy, cfg);
  const auto test_x = build_sl_dataset(subset(pool, te_ep), policy, cfg);
  if (train_x.empty()) throw ConfigError("train_sl: empty dataset");

  const bool classify = cfg.sl_task == SlTask::Classify;
  const StepFn step = [&](const std::vector<std::size_t>& idx, bool test) {
    const auto& src = test ? test_x : train_x;
    std::vector<model::Window> batch;
    std::vector<int> labels;
    std::vector<float> targets;
    for (std::size_t i : idx) {
      batch.push_back(src[i].window);
      labels.push_back(src[i].label);
      targets.push_back(src[i].target);
    }
    StepResult r;
    if (classify) {
      const Tensor logits = policy.head().logits(policy.last_step_hidden(batch));
      r.loss = softmax_cross_entropy(logits, labels);
      r.acc = compute_accuracy(logits, labels);
    } else {
      const Tensor pred = policy.regress(batch);
      const std::size_t n = targets.size();
      const Tensor tgt = Tensor::from_data({n, 1}, targets);
      r.loss = mse(pred, tgt);
      // Share of predictions within 0.05 of capacity.
      std::size_t hit = 0;
      for (std::size_t i = 0; i < n; ++i) hit += std::abs(pred.data()[i] - targets[i]) <= 0.05f;
      r.acc = static_cast<double>(hit) / static_cast<double>(n);
    }
    return r;
  };
  TrainReport rep = run_epochs(policy, cfg, train_x.size(), test_x.size(), step, on_epoch);
  rep.train_episodes = tr_ep;
  rep.test_episodes = te_ep;
  return rep;
}

TrainReport train(model::Policy& policy, const telemetry::ExperiencePool& pool, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  return cfg.mode == Mode::Rl ? train_rl(policy, pool, cfg, on_epoch) : train_sl(policy, pool, cfg, on_epoch);
}

}  // namespace tcpllm::train
