#include <doctest.h>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "tcpllm/errors.hpp"
#include "tcpllm/ops.hpp"
#include "tcpllm/optim.hpp"
#include "tcpllm/policy.hpp"

using namespace tcpllm;
using namespace tcpllm::model;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor random_states(std::size_t b, std::size_t seq, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.2f);
  std::vector<float> v(b * seq * 4);
  for (auto& x : v) x = u(rng);
  return Tensor::from_data({b, seq, 4}, std::move(v));
}

Tensor random_tokens(Shape s, std::mt19937_64& rng) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> v(numel_of(s));
  for (auto& x : v) x = nd(rng);
  return Tensor::from_data(std::move(s), std::move(v));
}

void randomize(const Tensor& t, std::mt19937_64& rng, float sd = 0.3f) {
  Tensor tt = t;
  std::normal_distribution<float> nd(0.0f, sd);
  for (auto& x : tt.data_mut()) x = nd(rng);
}

telemetry::Trajectory make_traj(std::size_t t_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  telemetry::Trajectory tr;
  tr.source = "test";
  tr.episode = "e";
  std::vector<double> r;
  for (std::size_t t = 0; t < t_len; ++t) {
    tr.states.push_back({100.0 * u(rng), 0.1 * u(rng), 4.0 + 10.0 * u(rng), 100.0 * u(rng)});
    tr.actions.push_back(sim::cca_from_index(static_cast<int>(rng() % 3)));
    r.push_back(telemetry::compute_reward(tr.states.back()[0], tr.states.back()[2], tr.states.back()[1]));
  }
  tr.returns = telemetry::compute_returns(r);
  return tr;
}

const Normalizer kNorm{100.0, 4.0};

struct Twin {
  ParamStore store;
  std::unique_ptr<Backbone> bb;
  Twin(const BackboneConfig& cfg, std::uint64_t seed, std::size_t rank) {
    std::mt19937_64 rng(seed);
    bb = std::make_unique<Backbone>(cfg, store, rng);
    bb->freeze_base();
    if (rank) bb->attach_attention_lora(rank, rng);
  }
};

}  // namespace

TEST_CASE("normalizer") {
  const auto s = kNorm.scale({100.0, 0.0, 8.0, 50.0});
  CHECK(s[0] == 1.0);
  CHECK(s[1] == 0.0);
  CHECK(s[2] == 2.0);
  CHECK(s[3] == 0.5);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 150.0);
  for (int i = 0; i < 100; ++i) {
    const std::array<double, 4> raw{u(rng), u(rng) / 150.0, u(rng), u(rng)};
    const auto back = kNorm.unscale(kNorm.scale(raw));
    for (int m = 0; m < 4; ++m) CHECK(std::abs(back[m] - raw[m]) < 1e-6);
  }
  CHECK_THROWS_AS(Normalizer{}.scale({1, 0, 1, 1}), ConfigError);
}

TEST_CASE("per-metric encoder") {
  ParamStore store;
  std::mt19937_64 rng(2);
  EncoderConfig cfg;
  cfg.token_dim = 16;
  Encoder enc(cfg, store, rng);
  auto x = random_states(2, 10, rng);
  const auto y = enc.encode_state(x);
  CHECK(y.shape() == Shape{2, 10, 4, 16});

  // Per-token zero mean and unit variance.
  const auto v = y.data();
  for (std::size_t tok = 0; tok < 2 * 10 * 4; ++tok) {
    double m = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) m += v[tok * 16 + j];
    m /= 16;
    for (std::size_t j = 0; j < 16; ++j) var += (v[tok * 16 + j] - m) * (v[tok * 16 + j] - m);
    var /= 16;
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }

  // Identical states give identical token blocks; batch order is carried through.
  auto xd = x.data_mut();
  for (std::size_t i = 0; i < 4; ++i) xd[4 + i] = xd[i];
  std::vector<float> swapped(xd.begin(), xd.end());
  std::swap_ranges(swapped.begin(), swapped.begin() + 40, swapped.begin() + 40);
  const auto y1 = enc.encode_state(x);
  const auto y2 = enc.encode_state(Tensor::from_data({2, 10, 4}, swapped));
  const auto a = y1.data(), b = y2.data();
  for (std::size_t j = 0; j < 64; ++j) CHECK(a[j] == a[64 + j]);
  for (std::size_t j = 0; j < 640; ++j) {
    CHECK(a[j] == b[640 + j]);
    CHECK(a[640 + j] == b[j]);
  }

  // Zero weights: every token is layer_norm(bias).
  std::vector<float> bias(16);
  for (std::size_t j = 0; j < 16; ++j) bias[j] = 0.1f * static_cast<float>(j * j % 7);
  for (const char* m : kMetricNames) {
    Tensor w = store.get(std::string("enc.fc_") + m + ".w"), bb = store.get(std::string("enc.fc_") + m + ".b");
    for (auto& e : w.data_mut()) e = 0.0f;
    std::copy(bias.begin(), bias.end(), bb.data_mut().begin());
  }
  const auto expect = layer_norm(Tensor::from_data({16}, bias), cfg.eps);
  const auto z = enc.encode_state(x);
  for (std::size_t tok = 0; tok < 80; ++tok)
    for (std::size_t j = 0; j < 16; ++j) CHECK(z.data()[tok * 16 + j] == expect.data()[j]);

  CHECK_THROWS_AS(enc.encode_state(Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(enc.encode_timeseries_cnn(x), ContractError);
}

TEST_CASE("temporal cnn encoder") {
  ParamStore store;
  std::mt19937_64 rng(3);
  EncoderConfig cfg;
  cfg.variant = EncoderVariant::TemporalCnn;
  cfg.token_dim = 32;
  Encoder enc(cfg, store, rng);
  const auto x = random_states(1, 20, rng);
  const auto y = enc.encode_timeseries_cnn(x);
  CHECK(y.shape() == Shape{1, 20, 32});

  // Perturbing any suffix leaves every earlier output untouched.
  for (std::size_t t = 0; t < 20; ++t) {
    std::vector<float> p(x.data().begin(), x.data().end());
    for (std::size_t i = t * 4; i < p.size(); ++i) p[i] += 0.5f;
    const auto yp = enc.encode_timeseries_cnn(Tensor::from_data({1, 20, 4}, p));
    for (std::size_t i = 0; i < t * 32; ++i) CHECK(yp.data()[i] == y.data()[i]);
    bool changed = false;
    for (std::size_t i = t * 32; i < (t + 1) * 32; ++i) changed |= yp.data()[i] != y.data()[i];
    CHECK(changed);
  }

  // Kernel 1: a per-timestep affine map of the four metrics.
  ParamStore s1;
  EncoderConfig c1 = cfg;
  c1.cnn_kernel = 1;
  Encoder e1(c1, s1, rng);
  const Tensor w = reshape(s1.get("enc.cnn.w"), {4, 32});
  const auto direct = layer_norm(linear(reshape(x, {20, 4}), w, s1.get("enc.cnn.b")), c1.eps);
  const auto conv = e1.encode_timeseries_cnn(x);
  for (std::size_t i = 0; i < direct.numel(); ++i) CHECK(conv.data()[i] == doctest::Approx(direct.data()[i]).epsilon(1e-5));
}

TEST_CASE("effective weight") {
  std::mt19937_64 rng(4);
  const auto w0 = random_tokens({6, 5}, rng), a = random_tokens({6, 2}, rng), b = random_tokens({2, 5}, rng);
  const auto w0_copy = values(w0);
  CHECK(values(effective_weight(w0, a, Tensor::zeros({2, 5}))) == values(w0));
  const auto w = effective_weight(w0, a, b);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t l = 0; l < 5; ++l) {
      float s = 0.0f;
      for (std::size_t j = 0; j < 2; ++j) s += a.data()[i * 2 + j] * b.data()[j * 5 + l];
      CHECK(w.data()[i * 5 + l] == w0.data()[i * 5 + l] + s);
    }
  std::vector<float> eye(36, 0.0f);
  for (std::size_t i = 0; i < 6; ++i) eye[i * 7] = 1.0f;
  const auto b6 = random_tokens({6, 5}, rng);
  const auto wi = effective_weight(w0, Tensor::from_data({6, 6}, eye), b6);
  for (std::size_t i = 0; i < 30; ++i) CHECK(wi.data()[i] == w0.data()[i] + b6.data()[i]);
  CHECK(values(w0) == w0_copy);
  try {
    effective_weight(w0, a, random_tokens({3, 5}, rng));
    FAIL("shape mismatch accepted");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[3,5]") != std::string::npos);
  }
}

TEST_CASE("lora identity, causality and shapes") {
  BackboneConfig cfg;
  Twin adapted(cfg, 5, 4), plain(cfg, 5, 0);
  CHECK(adapted.store.base_hash() == plain.store.base_hash());
  std::mt19937_64 rng(6);
  const auto x = random_tokens({1, 6, 64}, rng);
  const auto ya = adapted.bb->forward(x), yp = plain.bb->forward(x);
  CHECK(ya.shape() == Shape{1, 6, 64});
  CHECK(values(ya) == values(yp));

  std::vector<float> p(x.data().begin(), x.data().end());
  for (std::size_t j = 4 * 64; j < 5 * 64; ++j) p[j] += 1.0f;
  const auto yq = adapted.bb->forward(Tensor::from_data({1, 6, 64}, p));
  for (std::size_t j = 0; j < 4 * 64; ++j) CHECK(yq.data()[j] == ya.data()[j]);

  CHECK_THROWS_AS(adapted.bb->forward(random_tokens({1, 129, 64}, rng)), ShapeError);
  CHECK_THROWS_AS(adapted.bb->attach_lora("layer0.attn_q", 2, rng), ContractError);
  CHECK_THROWS_AS(adapted.bb->attach_lora("layer0.attn_q", 65, rng), std::exception);
}

TEST_CASE("lora counts and trainable fractions") {
  BackboneConfig cfg;
  Twin t(cfg, 7, 4);
  CHECK(t.bb->adapters().size() == 8);
  for (const auto& [name, ad] : t.bb->adapters()) {
    CHECK(ad.param_count() == 2 * 64 * 4);
    CHECK(double(ad.param_count()) / double(64 * 64) == 0.125);
  }
  CHECK(t.bb->lora_param_count() == 8 * 512);
  CHECK(t.store.trainable_count() == 8 * 512);

  BackboneConfig big;
  big.token_dim = 512;
  big.ff_dim = 512;
  big.layers = 1;
  big.context_len = 60;
  Twin tb(big, 8, 4);
  for (const auto& [name, ad] : tb.bb->adapters()) {
    CHECK(ad.param_count() == 4096);
    const std::size_t full = tb.store.get("base." + name + ".w").numel();
    CHECK(full == 262144);
    CHECK(double(ad.param_count()) / double(full) == doctest::Approx(0.015625));
  }
}

TEST_CASE("freezing") {
  BackboneConfig cfg;
  cfg.token_dim = 16;
  cfg.ff_dim = 32;
  Twin t(cfg, 9, 2);
  const std::string h = t.store.frozen_hash();
  CHECK(h.size() == 64);
  CHECK(t.bb->freeze_base() == h);
  for (const auto& name : t.store.names()) {
    if (t.store.role(name) == ParamRole::Base) CHECK_FALSE(t.store.get(name).requires_grad());
  }
  std::mt19937_64 rng(10);
  for (const auto& [name, ad] : t.bb->adapters()) randomize(ad.b, rng);
  Adam opt(t.store.trainable(), AdamConfig{0.05f});
  for (const auto& n : opt.state_names()) CHECK(n.rfind("lora.", 0) == 0);
  for (int step = 0; step < 5; ++step) {
    opt.zero_grad();
    backward(sum(t.bb->forward(random_tokens({2, 8, 16}, rng))));
    opt.step();
  }
  CHECK(t.store.base_hash() == h);
  CHECK_THROWS_AS(t.store.add("base.extra.w", Tensor::zeros({2}, true), ParamRole::Base), ContractError);
}

TEST_CASE("merge") {
  BackboneConfig cfg;
  cfg.token_dim = 16;
  cfg.ff_dim = 32;
  Twin t(cfg, 11, 2);
  std::mt19937_64 rng(12);
  const auto x = random_tokens({2, 7, 16}, rng);
  const std::string h = t.store.frozen_hash();

  const Tensor w0 = t.store.get("base.layer0.attn_q.w");
  t.bb->merge_lora("layer0.attn_q");
  CHECK(values(t.bb->weight("layer0.attn_q")) == values(w0));
  CHECK_THROWS_AS(t.bb->merge_lora("layer0.attn_q"), ContractError);

  for (const auto& [name, ad] : t.bb->adapters()) randomize(ad.b, rng);
  const auto before = t.bb->forward(x);
  std::vector<std::string> targets;
  for (const auto& [name, ad] : t.bb->adapters())
    if (!ad.merged) targets.push_back(name);
  for (const auto& n : targets) t.bb->merge_lora(n);
  const auto after = t.bb->forward(x);
  for (std::size_t i = 0; i < before.numel(); ++i) CHECK(std::abs(after.data()[i] - before.data()[i]) < 1e-5);
  CHECK(t.store.base_hash() == h);
}

TEST_CASE("higher rank fits a fixed update at least as well") {
  std::mt19937_64 rng(13);
  const auto target = random_tokens({6, 5}, rng);
  auto fit = [&](std::size_t r) {
    std::mt19937_64 r2(14);
    auto a = random_tokens({6, r}, r2);
    auto b = Tensor::zeros({r, 5});
    a = Tensor::from_data({6, r}, values(a), true).named("A");
    b = Tensor::from_data({r, 5}, values(b), true).named("B");
    Adam opt({a, b}, AdamConfig{0.02f});
    const auto w0 = Tensor::zeros({6, 5});
    for (int i = 0; i < 3000; ++i) {
      opt.zero_grad();
      backward(mse(effective_weight(w0, a, b), target));
      opt.step();
    }
    NoGradGuard g;
    return mse(effective_weight(w0, a, b), target).item();
  };
  float prev = fit(1);
  for (std::size_t r = 2; r <= 5; ++r) {
    const float cur = fit(r);
    CHECK(cur <= prev + 1e-6f);
    prev = cur;
  }
  CHECK(prev < 1e-4f);
}

TEST_CASE("head") {
  ParamStore store;
  std::mt19937_64 rng(15);
  Head head(HeadConfig{8}, store, rng);
  Tensor w = store.get("head.w"), b = store.get("head.b");
  const std::vector<float> wsave(w.data().begin(), w.data().end());
  for (auto& e : w.data_mut()) e = 0.0f;
  b.data_mut()[0] = 0.1f;
  b.data_mut()[1] = 0.2f;
  b.data_mut()[2] = 0.3f;
  const auto h = random_tokens({2, 5, 8}, rng);
  const auto lg = head.predict_logits(h, std::vector<std::size_t>{4, 1});
  CHECK(lg.shape() == Shape{2, 3});
  CHECK(values(lg) == std::vector<float>{0.1f, 0.2f, 0.3f, 0.1f, 0.2f, 0.3f});
  CHECK_THROWS_AS(head.predict_logits(h, 5), ShapeError);

  std::copy(wsave.begin(), wsave.end(), w.data_mut().begin());
  randomize(w, rng, 1.0f);
  const auto rows = random_tokens({4, 8}, rng);
  const std::vector<int> labels{0, 2, 1, 1};
  auto loss = [&] { return softmax_cross_entropy(head.logits(rows), labels); };
  const auto rm = testing::to_mat(rows);
  auto ref = [&](const testing::RefParams& p) {
    return testing::ref_cross_entropy(testing::ref_linear(rm, p.at("head.w"), p.at("head.b")), labels);
  };
  const auto r = testing::grad_check(loss, {{"head.w", w}, {"head.b", b}}, ref);
  CHECK(r.max_rel < 1e-3);
}

TEST_CASE("select_cca") {
  CHECK(select_cca(std::vector<float>{0.1f, 2.0f, -1.0f}) == sim::CcaId::Bbr);
  CHECK(select_cca(std::vector<float>{0.9f, 0.9f, 0.2f}) == sim::CcaId::Cubic);
  CHECK(select_cca(std::vector<float>{0.2f, 0.9f, 0.9f}) == sim::CcaId::Bbr);
  CHECK_THROWS_AS(select_cca(std::vector<float>{0.1f, std::nanf(""), 0.0f}), DecisionError);
  CHECK_THROWS_AS(select_cca(std::vector<float>{0.1f, 0.2f}), DecisionError);
  std::mt19937_64 rng(16);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::uniform_real_distribution<float> pos(0.5f, 4.0f);
  for (int i = 0; i < 1000; ++i) {
    std::vector<float> x{nd(rng), nd(rng), nd(rng)};
    const float a = pos(rng), c = nd(rng);
    std::vector<float> y{a * x[0] + c, a * x[1] + c, a * x[2] + c}, z{x[0] + c, x[1] + c, x[2] + c};
    const auto base = select_cca(x);
    const bool near_tie = std::abs(x[0] - x[1]) < 1e-3f || std::abs(x[1] - x[2]) < 1e-3f || std::abs(x[0] - x[2]) < 1e-3f;
    if (!near_tie) {
      CHECK(select_cca(y) == base);
      CHECK(select_cca(z) == base);
    }
  }
}

TEST_CASE("tokenize layout") {
  const TokenLayout fc{6};
  auto w = tokenize(make_traj(20, 1), 20, kNorm, 1.0);
  REQUIRE(w.size() == 1);
  CHECK(fc.window_tokens(w[0].steps()) == 120);
  CHECK(w[0].pad == 0);

  w = tokenize(make_traj(5, 2), 20, kNorm, 1.0);
  REQUIRE(w.size() == 1);
  CHECK(fc.pad_tokens(w[0]) == 90);
  CHECK(w[0].label_count() == 5);
  for (std::size_t t = 0; t < 15; ++t) CHECK(w[0].actions[t] == -1);

  const std::size_t k = 8;
  const auto tr = make_traj(30, 3);
  w = tokenize(tr, k, kNorm, 2.0);
  REQUIRE(w.size() == 23);
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    std::size_t shared = 0;
    for (std::size_t t = 1; t < k; ++t) {
      if (w[i].states[t] == w[i + 1].states[t - 1] && w[i].returns[t] == w[i + 1].returns[t - 1] &&
          w[i].actions[t] == w[i + 1].actions[t - 1])
        shared += 6;
    }
    CHECK(shared == 6 * (k - 1));
  }
  CHECK(w[0].returns[0] == static_cast<float>(tr.returns[0] / 2.0));
  CHECK(w[0].actions[3] == sim::cca_index(tr.actions[3]));
  CHECK(fc.readout(2) == 16);
  CHECK(fc.action_slot(2) == 17);

  const TokenizeOptions opt{5, 5};
  w = tokenize(tr, k, kNorm, 1.0, opt);
  CHECK(w.size() == 6);
  CHECK(w[0].pad == 3);
}

TEST_CASE("decide") {
  ModelConfig mc;
  mc.seed = 17;
  Policy pol(mc);
  pol.normalizer = kNorm;
  const auto tr = make_traj(12, 4);
  const auto w = tokenize(tr, mc.context_steps, kNorm, 1.0);
  const std::size_t before = pol.backbone().forward_count();
  const auto d = pol.decide(w.back(), 3, 42.0);
  CHECK(pol.backbone().forward_count() == before + 1);
  CHECK(d.inference_steps == 1);
  CHECK(d.flow_id == 3);
  CHECK(d.time_s == 42.0);
  CHECK(d.chosen == select_cca(d.logits));
  const auto d2 = pol.decide(w.back(), 3, 42.0);
  CHECK(d2.chosen == d.chosen);
  CHECK(d2.logits == d.logits);
}

TEST_CASE("trainable parameter count formula") {
  for (auto variant : {EncoderVariant::PerMetricFc, EncoderVariant::TemporalCnn}) {
    ModelConfig mc;
    mc.encoder.variant = variant;
    mc.backbone.token_dim = mc.encoder.token_dim = 32;
    mc.backbone.ff_dim = 64;
    mc.lora_rank = 3;
    Policy pol(mc);
    const std::size_t d = 32, r = 3, k = mc.encoder.cnn_kernel;
    const std::size_t lora = mc.backbone.layers * 4 * r * (d + d);
    const std::size_t enc = variant == EncoderVariant::PerMetricFc ? 4 * (d + d) : k * 4 * d + d;
    const std::size_t embed = d + d + 3 * d;
    const std::size_t head = d * 3 + 3;
    CHECK(pol.encoder().param_count() == enc);
    CHECK(pol.backbone().lora_param_count() == lora);
    CHECK(pol.params().trainable_count() == lora + enc + embed + head);
    for (const auto& n : pol.params().trainable_names()) {
      const bool known = n.rfind("lora.", 0) == 0 || n.rfind("enc.", 0) == 0 || n.rfind("head.", 0) == 0 ||
                         n.rfind("emb.", 0) == 0;
      CHECK(known);
    }
  }
}
