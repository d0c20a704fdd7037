#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "tcpllm/errors.hpp"
#include "tcpllm/evaluate.hpp"
#include "tcpllm/ops.hpp"
#include "tcpllm/trainer.hpp"

using namespace tcpllm;
using namespace tcpllm::train;
namespace fs = std::filesystem;

namespace {

model::ModelConfig tiny_model(std::uint64_t seed = 1) {
  model::ModelConfig mc;
  mc.seed = seed;
  mc.backbone.token_dim = mc.encoder.token_dim = 16;
  mc.backbone.ff_dim = 32;
  mc.backbone.context_len = 36;
  mc.context_steps = 6;
  mc.lora_rank = 2;
  return mc;
}

TrainConfig tiny_train() {
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.lr = 5e-3f;
  tc.window_stride = 3;
  tc.window_min_len = 3;
  return tc;
}

const telemetry::ExperiencePool& small_pool() {
  static const telemetry::ExperiencePool pool = [] {
    sim::SimConfig cfg;
    cfg.duration_s = 40.0;
    return eval::oracle_pool(cfg, 1, 100, eval::ArmConfig{});
  }();
  return pool;
}

std::vector<unsigned char> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("tcpllm_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("accuracy") {
  const auto lg = Tensor::from_data({3, 3}, {5, 0, 0, 0, 5, 0, 0, 0, 5});
  CHECK(compute_accuracy(lg, std::vector<int>{0, 1, 1}) == doctest::Approx(2.0 / 3.0));
  CHECK(compute_accuracy(lg, std::vector<int>{0, 1, 2}) == 1.0);
  CHECK(compute_accuracy(lg, std::vector<int>{-1, 1, -1}) == 1.0);
  CHECK(compute_accuracy(lg, std::vector<int>{-1, -1, -1}) == -1.0);
}

TEST_CASE("gradient accumulation") {
  CHECK(GradAccumulator::contribution(0.9f, 3) == doctest::Approx(0.3));
  const auto c = Tensor::from_data({4}, {0.5f, -1.0f, 2.0f, 0.25f});
  auto run = [&](std::size_t accum, std::size_t batches) {
    auto w = Tensor::from_data({4}, {1, 2, 3, 4}, true).named("w");
    GradAccumulator acc({w}, AdamConfig{0.01f}, accum, 0.0f);
    for (std::size_t i = 0; i < batches; ++i) acc.accumulate(sum(mul(w, c)));
    CHECK(acc.steps() == batches / accum);
    return std::vector<float>(w.data().begin(), w.data().end());
  };
  const auto one = run(1, 10), three = run(3, 30);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(one[i] - three[i]) < 1e-5);

  auto w = Tensor::from_data({2}, {0, 0}, true).named("w");
  GradAccumulator acc({w}, AdamConfig{0.01f}, 4, 0.0f);
  CHECK_FALSE(acc.accumulate(sum(w)));
  CHECK(acc.flush());
  CHECK(acc.steps() == 1);
  CHECK_FALSE(acc.flush());
}

TEST_CASE("episode split") {
  std::vector<std::string> tr, te;
  split_episodes(small_pool(), 0.2, 1, tr, te);
  CHECK_FALSE(te.empty());
  std::set<std::string> a(tr.begin(), tr.end()), b(te.begin(), te.end());
  for (const auto& e : b) CHECK(a.count(e) == 0);
  std::set<std::string> all;
  for (const auto& t : small_pool().trajectories()) all.insert(t.episode);
  CHECK(a.size() + b.size() == all.size());
}

TEST_CASE("initial loss and gradient flow") {
  model::Policy pol(tiny_model());
  fit_conditioning(pol, small_pool(), 0.9);
  std::vector<model::Window> batch;
  for (const auto& t : small_pool().trajectories()) {
    for (auto& w : model::tokenize(t, 6, pol.normalizer, pol.return_scale)) batch.push_back(std::move(w));
    if (batch.size() >= 16) break;
  }
  std::vector<int> labels;
  const auto logits = pol.forward_logits(batch, &labels);
  auto loss = softmax_cross_entropy(logits, labels);
  CHECK(std::abs(loss.item() - std::log(3.0)) < 0.05 * std::log(3.0));

  auto params = pol.params().trainable();
  Adam opt(params, AdamConfig{1e-2f});
  opt.zero_grad();
  backward(loss);
  opt.step();
  opt.zero_grad();
  labels.clear();
  const auto logits2 = pol.forward_logits(batch, &labels);
  backward(softmax_cross_entropy(logits2, labels));
  for (const auto& name : pol.params().trainable_names()) {
    double n2 = 0.0;
    for (float g : pol.params().get(name).grad()) n2 += double(g) * g;
    INFO(name);
    CHECK(n2 > 0.0);
  }
}

TEST_CASE("single example memorization") {
  model::Policy pol(tiny_model(3));
  fit_conditioning(pol, small_pool(), 0.9);
  const auto ws = model::tokenize(small_pool().trajectories()[0], 6, pol.normalizer, pol.return_scale);
  const std::vector<model::Window> one{ws.front()};
  GradAccumulator acc(pol.params().trainable(), AdamConfig{1e-2f}, 1, 1.0f);
  float last = 0.0f;
  for (int step = 0; step < 200; ++step) {
    std::vector<int> labels;
    const auto lg = pol.forward_logits(one, &labels);
    const auto l = softmax_cross_entropy(lg, labels);
    last = l.item();
    if (last < 1e-3f) break;
    acc.accumulate(l);
  }
  CHECK(last < 1e-3f);
}

TEST_CASE("constant labels are learned in one epoch") {
  telemetry::ExperiencePool pool;
  for (auto t : small_pool().trajectories()) {
    for (auto& a : t.actions) a = sim::CcaId::Pcc;
    pool.append(std::move(t));
  }
  model::Policy pol(tiny_model(4));
  auto tc = tiny_train();
  tc.epochs = 1;
  tc.lr = 1e-2f;
  const auto rep = train_rl(pol, pool, tc);
  REQUIRE(rep.epochs.size() == 1);
  CHECK(rep.epochs[0].test_acc == 1.0);

  // Same pool with early stopping: the first epoch already qualifies.
  model::Policy pol2(tiny_model(4));
  tc.epochs = 5;
  tc.stop_test_acc = 1.0;
  tc.stop_test_loss = 1e9;
  CHECK(train_rl(pol2, pool, tc).epochs.size() == 1);
}

TEST_CASE("early stop rule") {
  TrainConfig tc;
  EpochRecord r;
  r.test_acc = 0.96;
  r.test_loss = 0.05;
  CHECK_FALSE(tc.should_stop(r));
  tc.stop_test_acc = 0.95;
  CHECK(tc.should_stop(r));
  tc.stop_test_loss = 0.1;
  CHECK(tc.should_stop(r));
  r.test_loss = 0.1;
  CHECK_FALSE(tc.should_stop(r));
  r.test_loss = 0.05;
  r.test_acc = 0.9;
  CHECK_FALSE(tc.should_stop(r));
  tc.stop_test_acc = -0.1;
  CHECK_THROWS_AS(tc.validate(model::ModelConfig{}), ConfigError);
}

TEST_CASE("training keeps the base frozen and is deterministic") {
  for (Mode mode : {Mode::Rl, Mode::Sl}) {
    auto tc = tiny_train();
    tc.mode = mode;
    model::Policy a(tiny_model(5)), b(tiny_model(5));
    const std::string h = a.params().frozen_hash();
    const auto ra = train::train(a, small_pool(), tc), rb = train::train(b, small_pool(), tc);
    CHECK(a.params().base_hash() == h);
    CHECK(rb.epochs.size() == ra.epochs.size());
    for (std::size_t e = 0; e < ra.epochs.size(); ++e) {
      CHECK(ra.epochs[e].train_loss == rb.epochs[e].train_loss);
      CHECK(ra.epochs[e].test_loss == rb.epochs[e].test_loss);
      CHECK(ra.epochs[e].wall_s == 0.0);
    }
    std::ostringstream sa, sb;
    ra.write_jsonl(sa);
    rb.write_jsonl(sb);
    CHECK(sa.str() == sb.str());
    CHECK(sa.str().rfind("{\"epoch\":1,\"train_loss\":", 0) == 0);
    CHECK(serialize_tensors(a.params()) == serialize_tensors(b.params()));
  }
  model::Policy p(tiny_model());
  CHECK_THROWS_AS(train_rl(p, telemetry::ExperiencePool{}, tiny_train()), ConfigError);
  CHECK_THROWS_AS(train_sl(p, telemetry::ExperiencePool{}, tiny_train()), ConfigError);
}

TEST_CASE("sl regression task") {
  auto tc = tiny_train();
  tc.mode = Mode::Sl;
  tc.sl_task = SlTask::Regress;
  auto mc = tiny_model(6);
  mc.regression_head = true;
  model::Policy pol(mc);
  const auto rep = train::train(pol, small_pool(), tc);
  REQUIRE(rep.epochs.size() == 2);
  CHECK(rep.epochs[1].train_loss < rep.epochs[0].train_loss);
  for (const auto& ex : build_sl_dataset(small_pool(), pol, tc)) {
    CHECK(ex.label >= 0);
    CHECK(ex.label <= 2);
  }
}

TEST_CASE("checkpoint persistence") {
  TempDir dir;
  model::Policy pol(tiny_model(7));
  auto tc = tiny_train();
  tc.epochs = 1;
  train_rl(pol, small_pool(), tc);
  const auto bin = dir.path / "m.tcpl", meta = dir.path / "m.json";
  save_checkpoint(pol, tc, bin.string(), meta.string());
  const auto bytes = slurp(bin);
  REQUIRE(bytes.size() > 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TCPL");
  CHECK(bytes[4] == 1);

  CheckpointMeta m;
  auto back = load_checkpoint(bin.string(), meta.string(), nullptr, &m);
  CHECK(m.base_hash == pol.params().frozen_hash());
  CHECK(back->normalizer.capacity_mbps == pol.normalizer.capacity_mbps);
  CHECK(back->target_return == pol.target_return);
  for (const auto& [name, t] : pol.params().tensors()) {
    const auto& u = back->params().get(name);
    REQUIRE(u.numel() == t.numel());
    CHECK(std::memcmp(u.data().data(), t.data().data(), t.numel() * sizeof(float)) == 0);
  }
  const auto bin2 = dir.path / "m2.tcpl", meta2 = dir.path / "m2.json";
  save_checkpoint(*back, tc, bin2.string(), meta2.string());
  CHECK(slurp(bin2) == bytes);
  CHECK(slurp(meta2) == slurp(meta));

  // Every single-byte corruption of the payload is caught.
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto bad = bytes;
    const std::size_t pos = rng() % bad.size();
    bad[pos] ^= static_cast<unsigned char>(1u + rng() % 255u);
    std::ofstream(bin2, std::ios::binary | std::ios::trunc).write(reinterpret_cast<const char*>(bad.data()),
                                                                  static_cast<std::streamsize>(bad.size()));
    CHECK_THROWS_AS(load_checkpoint(bin2.string(), meta.string()), IntegrityError);
  }

  auto wrong_version = bytes;
  wrong_version[4] = 2;
  std::ofstream(bin2, std::ios::binary | std::ios::trunc)
      .write(reinterpret_cast<const char*>(wrong_version.data()), static_cast<std::streamsize>(wrong_version.size()));
  CHECK_THROWS_AS(load_checkpoint(bin2.string(), meta.string()), VersionError);

  auto other = tiny_model(7);
  other.backbone.token_dim = other.encoder.token_dim = 8;
  try {
    load_checkpoint(bin.string(), meta.string(), &other);
    FAIL("shape mismatch accepted");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("checkpoint tensor '") != std::string::npos);
  }
  CHECK_THROWS_AS(load_checkpoint((dir.path / "none.tcpl").string(), meta.string()), IoError);
}

TEST_CASE("closed loop with an untrained policy") {
  model::Policy pol(tiny_model(9));
  fit_conditioning(pol, small_pool(), 0.9);
  const auto sc = eval::scenario_by_name("cubic-bbr");
  const auto r = eval::evaluate_policy(pol, sim::SimConfig{}, sc.flows, 1, eval::ArmConfig{});
  std::map<int, int> per_flow;
  for (const auto& d : r.decisions) {
    ++per_flow[d.flow_id];
    CHECK(d.inference_steps == 1);
    CHECK(sim::cca_index(d.chosen) >= 0);
    CHECK(sim::cca_index(d.chosen) < 3);
  }
  for (const auto& [id, n] : per_flow) CHECK(n <= 20);
  CHECK(r.trace.flow(0).size() == 100);
  CHECK_THROWS_AS(eval::scenario_by_name("reno-bbr"), ConfigError);
}

TEST_CASE("quantiles and cdf") {
  CHECK(eval::median({3, 1, 2}) == 2.0);
  CHECK(eval::median({4, 1, 2, 3}) == 2.5);
  CHECK(eval::quantile({0, 10}, 0.25) == 2.5);
  const auto cdf = eval::empirical_cdf({3, 1, 2, 2});
  REQUIRE(cdf.size() == 4);
  CHECK(cdf.front() == std::pair<double, double>{1.0, 0.25});
  CHECK(cdf.back() == std::pair<double, double>{3.0, 1.0});
}
