#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "tcpllm/optim.hpp"
#include "tcpllm/policy.hpp"
#include "tcpllm/telemetry.hpp"

namespace tcpllm::train {

enum class Mode { Sl, Rl };
enum class SlTask { Classify, Regress };
std::string mode_name(Mode m);
Mode mode_from_name(const std::string& s);
std::string sl_task_name(SlTask t);
SlTask sl_task_from_name(const std::string& s);

struct EpochRecord;

struct TrainConfig {
  Mode mode = Mode::Rl;
  SlTask sl_task = SlTask::Classify;
  float lr = 1e-3f;
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  std::size_t grad_accum_steps = 1;
  float clip_max_norm = 1.0f;  // <= 0 disables clipping
  std::size_t window_stride = 5;
  std::size_t window_min_len = 5;
  double test_fraction = 0.2;
  double target_return_quantile = 0.9;
  std::uint64_t seed = 1;
  bool record_wall_time = false;  // wall_s stays 0 so reports are reproducible
  // Early stop after the first epoch with test_acc >= stop_test_acc and
  // test_loss < stop_test_loss; 0 disables either condition, both 0 disables.
  double stop_test_acc = 0.0;
  double stop_test_loss = 0.0;
  bool should_stop(const EpochRecord& rec) const;
  void validate(const model::ModelConfig& mc) const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double wall_s = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t train_examples = 0;
  std::size_t test_examples = 0;
  std::size_t optimizer_steps = 0;
  std::vector<std::string> train_episodes;
  std::vector<std::string> test_episodes;
  void write_jsonl(std::ostream& os) const;
};

// Fraction of rows whose argmax equals the label; rows with label < 0 are
// masked. Returns -1 when every row is masked.
double compute_accuracy(const Tensor& logits, std::span<const int> labels);

// Scales each batch loss by 1/accum before backward and steps the optimizer
// (after optional clipping) once every `accum` batches.
class GradAccumulator {
 public:
  GradAccumulator(std::vector<Tensor> params, AdamConfig opt, std::size_t accum, float clip_max_norm);
  // Returns true when this call triggered an optimizer step.
  bool accumulate(const Tensor& batch_loss);
  // Steps on a partially filled group; returns true if it stepped.
  bool flush();
  const Adam& optimizer() const { return opt_; }
  std::size_t steps() const { return steps_; }
  float last_clip_factor() const { return last_clip_; }
  static float contribution(float batch_loss, std::size_t accum) { return batch_loss / static_cast<float>(accum); }

 private:
  void step();
  std::vector<Tensor> params_;
  Adam opt_;
  std::size_t accum_;
  float clip_;
  std::size_t pending_ = 0;
  std::size_t steps_ = 0;
  float last_clip_ = 1.0f;
};

struct SlExample {
  model::Window window;  // states only; returns and action tokens are blank
  int label = -1;
  float target = 0.0f;  // next-step throughput / capacity
  std::string episode;
};

// One example per window end; the label is the action taken after the
// window's last step, the target the following step's throughput.
std::vector<SlExample> build_sl_dataset(const telemetry::ExperiencePool& pool, const model::Policy& policy,
                                        const TrainConfig& cfg);

// Episode-level split: the listed fraction of episodes goes to test.
void split_episodes(const telemetry::ExperiencePool& pool, double test_fraction, std::uint64_t seed,
                    std::vector<std::string>& train, std::vector<std::string>& test);

// Fits normalizer, return scale and target return on the pool and trains.
TrainReport train_rl(model::Policy& policy, const telemetry::ExperiencePool& pool, const TrainConfig& cfg,
                     const std::function<void(const EpochRecord&)>& on_epoch = {});
TrainReport train_sl(model::Policy& policy, const telemetry::ExperiencePool& pool, const TrainConfig& cfg,
                     const std::function<void(const EpochRecord&)>& on_epoch = {});
TrainReport train(model::Policy& policy, const telemetry::ExperiencePool& pool, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

// Conditioning statistics shared by both modes.
void fit_conditioning(model::Policy& policy, const telemetry::ExperiencePool& pool, double quantile);

// ---- checkpoints ----

struct CheckpointMeta {
  model::ModelConfig model;
  TrainConfig train;
  model::Normalizer normalizer;
  double return_scale = 1.0;
  double target_return = 0.0;
  std::string base_hash;
  std::string payload_sha256;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<unsigned char> serialize_tensors(const model::ParamStore& store);
void save_checkpoint(const model::Policy& policy, const TrainConfig& tc, const std::string& bin_path,
                     const std::string& meta_path);
CheckpointMeta read_checkpoint_meta(const std::string& meta_path);
// Rebuilds the policy from the sidecar config (or `override_model` when
// given) and loads every tensor. Errors: IoError, VersionError,
// IntegrityError (payload or base hash), ShapeError naming the tensor.
std::unique_ptr<model::Policy> load_checkpoint(const std::string& bin_path, const std::string& meta_path,
                                               const model::ModelConfig* override_model = nullptr,
                                               CheckpointMeta* meta_out = nullptr);

std::string model_config_json(const model::ModelConfig& mc);
std::string train_config_json(const TrainConfig& tc);

}  // namespace tcpllm::train
