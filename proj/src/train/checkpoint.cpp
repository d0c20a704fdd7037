#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include <json.hpp>

#include "tcpllm/errors.hpp"
#include "tcpllm/trainer.hpp"

namespace tcpllm::train {

using nlohmann::json;

namespace {

json model_to_json(const model::ModelConfig& mc) {
  json j;
  j["encoder"] = {{"variant", std::string(model::encoder_variant_name(mc.encoder.variant))},
                  {"token_dim", mc.encoder.token_dim},
                  {"cnn_kernel", mc.encoder.cnn_kernel},
                  {"eps", mc.encoder.eps}};
  j["backbone"] = {{"layers", mc.backbone.layers},           {"heads", mc.backbone.heads},
                   {"token_dim", mc.backbone.token_dim},     {"context_len", mc.backbone.context_len},
                   {"ff_dim", mc.backbone.ff_dim},           {"positional", mc.backbone.positional},
                   {"init_std", mc.backbone.init_std}};
  j["lora_rank"] = mc.lora_rank;
  j["context_steps"] = mc.context_steps;
  j["pretrain_steps"] = mc.pretrain_steps;
  j["regression_head"] = mc.regression_head;
  j["seed"] = mc.seed;
  return j;
}

model::ModelConfig model_from_json(const json& j) {
  model::ModelConfig mc;
  const auto& e = j.at("encoder");
  mc.encoder.variant = model::encoder_variant_from_name(e.at("variant").get<std::string>());
  mc.encoder.token_dim = e.at("token_dim").get<std::size_t>();
  mc.encoder.cnn_kernel = e.at("cnn_kernel").get<std::size_t>();
  mc.encoder.eps = e.at("eps").get<float>();
  const auto& b = j.at("backbone");
  mc.backbone.layers = b.at("layers").get<std::size_t>();
  mc.backbone.heads = b.at("heads").get<std::size_t>();
  mc.backbone.token_dim = b.at("token_dim").get<std::size_t>();
  mc.backbone.context_len = b.at("context_len").get<std::size_t>();
  mc.backbone.ff_dim = b.at("ff_dim").get<std::size_t>();
  mc.backbone.positional = b.at("positional").get<std::string>();
  mc.backbone.init_std = b.at("init_std").get<float>();
  mc.lora_rank = j.at("lora_rank").get<std::size_t>();
  mc.context_steps = j.at("context_steps").get<std::size_t>();
  mc.pretrain_steps = j.at("pretrain_steps").get<std::size_t>();
  mc.regression_head = j.at("regression_head").get<bool>();
  mc.seed = j.at("seed").get<std::uint64_t>();
  return mc;
}

json train_to_json(const TrainConfig& tc) {
  return {{"mode", mode_name(tc.mode)},
          {"sl_task", sl_task_name(tc.sl_task)},
          {"lr", tc.lr},
          {"epochs", tc.epochs},
          {"batch_size", tc.batch_size},
          {"grad_accum_steps", tc.grad_accum_steps},
          {"clip_max_norm", tc.clip_max_norm},
          {"window_stride", tc.window_stride},
          {"window_min_len", tc.window_min_len},
          {"test_fraction", tc.test_fraction},
          {"target_return_quantile", tc.target_return_quantile},
          {"seed", tc.seed},
          {"record_wall_time", tc.record_wall_time},
          {"stop_test_acc", tc.stop_test_acc},
          {"stop_test_loss", tc.stop_test_loss}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig tc;
  tc.mode = mode_from_name(j.at("mode").get<std::string>());
  tc.sl_task = sl_task_from_name(j.at("sl_task").get<std::string>());
  tc.lr = j.at("lr").get<float>();
  tc.epochs = j.at("epochs").get<std::size_t>();
  tc.batch_size = j.at("batch_size").get<std::size_t>();
  tc.grad_accum_steps = j.at("grad_accum_steps").get<std::size_t>();
  tc.clip_max_norm = j.at("clip_max_norm").get<float>();
  tc.window_stride = j.at("window_stride").get<std::size_t>();
  tc.window_min_len = j.at("window_min_len").get<std::size_t>();
  tc.test_fraction = j.at("test_fraction").get<double>();
  tc.target_return_quantile = j.at("target_return_quantile").get<double>();
  tc.seed = j.at("seed").get<std::uint64_t>();
  tc.record_wall_time = j.at("record_wall_time").get<bool>();
  tc.stop_test_acc = j.value("stop_test_acc", 0.0);
  tc.stop_test_loss = j.value("stop_test_loss", 0.0);
  return tc;
}

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& buf, std::string origin) : buf_(buf), origin_(std::move(origin)) {}
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw IntegrityError(origin_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::vector<unsigned char>& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

void write_bytes(const std::string& path, const void* data, std::size_t n) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!os.good()) throw IoError("write failed for " + path);
}

}  // namespace

std::string model_config_json(const model::ModelConfig& mc) { return model_to_json(mc).dump(); }
std::string train_config_json(const TrainConfig& tc) { return train_to_json(tc).dump(); }

std::vector<unsigned char> serialize_tensors(const model::ParamStore& store) {
  std::vector<unsigned char> out{'T', 'C', 'P', 'L'};
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(store.tensors().size()));
  for (const auto& [name, t] : store.tensors()) {
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<unsigned char>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
  return out;
}

void save_checkpoint(const model::Policy& policy, const TrainConfig& tc, const std::string& bin_path,
                     const std::string& meta_path) {
  const auto bytes = serialize_tensors(policy.params());
  json meta;
  meta["format_version"] = kCheckpointVersion;
  meta["model"] = model_to_json(policy.config());
  meta["train"] = train_to_json(tc);
  meta["normalizer"] = {{"capacity_mbps", policy.normalizer.capacity_mbps},
                        {"rtt_ref_ms", policy.normalizer.rtt_ref_ms}};
  meta["return_scale"] = policy.return_scale;
  meta["target_return"] = policy.target_return;
  meta["base_hash"] = policy.params().frozen_hash();
  meta["payload_sha256"] = model::sha256_hex(bytes);
  meta["trainable_params"] = policy.params().trainable_count();
  write_bytes(bin_path, bytes.data(), bytes.size());
  const std::string text = meta.dump(2) + "\n";
  write_bytes(meta_path, text.data(), text.size());
}

CheckpointMeta read_checkpoint_meta(const std::string& meta_path) {
  const auto raw = read_bytes(meta_path);
  json j;
  try {
    j = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw IntegrityError(meta_path + ": unreadable metadata (" + e.what() + ")");
  }
  CheckpointMeta m;
  try {
    const auto version = j.at("format_version").get<std::uint32_t>();
    if (version != kCheckpointVersion) {
      throw VersionError(meta_path + ": checkpoint version " + std::to_string(version) + ", expected " +
                         std::to_string(kCheckpointVersion));
    }
    m.model = model_from_json(j.at("model"));
    m.train = train_from_json(j.at("train"));
    m.normalizer.capacity_mbps = j.at("normalizer").at("capacity_mbps").get<double>();
    m.normalizer.rtt_ref_ms = j.at("normalizer").at("rtt_ref_ms").get<double>();
    m.return_scale = j.at("return_scale").get<double>();
    m.target_return = j.at("target_return").get<double>();
    m.base_hash = j.at("base_hash").get<std::string>();
    m.payload_sha256 = j.at("payload_sha256").get<std::string>();
  } catch (const json::exception& e) {
    throw IntegrityError(meta_path + ": malformed metadata (" + e.what() + ")");
  }
  return m;
}

std::unique_ptr<model::Policy> load_checkpoint(const std::string& bin_path, const std::string& meta_path,
                                               const model::ModelConfig* override_model, CheckpointMeta* meta_out) {
  CheckpointMeta meta = read_checkpoint_meta(meta_path);
  const auto bytes = read_bytes(bin_path);
  Reader rd(bytes, bin_path);
  if (rd.str(4) != "TCPL") throw IntegrityError(bin_path + ": bad magic");
  const std::uint32_t version = rd.u32();
  if (version != kCheckpointVersion) {
    throw VersionError(bin_path + ": checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  if (model::sha256_hex(bytes) != meta.payload_sha256) {
    throw IntegrityError(bin_path + ": payload hash does not match metadata");
  }

  auto policy = std::make_unique<model::Policy>(override_model ? *override_model : meta.model);
  auto& store = policy->params();
  const std::uint32_t count = rd.u32();
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = rd.str(rd.u16());
    const std::size_t ndim = rd.u8();
    Shape shape(ndim);
    for (auto& d : shape) d = rd.u32();
    if (!store.contains(name)) throw IntegrityError(bin_path + ": unexpected tensor '" + name + "'");
    const Tensor& t = store.get(name);
    if (t.shape() != shape) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + " but the model expects " +
                       shape_str(t.shape()));
    }
    std::vector<float> values(numel_of(shape));
    for (auto& v : values) {
      const std::uint32_t bits = rd.u32();
      std::memcpy(&v, &bits, 4);
    }
    store.load_values(name, values);
    seen.insert(name);
  }
  if (!rd.done()) throw IntegrityError(bin_path + ": trailing bytes");
  for (const auto& name : store.names()) {
    if (!seen.count(name)) throw IntegrityError(bin_path + ": missing tensor '" + name + "'");
  }
  store.adopt_frozen_hash(meta.base_hash);
  policy->normalizer = meta.normalizer;
  policy->return_scale = meta.return_scale;
  policy->target_return = meta.target_return;
  if (meta_out) *meta_out = meta;
  return policy;
}

}  // namespace tcpllm::train
