#include "tcpllm/backbone.hpp"

#include "tcpllm/errors.hpp"
#include "tcpllm/ops.hpp"

namespace tcpllm::model {

void BackboneConfig::validate() const {
  if (layers == 0) throw ConfigError("backbone layers must be >= 1");
  if (heads == 0 || token_dim % heads != 0) throw ConfigError("backbone token_dim must be divisible by heads");
  if (context_len == 0) throw ConfigError("backbone context_len must be >= 1");
  if (ff_dim == 0) throw ConfigError("backbone ff_dim must be >= 1");
  if (positional != "learned") throw ConfigError("backbone positional must be 'learned'");
  if (!(init_std > 0.0f)) throw ConfigError("backbone init_std must be > 0");
}

Tensor effective_weight(const Tensor& w0, const Tensor& a, const Tensor& b) {
  if (w0.rank() != 2 || a.rank() != 2 || b.rank() != 2 || a.dim(0) != w0.dim(0) || b.dim(1) != w0.dim(1) ||
      a.dim(1) != b.dim(0)) {
    throw ShapeError("effective_weight: W0 " + shape_str(w0.shape()) + ", A " + shape_str(a.shape()) + ", B " +
                     shape_str(b.shape()) + " do not form d×k = (d×r)(r×k)");
  }
  return add(w0, matmul(a, b));
}

namespace {

std::string layer_prefix(std::size_t i) { return "base.layer" + std::to_string(i) + "."; }

}  // namespace

Backbone::Backbone(BackboneConfig cfg, ParamStore& store, std::mt19937_64& rng) : cfg_(std::move(cfg)), store_(&store) {
  cfg_.validate();
  const std::size_t d = cfg_.token_dim;
  const std::size_t f = cfg_.ff_dim;
  const float sd = cfg_.init_std;
  auto linear_pair = [&](const std::string& name, std::size_t in, std::size_t out) {
    store.add(name + ".w", normal_tensor({in, out}, sd, rng, true), ParamRole::Base);
    store.add(name + ".b", Tensor::zeros({out}, true), ParamRole::Base);
  };
  auto ln_pair = [&](const std::string& name) {
    store.add(name + ".w", Tensor::full({d}, 1.0f, true), ParamRole::Base);
    store.add(name + ".b", Tensor::zeros({d}, true), ParamRole::Base);
  };
  store.add("base.pos.w", normal_tensor({cfg_.context_len, d}, sd, rng, true), ParamRole::Base);
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    const std::string p = layer_prefix(i);
    for (const char* proj : kAttentionProjections) linear_pair(p + proj, d, d);
    linear_pair(p + "ff1", d, f);
    linear_pair(p + "ff2", f, d);
    ln_pair(p + "ln1");
    ln_pair(p + "ln2");
  }
  ln_pair("base.ln_f");
}

const LoraAdapter& Backbone::attach_lora(const std::string& target, std::size_t rank, std::mt19937_64& rng) {
  const std::string wname = "base." + target + ".w";
  if (!store_->contains(wname)) throw LookupError("attach_lora: no weight '" + wname + "'");
  if (!store_->frozen()) throw ContractError("attach_lora: base must be frozen first");
  if (adapters_.count(target)) throw ContractError("attach_lora: adapter already attached to '" + target + "'");
  const Tensor& w0 = store_->get(wname);
  const std::size_t d = w0.dim(0), k = w0.dim(1);
  if (rank < 1 || rank > std::min(d, k)) {
    throw ConfigError("attach_lora: rank " + std::to_string(rank) + " outside [1, " + std::to_string(std::min(d, k)) +
                      "]");
  }
  LoraAdapter ad;
  ad.target = target;
  ad.rank = rank;
  ad.a = store_->add("lora." + target + ".A", normal_tensor({d, rank}, cfg_.init_std, rng, true), ParamRole::Trainable);
  ad.b = store_->add("lora." + target + ".B", Tensor::zeros({rank, k}, true), ParamRole::Trainable);
  return adapters_.emplace(target, std::move(ad)).first->second;
}

void Backbone::attach_attention_lora(std::size_t rank, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    for (const char* proj : kAttentionProjections) attach_lora("layer" + std::to_string(i) + "." + proj, rank, rng);
  }
}

void Backbone::merge_lora(const std::string& target) {
  auto it = adapters_.find(target);
  if (it == adapters_.end()) throw LookupError("merge_lora: no adapter on '" + target + "'");
  if (it->second.merged) throw ContractError("merge_lora: adapter on '" + target + "' already merged");
  NoGradGuard ng;
  const Tensor w0 = store_->get("base." + target + ".w");
  const Tensor w = effective_weight(w0, it->second.a, it->second.b);
  merged_[target] = Tensor::from_data(w.shape(), std::vector<float>(w.data().begin(), w.data().end()));
  it->second.merged = true;
  store_->retire("lora." + target + ".A");
  store_->retire("lora." + target + ".B");
}

std::size_t Backbone::lora_param_count() const {
  std::size_t n = 0;
  for (const auto& [t, ad] : adapters_) {
    if (!ad.merged) n += ad.param_count();
  }
  return n;
}

Tensor Backbone::weight(const std::string& target) const {
  if (auto m = merged_.find(target); m != merged_.end()) return m->second;
  const Tensor& w0 = store_->get("base." + target + ".w");
  if (auto it = adapters_.find(target); it != adapters_.end()) return effective_weight(w0, it->second.a, it->second.b);
  return w0;
}

Tensor Backbone::linear_for(const Tensor& x, const std::string& target) const {
  return linear(x, weight(target), store_->get("base." + target + ".b"));
}

Tensor Backbone::forward(const Tensor& tokens, std::size_t batch, std::size_t len,
                         std::span<const std::uint8_t> key_valid) const {
  const std::size_t d = cfg_.token_dim;
  if (len > cfg_.context_len) {
    throw ShapeError("backbone: sequence of " + std::to_string(len) + " tokens exceeds context_len " +
                     std::to_string(cfg_.context_len));
  }
  if (tokens.rank() != 2 || tokens.dim(0) != batch * len || tokens.dim(1) != d) {
    throw ShapeError("backbone: tokens " + shape_str(tokens.shape()) + " are not [" + std::to_string(batch * len) +
                     " × " + std::to_string(d) + "]");
  }
  if (key_valid.size() != batch * len) throw ShapeError("backbone: key mask length mismatch");
  ++forwards_;

  std::vector<std::size_t> pos(batch * len);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % len;
  Tensor h = add(tokens, gather_rows(store_->get("base.pos.w"), pos));
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    const std::string p = layer_prefix(i);
    const std::string t = "layer" + std::to_string(i) + ".";
    const Tensor a = layer_norm(h, store_->get(p + "ln1.w"), store_->get(p + "ln1.b"));
    const Tensor q = linear_for(a, t + "attn_q");
    const Tensor k = linear_for(a, t + "attn_k");
    const Tensor v = linear_for(a, t + "attn_v");
    const Tensor att = causal_attention(q, k, v, batch, cfg_.heads, key_valid);
    h = add(h, linear_for(att, t + "attn_o"));
    const Tensor f = layer_norm(h, store_->get(p + "ln2.w"), store_->get(p + "ln2.b"));
    h = add(h, linear_for(gelu(linear_for(f, t + "ff1")), t + "ff2"));
  }
  return layer_norm(h, store_->get("base.ln_f.w"), store_->get("base.ln_f.b"));
}

Tensor Backbone::forward(const Tensor& tokens) const {
  if (tokens.rank() != 3) throw ShapeError("backbone: expected (b, L, D), got " + shape_str(tokens.shape()));
  const std::size_t b = tokens.dim(0), l = tokens.dim(1);
  const std::vector<std::uint8_t> valid(b * l, 1);
  const Tensor out = forward(reshape(tokens, {b * l, tokens.dim(2)}), b, l, valid);
  return reshape(out, {b, l, tokens.dim(2)});
}

}  // namespace tcpllm::model
