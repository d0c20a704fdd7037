#include "tcpllm/params.hpp"

#include <algorithm>
#include <cstring>

#include <openssl/evp.h>

#include "tcpllm/errors.hpp"

namespace tcpllm::model {

Tensor ParamStore::add(const std::string& name, Tensor t, ParamRole role) {
  if (tensors_.count(name)) throw ContractError("parameter '" + name + "' registered twice");
  if (role == ParamRole::Base && frozen()) throw ContractError("cannot add base tensor '" + name + "' after freeze");
  t.named(name);
  if (role == ParamRole::Trainable) t.set_requires_grad(true);
  tensors_.emplace(name, t);
  roles_.emplace(name, role);
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LookupError("no parameter named '" + name + "'");
  return it->second;
}

ParamRole ParamStore::role(const std::string& name) const {
  auto it = roles_.find(name);
  if (it == roles_.end()) throw LookupError("no parameter named '" + name + "'");
  return it->second;
}

void ParamStore::retire(const std::string& name) {
  if (!tensors_.erase(name)) throw LookupError("no parameter named '" + name + "'");
  roles_.erase(name);
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& [n, t] : tensors_) out.push_back(n);
  return out;
}

std::vector<Tensor> ParamStore::trainable() const {
  std::vector<Tensor> out;
  for (const auto& [n, t] : tensors_) {
    if (roles_.at(n) == ParamRole::Trainable) out.push_back(t);
  }
  return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [n, t] : tensors_) {
    if (roles_.at(n) == ParamRole::Trainable) out.push_back(n);
  }
  return out;
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& t : trainable()) n += t.numel();
  return n;
}

std::size_t ParamStore::base_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) {
    if (roles_.at(name) == ParamRole::Base) n += t.numel();
  }
  return n;
}

std::string ParamStore::base_hash() const {
  std::map<std::string, Tensor> base;
  for (const auto& [n, t] : tensors_) {
    if (roles_.at(n) == ParamRole::Base) base.emplace(n, t);
  }
  return hash_tensors(base);
}

const std::string& ParamStore::freeze_base() {
  if (frozen()) return frozen_hash_;
  for (auto& [n, t] : tensors_) {
    if (roles_.at(n) == ParamRole::Base) t.set_requires_grad(false);
  }
  frozen_hash_ = base_hash();
  return frozen_hash_;
}

void ParamStore::load_values(const std::string& name, std::span<const float> values) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LookupError("no parameter named '" + name + "'");
  if (values.size() != it->second.numel()) throw ShapeError("size mismatch loading '" + name + "'");
  std::copy(values.begin(), values.end(), it->second.data_mut().begin());
}

void ParamStore::adopt_frozen_hash(const std::string& expected) {
  if (!frozen()) throw ContractError("adopt_frozen_hash: base is not frozen");
  const std::string actual = base_hash();
  if (actual != expected) {
    throw IntegrityError("frozen base hash mismatch: recorded " + expected + ", loaded " + actual);
  }
  frozen_hash_ = actual;
}

namespace {

struct MdCtx {
  EVP_MD_CTX* ctx;
  MdCtx() : ctx(EVP_MD_CTX_new()) {
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  }
  ~MdCtx() { EVP_MD_CTX_free(ctx); }
  void update(const void* p, std::size_t n) {
    if (n && EVP_DigestUpdate(ctx, p, n) != 1) throw std::runtime_error("sha256 update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx, md, &len) != 1) throw std::runtime_error("sha256 final failed");
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(digits[md[i] >> 4]);
      out.push_back(digits[md[i] & 15]);
    }
    return out;
  }
};

void put_u32(MdCtx& h, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  h.update(b, 4);
}

}  // namespace

std::string sha256_hex(std::span<const unsigned char> bytes) {
  MdCtx h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string hash_tensors(const std::map<std::string, Tensor>& tensors) {
  MdCtx h;
  for (const auto& [name, t] : tensors) {
    put_u32(h, static_cast<std::uint32_t>(name.size()));
    h.update(name.data(), name.size());
    put_u32(h, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(h, static_cast<std::uint32_t>(d));
    for (float f : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(h, bits);
    }
  }
  return h.hex();
}

Tensor normal_tensor(Shape shape, float stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> data(numel_of(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor uniform_tensor(Shape shape, float bound, std::mt19937_64& rng, bool requires_grad) {
  std::uniform_real_distribution<float> dist(-bound, bound);
  std::vector<float> data(numel_of(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace tcpllm::model
