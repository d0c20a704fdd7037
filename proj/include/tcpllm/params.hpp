#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tcpllm/tensor.hpp"

namespace tcpllm::model {

enum class ParamRole { Base, Trainable };

// Named parameter registry shared by encoder, backbone and head. Iteration
// order is lexicographic by name, which fixes hashing and checkpoint order.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t, ParamRole role);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  ParamRole role(const std::string& name) const;
  void retire(const std::string& name);

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::vector<std::string> names() const;
  std::vector<Tensor> trainable() const;
  std::vector<std::string> trainable_names() const;
  std::size_t trainable_count() const;
  std::size_t base_count() const;

  // Stops gradient flow into every Base tensor and records their hash.
  // Idempotent; there is no inverse.
  const std::string& freeze_base();
  bool frozen() const { return !frozen_hash_.empty(); }
  const std::string& frozen_hash() const { return frozen_hash_; }
  std::string base_hash() const;

  // Checkpoint restore: overwrite one tensor's values (sizes must match),
  // then confirm the restored base against the recorded hash.
  void load_values(const std::string& name, std::span<const float> values);
  void adopt_frozen_hash(const std::string& expected);

 private:
  std::map<std::string, Tensor> tensors_;
  std::map<std::string, ParamRole> roles_;
  std::string frozen_hash_;
};

std::string sha256_hex(std::span<const unsigned char> bytes);

// SHA-256 over (name, ndim, dims, float bytes) of each tensor, in name order.
std::string hash_tensors(const std::map<std::string, Tensor>& tensors);

Tensor normal_tensor(Shape shape, float stddev, std::mt19937_64& rng, bool requires_grad);
Tensor uniform_tensor(Shape shape, float bound, std::mt19937_64& rng, bool requires_grad);

}  // namespace tcpllm::model
