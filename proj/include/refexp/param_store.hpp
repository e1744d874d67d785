#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "refexp/tensor.hpp"

namespace refexp {

/// Named trainable parameters with deterministic (insertion) iteration order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }

  std::size_t total_values() const;
  void zero_grad();
  double grad_norm() const;
  void scale_grad(double factor);
  /// values -= learning_rate * grad
  void apply_sgd(double learning_rate);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Versioned binary checkpoint ("REXP" magic, little-endian payload,
/// IEEE-754 double values). Round trips are bit-exact.
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);

}  // namespace refexp
