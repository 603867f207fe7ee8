#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cmfn/rng.hpp"
#include "cmfn/tensor.hpp"

namespace cmfn {

// Ordered registry of trainable tensors. Registration order is the
// checkpoint record order and the parameter-init draw order, so module
// construction order must stay deterministic.
class ParamStore {
 public:
  explicit ParamStore(uint64_t init_seed) : rng_(init_seed) {}

  Tensor add_glorot(const std::string& name, Shape shape, int64_t fan_in,
                    int64_t fan_out) {
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (double& x : v) x = rng_.uniform(-limit, limit);
    return add_values(name, std::move(shape), std::move(v));
  }

  Tensor add_zeros(const std::string& name, Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    entries_.emplace_back(name, t);
    return t;
  }

  Tensor add_ones(const std::string& name, Shape shape) {
    Tensor t = Tensor::full(std::move(shape), 1.0, true);
    entries_.emplace_back(name, t);
    return t;
  }

  Tensor add_values(const std::string& name, Shape shape,
                    std::vector<double> values) {
    Tensor t = Tensor::from_values(std::move(shape), std::move(values), true);
    entries_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return entries_;
  }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

 private:
  Rng rng_;
  std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace cmfn
