#pragma once

// Learnable parameter storage and the per-step tape binding.

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sa3/rng.hpp"
#include "sa3/tensor.hpp"

namespace sa3 {

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> velocity;  // SGD momentum state

  Parameter() = default;

  Parameter(std::string param_name, Shape param_shape)
      : name(std::move(param_name)), shape(std::move(param_shape)) {
    const std::size_t n = shape_numel(shape);
    value.assign(n, 0.0);
    velocity.assign(n, 0.0);
  }

  std::size_t size() const { return value.size(); }

  void fill(double v) { std::fill(value.begin(), value.end(), v); }

  void init_gaussian(Lcg64& rng, double stddev) {
    for (auto& v : value) v = stddev * rng.gaussian();
  }
};

// Leafs parameters onto one tape for a single forward/backward step. Each
// parameter binds once; the binding order is the deterministic first-use
// order of the forward pass. With a null tape the parameters come back as
// plain tensors, which is the inference path.
class ParamBinding {
 public:
  explicit ParamBinding(GradTape* tape) : tape_(tape) {}

  Tensor operator()(Parameter& p) {
    if (!tape_) return Tensor(p.shape, p.value);
    auto it = index_.find(&p);
    if (it != index_.end()) return bound_[it->second].second;
    Tensor leaf = tape_->leaf(p.shape, p.value);
    index_.emplace(&p, bound_.size());
    bound_.emplace_back(&p, leaf);
    return leaf;
  }

  const std::vector<std::pair<Parameter*, Tensor>>& bound() const { return bound_; }
  GradTape* tape() const { return tape_; }

 private:
  GradTape* tape_;
  std::unordered_map<const Parameter*, std::size_t> index_;
  std::vector<std::pair<Parameter*, Tensor>> bound_;
};

}  // namespace sa3
