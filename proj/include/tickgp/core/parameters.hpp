#pragma once

#include <map>
#include <string>
#include <vector>

#include "tickgp/core/ops.hpp"

namespace tickgp {

enum class Transform { Identity, Positive, LowerTriangular };

inline const char* transform_name(Transform t) {
  switch (t) {
    case Transform::Identity: return "identity";
    case Transform::Positive: return "positive";
    case Transform::LowerTriangular: return "lower-triangular";
  }
  return "?";
}

inline Transform parse_transform(const std::string& s) {
  if (s == "identity") return Transform::Identity;
  if (s == "positive") return Transform::Positive;
  if (s == "lower-triangular") return Transform::LowerTriangular;
  throw DataError("unknown parameter transform '" + s + "'");
}

/// softplus^-1, stable for large inputs.
inline double inverse_softplus(double v) {
  if (!(v > 0.0)) throw NumericalError("positive parameter given non-positive value " + std::to_string(v));
  return v > 20.0 ? v + std::log(-std::expm1(-v)) : std::log(std::expm1(v));
}

/// Maps a constrained value to its unconstrained representation.
inline Tensor unconstrain(Transform t, const Tensor& v) {
  Tensor raw = v;
  switch (t) {
    case Transform::Identity: break;
    case Transform::Positive:
      for (auto& x : raw.values()) x = inverse_softplus(x);
      break;
    case Transform::LowerTriangular: {
      if (raw.rank() < 2) throw ShapeError("lower-triangular parameter needs rank >= 2");
      const std::size_t n = raw.dim(raw.rank() - 1);
      for (std::size_t b = 0; b < raw.batch_count(); ++b)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = i + 1; j < n; ++j) raw[(b * n + i) * n + j] = 0.0;
      break;
    }
  }
  return raw;
}

/// Builds the constrained view of an unconstrained variable.
inline Var constrain(Transform t, const Var& raw) {
  switch (t) {
    case Transform::Identity: return raw;
    case Transform::Positive: return softplus(raw);
    case Transform::LowerTriangular: return tril(raw);
  }
  return raw;
}

/// A named, optionally trainable, unconstrained leaf plus its transform.
struct Parameter {
  Var raw;
  Transform transform = Transform::Identity;
  bool trainable = true;
};

/// Named parameters. The raw (unconstrained) leaves carry the gradient buffers.
class ParameterStore {
 public:
  /// Registers a parameter from its constrained value.
  void add(const std::string& name, const Tensor& value, Transform t, bool trainable = true) {
    if (entries_.count(name)) throw Error("duplicate parameter '" + name + "'");
    entries_[name] = Parameter{Var(unconstrain(t, value), trainable), t, trainable};
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  /// Constrained value as a differentiable expression of the raw leaf.
  Var get(const std::string& name) const { return constrain(entry(name).transform, entry(name).raw); }

  /// Constrained value as a plain tensor.
  Tensor value(const std::string& name) const { return get(name).value(); }

  void set(const std::string& name, const Tensor& constrained) {
    auto& e = entry(name);
    e.raw.assign(unconstrain(e.transform, constrained));
  }

  void set_raw(const std::string& name, const Tensor& raw) { entry(name).raw.assign(raw); }

  /// Freezes or releases a parameter; frozen parameters are skipped by the optimizer.
  void set_trainable(const std::string& name, bool trainable) {
    auto& e = entry(name);
    e.trainable = trainable;
    e.raw.node().requires_grad = trainable;
  }

  const Parameter& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  Parameter& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  /// Gradient w.r.t. the unconstrained parameter from the last backward pass.
  const Tensor& grad(const std::string& name) const { return entry(name).raw.grad(); }

  void zero_grad() {
    for (auto& [_, p] : entries_) p.raw.node().grad_buffer().fill(0.0);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : entries_) out.push_back(n);
    return out;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [n, p] : entries_)
      if (p.trainable) out.push_back(n);
    return out;
  }

  const std::map<std::string, Parameter>& entries() const { return entries_; }

  std::size_t total_size() const {
    std::size_t s = 0;
    for (const auto& [_, p] : entries_) s += p.raw.size();
    return s;
  }

  /// Deep copy of every raw value (the graph leaves are fresh).
  ParameterStore clone() const {
    ParameterStore out;
    for (const auto& [n, p] : entries_) out.entries_[n] = Parameter{Var(p.raw.value(), p.trainable), p.transform, p.trainable};
    return out;
  }

 private:
  std::map<std::string, Parameter> entries_;
};

/// Fills the store's gradient buffers with d objective / d(unconstrained parameter).
inline void backward(const Var& objective, ParameterStore& params, bool accumulate = false) {
  if (objective.size() != 1)
    throw ShapeError("backward() needs a scalar objective, got " + shape_string(objective.shape()));
  if (!accumulate) params.zero_grad();
  backward(objective, true);
}

}  // namespace tickgp
