#pragma once

#include <cmath>
#include <map>
#include <string>

#include "tickgp/core/parameters.hpp"

namespace tickgp {

enum class ScheduleKind { InverseTime, Exponential, Constant };

inline const char* schedule_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::InverseTime: return "inverse-time";
    case ScheduleKind::Exponential: return "exponential";
    case ScheduleKind::Constant: return "constant";
  }
  return "?";
}

inline ScheduleKind parse_schedule(const std::string& s) {
  if (s == "inverse-time") return ScheduleKind::InverseTime;
  if (s == "exponential") return ScheduleKind::Exponential;
  if (s == "constant") return ScheduleKind::Constant;
  throw ConfigError("unknown schedule '" + s + "'");
}

struct Schedule {
  ScheduleKind kind = ScheduleKind::InverseTime;
  double start = 0.01;
  double tau = 10000.0;       // inverse-time
  double factor = 4.0;        // exponential
  std::size_t every = 50000;  // exponential
};

inline double lr_at(const Schedule& s, std::size_t t) {
  switch (s.kind) {
    case ScheduleKind::InverseTime: return s.start / (1.0 + static_cast<double>(t) / s.tau);
    case ScheduleKind::Exponential:
      return s.start * std::pow(s.factor, -static_cast<double>(t / std::max<std::size_t>(s.every, 1)));
    case ScheduleKind::Constant: return s.start;
  }
  return s.start;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moment estimates per parameter, plus the step count.
struct AdamState {
  std::map<std::string, Tensor> m, v;
  std::size_t t = 0;
};

/// Scales all trainable gradients so their global norm is at most `max_norm`; returns the norm.
inline double clip_gradients(ParameterStore& ps, double max_norm) {
  double sq = 0.0;
  for (const auto& name : ps.trainable_names())
    for (double g : ps.grad(name).values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& name : ps.trainable_names())
      for (double& g : ps.entry(name).raw.node().grad_buffer().values()) g *= f;
  }
  return norm;
}

/// One bias-corrected Adam ascent or descent step on the unconstrained trainable parameters, using
/// the gradients currently held by the store. `maximize` ascends.
inline void adam_step(ParameterStore& ps, AdamState& st, double lr, const AdamConfig& cfg = {}, bool maximize = false) {
  for (const auto& name : ps.trainable_names()) {
    const Tensor& g = ps.grad(name);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        throw NumericalError("non-finite gradient in parameter '" + name + "' at element " + std::to_string(i));
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (const auto& name : ps.trainable_names()) {
    const Tensor& g = ps.grad(name);
    auto& m = st.m.try_emplace(name, g.shape()).first->second;
    auto& v = st.v.try_emplace(name, g.shape()).first->second;
    if (m.shape() != g.shape()) throw ShapeError("Adam state shape mismatch for '" + name + "'");
    Tensor raw = ps.entry(name).raw.value();
    const double sign = maximize ? 1.0 : -1.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mh = m[i] / c1, vh = v[i] / c2;
      raw[i] += sign * lr * mh / (std::sqrt(vh) + cfg.epsilon);
    }
    ps.set_raw(name, raw);
  }
}

}  // namespace tickgp
