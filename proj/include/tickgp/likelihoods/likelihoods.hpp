#pragma once

#include <cmath>
#include <numbers>
#include <variant>

#include "tickgp/core/ops.hpp"

namespace tickgp {

inline void check_labels(const Tensor& labels, std::size_t num_classes) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = labels[i];
    if (!(y >= 0.0) || y >= static_cast<double>(num_classes) || y != std::floor(y))
      throw DataError("label " + std::to_string(y) + " at index " + std::to_string(i) + " outside [0, " +
                      std::to_string(num_classes) + ")");
  }
}

/// y ~ N(f, noise). `noise` is a positive scalar variable.
struct GaussianLikelihood {
  Var noise = Var(Tensor::vector({1.0}));

  std::size_t latent_dim() const { return 1; }

  /// latent [S x N x 1] (or [S x N]), targets [N] -> [S x N].
  Var log_prob(const Var& latent, const Tensor& targets) const {
    const std::size_t s = latent.dim(0), n = latent.dim(1);
    if (latent.size() != s * n || targets.size() != n) throw ShapeError("Gaussian log_prob shape mismatch");
    Var f = reshape(latent, Shape{s, n});
    Var y(targets.reshaped(Shape{1, n}));
    Var sq = square(f - y);
    Var nv = reshape(noise, Shape{1, 1});
    return add_scalar(scale(log(nv), -0.5) - sq / scale(nv, 2.0), -0.5 * std::log(2.0 * std::numbers::pi));
  }

  /// Closed-form E_{N(f; mu, var)}[log N(y; f, noise)] for mu, var [N x 1], targets [N] -> [N].
  Var variational_expectation(const Var& mu, const Var& var, const Tensor& targets) const {
    const std::size_t n = targets.size();
    if (mu.size() != n || var.size() != n) throw ShapeError("Gaussian variational expectation shape mismatch");
    Var m = reshape(mu, Shape{n});
    Var v = reshape(var, Shape{n});
    Var y(targets.reshaped(Shape{n}));
    Var nv = reshape(noise, Shape{1});
    return add_scalar(scale(log(nv), -0.5) - (square(m - y) + v) / scale(nv, 2.0),
                      -0.5 * std::log(2.0 * std::numbers::pi));
  }
};

/// Categorical y with p(y | f) = softmax(f)_y.
struct SoftmaxLikelihood {
  std::size_t num_classes = 10;
  std::size_t mc_samples = 5;

  std::size_t latent_dim() const { return num_classes; }

  /// latent [S x N x C], labels [N] -> [S x N]: f_y - logsumexp(f).
  Var log_prob(const Var& latent, const Tensor& labels) const {
    if (latent.rank() != 3 || latent.dim(2) != num_classes || latent.dim(1) != labels.size())
      throw ShapeError("softmax log_prob: latent " + shape_string(latent.shape()) + " vs " +
                       std::to_string(labels.size()) + " labels, C=" + std::to_string(num_classes));
    check_labels(labels, num_classes);
    const std::size_t s = latent.dim(0), n = latent.dim(1), c = num_classes;
    std::vector<std::size_t> idx(s * n);
    for (std::size_t k = 0; k < s; ++k)
      for (std::size_t i = 0; i < n; ++i) idx[k * n + i] = (k * n + i) * c + static_cast<std::size_t>(labels[i]);
    Var picked = gather(reshape(latent, Shape{latent.size()}), 0, idx, Shape{s, n});
    return picked - log_sum_exp(latent, 2);
  }

  /// Mean of per-sample softmax probabilities: samples [K x N x C] -> [N x C].
  Tensor predict_proba(const Tensor& samples) const {
    if (samples.rank() != 3 || samples.dim(2) != num_classes) throw ShapeError("predict_proba needs [K x N x C]");
    const std::size_t k = samples.dim(0), n = samples.dim(1), c = num_classes;
    if (k == 0) throw ShapeError("predict_proba needs at least one sample");
    Tensor out(Shape{n, c});
    std::vector<double> e(c);
    for (std::size_t s = 0; s < k; ++s)
      for (std::size_t i = 0; i < n; ++i) {
        const double* f = samples.data() + (s * n + i) * c;
        const double mx = *std::max_element(f, f + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (e[j] = std::exp(f[j] - mx));
        for (std::size_t j = 0; j < c; ++j) out(i, j) += e[j] / z / static_cast<double>(k);
      }
    return out;
  }
};

using Likelihood = std::variant<GaussianLikelihood, SoftmaxLikelihood>;

inline std::size_t latent_dim(const Likelihood& l) {
  return std::visit([](const auto& x) { return x.latent_dim(); }, l);
}

inline Var log_prob(const Likelihood& l, const Var& latent, const Tensor& labels) {
  return std::visit([&](const auto& x) { return x.log_prob(latent, labels); }, l);
}

}  // namespace tickgp
