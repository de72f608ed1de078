#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tickgp/likelihoods/likelihoods.hpp"
#include "tickgp/svgp/layer.hpp"

namespace tickgp {

/// S stacked copies along axis 0.
inline Var tile(const Var& v, std::size_t s) {
  if (s == 1) return v;
  return concat(std::vector<Var>(s, v));
}

inline Prediction tile(const Prediction& p, std::size_t s) {
  Prediction out{tile(p.mean, s), tile(p.var, s), std::nullopt};
  if (p.cov) out.cov = tile(*p.cov, s);
  return out;
}

/// f_L(... f_1(x)): multi-output hidden layers followed by one C-headed single-output layer.
class DeepModel {
 public:
  std::vector<GPLayer> layers;
  Likelihood likelihood = SoftmaxLikelihood{};
  std::size_t num_train = 1;
  ParameterStore params;

  std::size_t depth() const { return layers.size(); }
  const GPLayer& final_layer() const { return layers.back(); }

  /// Checks that the layer geometries chain and the head matches the likelihood.
  void validate() const {
    if (layers.empty()) throw ShapeError("model has no layers");
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
      const auto& s = layers[i].spec;
      if (s.kind != OutputKind::MultiOutput) throw ShapeError("hidden layer " + s.name + " must be multi-output");
      const std::size_t p = s.scheme.num_patches();
      const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(p))));
      if (side * side != p)
        throw ShapeError("hidden layer " + s.name + " produces " + std::to_string(p) +
                         " outputs, which is not a square image");
      const auto& next = layers[i + 1].spec.scheme;
      if (next.image_height != side || next.image_width != side)
        throw ShapeError("layer " + layers[i + 1].spec.name + " expects " + std::to_string(next.image_height) + "x" +
                         std::to_string(next.image_width) + " inputs but " + s.name + " produces " +
                         std::to_string(side) + "x" + std::to_string(side));
    }
    const auto& f = final_layer().spec;
    if (f.kind != OutputKind::SingleOutput) throw ShapeError("final layer must be single-output");
    if (f.num_heads != latent_dim(likelihood))
      throw ShapeError("final layer has " + std::to_string(f.num_heads) + " heads but the likelihood needs " +
                       std::to_string(latent_dim(likelihood)));
  }

  /// Likelihood with its parameters bound to the store.
  Likelihood bound_likelihood() const {
    if (std::holds_alternative<GaussianLikelihood>(likelihood)) return GaussianLikelihood{params.get("lik.noise")};
    return likelihood;
  }

  /// Draws [S x N x C] latent samples at the final layer.
  Var propagate(const Var& images, Rng& rng, std::size_t num_samples) const {
    if (num_samples == 0) throw ShapeError("propagate needs at least one sample");
    const std::size_t n = images.dim(0);
    Var h = images;
    bool tiled = false;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
      const GPLayer& layer = layers[i];
      const bool full = layer.sampling == SamplingMode::Full;
      Prediction pr = layer.predict(params, h, full);
      if (!tiled) {
        pr = tile(pr, num_samples);
        tiled = true;
      }
      Var s = GPLayer::draw(pr, rng, full, layer.spec.jitter);
      const auto& next = layers[i + 1].spec.scheme;
      h = reshape(s, Shape{s.dim(0), next.image_height, next.image_width});
    }
    Prediction pr = final_layer().predict(params, h);
    if (!tiled) pr = tile(pr, num_samples);
    Var f = GPLayer::draw(pr, rng, false, final_layer().spec.jitter);
    return reshape(f, Shape{num_samples, n, final_layer().spec.num_heads});
  }

  Var kl() const {
    Var total = layers[0].kl_to_prior(params);
    for (std::size_t i = 1; i < layers.size(); ++i) total = total + layers[i].kl_to_prior(params);
    return total;
  }

  /// Sum over the batch of the estimated E_q[log p(y_n | f_n)], [scalar].
  Var expected_log_lik(const Var& images, const Tensor& targets, Rng& rng, std::size_t num_samples) const {
    Likelihood lik = bound_likelihood();
    if (auto* g = std::get_if<GaussianLikelihood>(&lik); g && depth() == 1) {
      Prediction pr = final_layer().predict(params, images);
      return sum(g->variational_expectation(pr.mean, pr.var, targets));
    }
    Var lp = log_prob(lik, propagate(images, rng, num_samples), targets);
    return scale(sum(lp), 1.0 / static_cast<double>(num_samples));
  }

  /// (N / B) sum_batch E_q[log p(y | f)] - sum_l KL_l.
  Var elbo(const Var& images, const Tensor& targets, Rng& rng, std::size_t num_samples = 1) const {
    const std::size_t b = images.dim(0);
    if (b == 0 || b > num_train)
      throw ShapeError("batch size " + std::to_string(b) + " must be in [1, " + std::to_string(num_train) + "]");
    if (targets.size() != b) throw ShapeError("target count does not match the batch");
    Var data = expected_log_lik(images, targets, rng, num_samples);
    return scale(data, static_cast<double>(num_train) / static_cast<double>(b)) - kl();
  }

  /// Monte-Carlo class probabilities [N x C] from K latent samples.
  Tensor predict_proba(const Tensor& images, Rng& rng, std::size_t k) const {
    const auto* sm = std::get_if<SoftmaxLikelihood>(&likelihood);
    if (!sm) throw ShapeError("predict_proba needs a softmax likelihood");
    return sm->predict_proba(propagate(Var(images), rng, k).value());
  }

  void set_sampling_mode(SamplingMode m) {
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) layers[i].sampling = m;
  }
};

/// Copies the parameters of `src` layer `from` into layer `to` of `dst`. Entries whose shapes
/// differ (patch weights when the patch count changes) are left alone and returned.
inline std::vector<std::string> copy_layer_parameters(const ParameterStore& src, const std::string& from,
                                                      ParameterStore& dst, const std::string& to) {
  std::size_t copied = 0;
  std::vector<std::string> skipped;
  for (const auto& [name, p] : src.entries()) {
    if (name.rfind(from + ".", 0) != 0) continue;
    const std::string target = to + name.substr(from.size());
    if (!dst.contains(target)) throw ShapeError("warm start: target has no parameter '" + target + "'");
    if (dst.entry(target).raw.shape() != p.raw.shape()) {
      skipped.push_back(target);
      continue;
    }
    dst.set_raw(target, p.raw.value());
    ++copied;
  }
  if (copied == 0) throw ShapeError("warm start: source has no parameters for layer '" + from + "'");
  return skipped;
}

/// Initializes a deeper model from a trained shallower one: first and last layers are copied.
/// Returns the names that could not be copied because their shapes differ.
inline std::vector<std::string> warm_start(DeepModel& dst, const DeepModel& src) {
  if (src.depth() < 2 || dst.depth() <= src.depth())
    throw ShapeError("warm start needs a deeper target than a source of depth >= 2");
  auto skipped = copy_layer_parameters(src.params, src.layers.front().spec.name, dst.params,
                                       dst.layers.front().spec.name);
  auto more = copy_layer_parameters(src.params, src.final_layer().spec.name, dst.params, dst.final_layer().spec.name);
  skipped.insert(skipped.end(), more.begin(), more.end());
  if (src.params.contains("lik.noise") && dst.params.contains("lik.noise"))
    dst.params.set_raw("lik.noise", src.params.entry("lik.noise").raw.value());
  return skipped;
}

}  // namespace tickgp
