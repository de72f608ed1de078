#pragma once

#include <set>
#include <string>
#include <vector>

#include "tickgp/data/data.hpp"
#include "tickgp/model/deep_model.hpp"

namespace tickgp {

enum class ModelType { SE, Conv, Tick, DeepConv, DeepTick };

inline const char* model_type_name(ModelType t) {
  switch (t) {
    case ModelType::SE: return "se";
    case ModelType::Conv: return "conv";
    case ModelType::Tick: return "tick";
    case ModelType::DeepConv: return "deep-conv";
    case ModelType::DeepTick: return "deep-tick";
  }
  return "?";
}

inline ModelType parse_model_type(const std::string& s) {
  for (auto t : {ModelType::SE, ModelType::Conv, ModelType::Tick, ModelType::DeepConv, ModelType::DeepTick})
    if (s == model_type_name(t)) return t;
  throw ConfigError("unknown model '" + s + "' (expected se, conv, tick, deep-conv or deep-tick)");
}

enum class LikelihoodKind { Softmax, Gaussian };

/// Architecture and initial hyperparameters.
struct ModelConfig {
  ModelType type = ModelType::Tick;
  std::size_t depth = 1;
  std::size_t num_inducing = 200;
  std::size_t hidden_inducing = 384;
  std::size_t patch_size = 5;
  std::size_t hidden_patch_size = 5;
  bool weights = true;
  bool tick_all_layers = false;
  bool shared_inducing = true;
  KernelFamily patch_family = KernelFamily::SquaredExponential;
  KernelFamily location_family = KernelFamily::Matern32;
  double patch_variance = 1.0;
  double hidden_patch_variance = 1e-6;  // keeps hidden layers near their identity mean at init
  double patch_lengthscale = 1.0;
  double location_lengthscale = 3.0;
  double weight_init = 1.0;
  double final_q_scale = 1.0;
  double hidden_q_scale = 1e-3;
  double jitter = 1e-6;
  LikelihoodKind likelihood = LikelihoodKind::Softmax;
  double noise_variance = 0.1;
  std::size_t mc_samples_eval = 5;
};

/// Layer specs for an H x W input. Throws ShapeError for geometries that do not chain.
inline std::vector<LayerSpec> layer_specs(const ModelConfig& c, std::size_t height, std::size_t width,
                                          std::size_t num_heads) {
  const bool deep = c.type == ModelType::DeepConv || c.type == ModelType::DeepTick;
  const std::size_t depth = deep ? c.depth : 1;
  if (deep && depth < 2) throw ConfigError("deep models need depth >= 2");
  if (!deep && c.depth != 1) throw ConfigError("model '" + std::string(model_type_name(c.type)) + "' has depth 1");
  std::vector<LayerSpec> out;
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i < depth; ++i) {
    LayerSpec s;
    s.name = "L" + std::to_string(i);
    s.jitter = c.jitter;
    s.patch_family = c.patch_family;
    s.location_family = c.location_family;
    s.shared_inducing = c.shared_inducing;
    const bool last = i + 1 == depth;
    if (!last) {
      s.kind = OutputKind::MultiOutput;
      s.scheme = PatchScheme(h, w, c.hidden_patch_size, c.hidden_patch_size);
      s.num_inducing = c.hidden_inducing;
      s.num_heads = 1;
      s.shared_inducing = true;
      s.mean = MeanFunction::IdentityConv;
      s.tick = c.type == ModelType::DeepTick && c.tick_all_layers;
      const std::size_t p = s.scheme.num_patches();
      const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(p))));
      if (side * side != p)
        throw ShapeError("hidden layer " + s.name + " produces " + std::to_string(s.scheme.out_height()) + "x" +
                         std::to_string(s.scheme.out_width()) + " outputs; hidden outputs must form a square image");
      h = w = side;
    } else {
      s.kind = OutputKind::SingleOutput;
      s.num_inducing = c.num_inducing;
      s.num_heads = num_heads;
      if (c.type == ModelType::SE) {
        s.scheme = PatchScheme(h, w, h, w);
      } else {
        s.scheme = PatchScheme(h, w, c.patch_size, c.patch_size);
        s.weights = c.weights;
        s.tick = c.type == ModelType::Tick || c.type == ModelType::DeepTick;
      }
    }
    out.push_back(s);
  }
  return out;
}

/// Registers a layer's parameters with placeholder values (overwritten by init or a checkpoint).
inline void register_layer(const LayerSpec& s, ParameterStore& ps, double q_scale, const ModelConfig& c) {
  const std::size_t m = s.num_inducing, d = s.scheme.patch_dim(), heads = s.num_heads;
  const std::size_t groups = s.num_groups();
  ps.add(s.key("Z"), Tensor(groups == 1 ? Shape{m, d} : Shape{groups, m, d}), Transform::Identity);
  const bool hidden = s.kind == OutputKind::MultiOutput;
  ps.add(s.key("patch.variance"), Tensor::vector({hidden ? c.hidden_patch_variance : c.patch_variance}),
         Transform::Positive);
  ps.add(s.key("patch.lengthscale"), Tensor::vector({c.patch_lengthscale}), Transform::Positive);
  if (s.tick) {
    ps.add(s.key("Z_loc"), Tensor(groups == 1 ? Shape{m, 2} : Shape{groups, m, 2}), Transform::Identity);
    ps.add(s.key("loc.variance"), Tensor::vector({1.0}), Transform::Positive, false);
    ps.add(s.key("loc.lengthscale"), Tensor::vector({c.location_lengthscale}), Transform::Positive);
  }
  if (s.weights) ps.add(s.key("weights"), Tensor(Shape{s.scheme.num_patches()}, c.weight_init), Transform::Identity);
  ps.add(s.key("q_mu"), Tensor(Shape{m, heads}), Transform::Identity);
  Tensor chol(Shape{heads, m, m});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < m; ++i) chol[(h * m + i) * m + i] = q_scale;
  ps.add(s.key("q_sqrt"), chol, Transform::LowerTriangular);
}

/// Model skeleton with default-valued parameters.
inline DeepModel build_model(const ModelConfig& c, std::size_t height, std::size_t width, std::size_t num_classes,
                             std::size_t num_train) {
  DeepModel model;
  const std::size_t heads = c.likelihood == LikelihoodKind::Gaussian ? 1 : num_classes;
  for (const auto& s : layer_specs(c, height, width, heads)) {
    const bool last = s.kind == OutputKind::SingleOutput;
    register_layer(s, model.params, last ? c.final_q_scale : c.hidden_q_scale, c);
    model.layers.emplace_back(s);
  }
  if (c.likelihood == LikelihoodKind::Gaussian) {
    model.likelihood = GaussianLikelihood{};
    model.params.add("lik.noise", Tensor::vector({c.noise_variance}), Transform::Positive);
  } else {
    model.likelihood = SoftmaxLikelihood{num_classes, c.mc_samples_eval};
  }
  model.num_train = num_train;
  model.validate();
  return model;
}

/// M patches drawn from random (image, position) pairs, distinct when possible. Sets `with_replacement`
/// when fewer than M distinct patches were found.
inline Tensor sample_patches(const Tensor& images, const PatchScheme& scheme, std::size_t m, Rng& rng,
                             bool* with_replacement = nullptr) {
  const std::size_t n = images.dim(0), p = scheme.num_patches(), d = scheme.patch_dim();
  if (n == 0) throw DataError("cannot initialize inducing patches from an empty dataset");
  const auto index = scheme.patch_index();
  const std::size_t px = scheme.image_size();
  std::uniform_int_distribution<std::size_t> pick_image(0, n - 1), pick_patch(0, p - 1);
  std::set<std::vector<double>> seen;
  std::vector<std::vector<double>> chosen;
  auto extract = [&](std::size_t img, std::size_t pos) {
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k) v[k] = images[img * px + index[pos * d + k]];
    return v;
  };
  for (std::size_t tries = 0; chosen.size() < m && tries < 50 * m; ++tries) {
    const std::size_t img = pick_image(rng), pos = pick_patch(rng);
    auto v = extract(img, pos);
    if (seen.insert(v).second) chosen.push_back(std::move(v));
  }
  if (with_replacement) *with_replacement = chosen.size() < m;
  while (chosen.size() < m) {
    const std::size_t img = pick_image(rng), pos = pick_patch(rng);
    chosen.push_back(extract(img, pos));
  }
  Tensor out(Shape{m, d});
  for (std::size_t i = 0; i < m; ++i) std::copy(chosen[i].begin(), chosen[i].end(), out.data() + i * d);
  return out;
}

/// Builds a model and initializes inducing inputs from the data. Warnings are appended to `warnings`.
inline DeepModel init_model(const ModelConfig& c, const ImageBatch& data, Rng& rng,
                            std::vector<std::string>* warnings = nullptr) {
  if (data.size() == 0) throw DataError("cannot initialize a model from an empty dataset");
  DeepModel model = build_model(c, data.height(), data.width(), data.num_classes, data.size());
  Tensor h = data.images;
  for (const auto& layer : model.layers) {
    const auto& s = layer.spec;
    const std::size_t groups = s.num_groups(), m = s.num_inducing;
    Tensor z(model.params.entry(s.key("Z")).raw.shape());
    for (std::size_t g = 0; g < groups; ++g) {
      bool repl = false;
      Tensor zg = sample_patches(h, s.scheme, m, rng, &repl);
      std::copy(zg.values().begin(), zg.values().end(), z.data() + g * zg.size());
      if (repl && warnings)
        warnings->push_back("layer " + s.name + ": fewer than " + std::to_string(m) +
                            " distinct training patches; inducing patches sampled with replacement");
    }
    model.params.set(s.key("Z"), z);
    if (s.tick) {
      Tensor loc(model.params.entry(s.key("Z_loc")).raw.shape());
      std::uniform_real_distribution<double> rows(0.0, static_cast<double>(s.scheme.image_height));
      std::uniform_real_distribution<double> cols(0.0, static_cast<double>(s.scheme.image_width));
      for (std::size_t i = 0; i < loc.size(); i += 2) {
        loc[i] = rows(rng);
        loc[i + 1] = cols(rng);
      }
      model.params.set(s.key("Z_loc"), loc);
    }
    if (s.kind == OutputKind::MultiOutput) h = identity_conv_mean(Var(h), s.scheme).value().reshaped(
        Shape{h.dim(0), s.scheme.out_height(), s.scheme.out_width()});
  }
  return model;
}

}  // namespace tickgp
