#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tickgp/core/linalg.hpp"
#include "tickgp/core/parameters.hpp"
#include "tickgp/inducing/inducing.hpp"

namespace tickgp {

enum class OutputKind { SingleOutput, MultiOutput };
enum class MeanFunction { Zero, IdentityConv };
enum class SamplingMode { Marginal, Full };

inline const char* sampling_mode_name(SamplingMode m) { return m == SamplingMode::Marginal ? "marginal" : "full"; }

inline SamplingMode parse_sampling_mode(const std::string& s) {
  if (s == "marginal") return SamplingMode::Marginal;
  if (s == "full") return SamplingMode::Full;
  throw ConfigError("unknown sampling mode '" + s + "'");
}

/// Static description of one layer. Trainable state lives in a ParameterStore under `name`.
struct LayerSpec {
  std::string name = "L0";
  OutputKind kind = OutputKind::SingleOutput;
  PatchScheme scheme;
  std::size_t num_inducing = 1;
  std::size_t num_heads = 1;  // C; always 1 for multi-output layers
  bool tick = false;
  bool weights = false;
  bool shared_inducing = true;
  KernelFamily patch_family = KernelFamily::SquaredExponential;
  KernelFamily location_family = KernelFamily::Matern32;
  MeanFunction mean = MeanFunction::Zero;
  double jitter = 1e-6;

  std::size_t num_outputs() const { return kind == OutputKind::MultiOutput ? scheme.num_patches() : num_heads; }
  std::size_t num_groups() const { return shared_inducing ? 1 : num_heads; }

  std::string key(const std::string& suffix) const { return name + "." + suffix; }
};

/// q(u) = N(m_c, S_c) per head: mean [M x C], lower Cholesky factors [C x M x M].
struct VariationalGaussian {
  Var mean;
  Var chol;

  std::size_t num_inducing() const { return mean.dim(0); }
  std::size_t num_heads() const { return mean.dim(1); }

  void validate(std::size_t m, std::size_t c) const {
    if (mean.rank() != 2 || mean.dim(0) != m || mean.dim(1) != c)
      throw ShapeError("q mean " + shape_string(mean.shape()) + " does not match M=" + std::to_string(m) +
                       ", C=" + std::to_string(c));
    if (chol.rank() != 3 || chol.dim(0) != c || chol.dim(1) != m || chol.dim(2) != m)
      throw ShapeError("q Cholesky factor " + shape_string(chol.shape()) + " does not match M, C");
  }
};

/// Marginal prediction ([N x outputs]) and, in full mode, within-image covariances [N x P x P].
struct Prediction {
  Var mean;
  Var var;
  std::optional<Var> cov;
};

// ---- helper ops --------------------------------------------------------------------

/// x: [M x N x P] -> out [N x P x P] with out_n = X_n^T X_n, X_n = x[:, n, :].
inline Var block_gram(const Var& x) {
  if (x.rank() != 3) throw ShapeError("block_gram needs [M x N x P], got " + shape_string(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1), p = x.dim(2);
  using Strided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
  auto block = [m, n, p](const Tensor& t, std::size_t i) {
    return Strided(t.data() + i * p, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(p),
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(n * p)));
  };
  Tensor out(Shape{n, p, p});
  for (std::size_t i = 0; i < n; ++i) out.matrix(i).noalias() = block(x.value(), i).transpose() * block(x.value(), i);
  return make_op("block_gram", std::move(out), {x}, [m, n, p, block](Node& self) {
    auto& g = parent_grad(self, 0);
    const Tensor& xv = parent_value(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      RowMatrix gs = self.grad.matrix(i) + self.grad.matrix(i).transpose();
      Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>> gx(g.data() + i * p, static_cast<Eigen::Index>(m),
                                                          static_cast<Eigen::Index>(p),
                                                          Eigen::OuterStride<>(static_cast<Eigen::Index>(n * p)));
      gx.noalias() += block(xv, i) * gs;
    }
  });
}

/// Slice b of a parameter stored as [B x ...], keeping a leading axis of 1.
inline Var slice_leading(const Var& a, std::size_t b) {
  const std::size_t inner = a.size() / a.dim(0);
  std::vector<std::size_t> idx(inner);
  for (std::size_t i = 0; i < inner; ++i) idx[i] = b * inner + i;
  Shape tail = a.shape();
  tail[0] = 1;
  return gather(reshape(a, Shape{a.size()}), 0, idx, tail);
}

/// Column c of a [R x C] matrix as [R x 1].
inline Var column(const Var& a, std::size_t c) {
  const std::size_t r = a.dim(0), cols = a.dim(1);
  std::vector<std::size_t> idx(r);
  for (std::size_t i = 0; i < r; ++i) idx[i] = i * cols + c;
  return gather(reshape(a, Shape{a.size()}), 0, idx, Shape{r, 1});
}

inline Tensor standard_normal(const Shape& shape, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor t(shape);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

/// Centre pixel of every (odd-sized) patch: images [N x H x W] -> [N x P].
inline Var identity_conv_mean(const Var& images, const PatchScheme& scheme) {
  if (scheme.patch_height % 2 == 0 || scheme.patch_width % 2 == 0)
    throw ShapeError("identity conv mean needs odd patch sizes, got " + std::to_string(scheme.patch_height) + "x" +
                     std::to_string(scheme.patch_width));
  check_images(images.shape(), scheme);
  std::vector<std::size_t> idx;
  idx.reserve(scheme.num_patches());
  for (std::size_t r = 0; r < scheme.out_height(); ++r)
    for (std::size_t c = 0; c < scheme.out_width(); ++c)
      idx.push_back((r + scheme.patch_height / 2) * scheme.image_width + c + scheme.patch_width / 2);
  return gather(images, 1, idx, Shape{scheme.num_patches()});
}

/// Posterior of g at arbitrary multi-output sites given one inducing group.
/// kuf: [M x S], kff_diag: [S]. Returns mean [S x Cg] and marginal variances [Cg x S].
struct ConditionalTerms {
  Var a;  // L^-1 Kuf  [M x S]
  Var t;  // L_S^T L^-T A  [Cg x M x S]
  Var mean;
};

inline ConditionalTerms conditional_terms(const Var& l, const Var& kuf, const Var& q_mean, const Var& q_chol) {
  ConditionalTerms out;
  out.a = triangular_solve(l, kuf);
  Var v = triangular_solve(l, q_mean);
  out.mean = matmul(out.a, v, true, false);
  Var b = triangular_solve(l, out.a, true, true);
  out.t = matmul(q_chol, b, true, false);
  return out;
}

// ---- layer ----------------------------------------------------------------------------

/// One sparse variational GP layer, non-whitened: u = g(Z), q(u) = N(m, S).
class GPLayer {
 public:
  LayerSpec spec;
  SamplingMode sampling = SamplingMode::Marginal;

  GPLayer() = default;
  explicit GPLayer(LayerSpec s) : spec(std::move(s)) {
    if (spec.kind == OutputKind::MultiOutput && spec.num_heads != 1)
      throw ShapeError("multi-output layers carry a single shared patch-response GP");
    if (spec.mean == MeanFunction::IdentityConv && (spec.scheme.patch_height % 2 == 0 || spec.scheme.patch_width % 2 == 0))
      throw ShapeError("identity conv mean needs odd patch sizes");
  }

  PatchResponseKernel response(const ParameterStore& ps) const {
    PatchResponseKernel k{StationaryKernel{spec.patch_family, ps.get(spec.key("patch.variance")),
                                           ps.get(spec.key("patch.lengthscale"))},
                          std::nullopt};
    if (spec.tick)
      k.location = StationaryKernel{spec.location_family, ps.get(spec.key("loc.variance")),
                                    ps.get(spec.key("loc.lengthscale"))};
    return k;
  }

  ConvKernel conv_kernel(const ParameterStore& ps) const {
    std::optional<Var> w;
    if (spec.weights) w = ps.get(spec.key("weights"));
    return ConvKernel{response(ps), spec.scheme, w};
  }

  MultiOutputConvKernel multi_output_kernel(const ParameterStore& ps) const {
    return MultiOutputConvKernel{response(ps), spec.scheme};
  }

  InducingPatches inducing(const ParameterStore& ps, std::size_t group = 0) const {
    Var z = ps.get(spec.key("Z"));
    std::optional<Var> loc;
    if (spec.tick) loc = ps.get(spec.key("Z_loc"));
    if (!spec.shared_inducing) {
      const std::size_t m = spec.num_inducing;
      z = reshape(slice_leading(z, group), Shape{m, spec.scheme.patch_dim()});
      if (loc) loc = reshape(slice_leading(*loc, group), Shape{m, 2});
    }
    return InducingPatches{z, loc};
  }

  VariationalGaussian q(const ParameterStore& ps) const {
    VariationalGaussian v{ps.get(spec.key("q_mu")), ps.get(spec.key("q_sqrt"))};
    v.validate(spec.num_inducing, spec.num_heads);
    return v;
  }

  /// Heads served by inducing group g.
  std::vector<std::size_t> group_heads(std::size_t g) const {
    if (!spec.shared_inducing) return {g};
    std::vector<std::size_t> h(spec.num_heads);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = i;
    return h;
  }

  Var kuu_chol(const ParameterStore& ps, std::size_t group = 0) const {
    CholeskyOptions opt;
    opt.jitter = 0.0;
    return cholesky(kuu(inducing(ps, group), response(ps), spec.jitter), opt);
  }

  void check_input(const Var& images) const { check_images(images.shape(), spec.scheme); }

  /// q(f) at a batch. Multi-output layers return [N x P] marginals (plus [N x P x P] when
  /// `full_cov`); single-output heads return [N x C].
  Prediction predict(const ParameterStore& ps, const Var& images, bool full_cov = false) const {
    check_input(images);
    return spec.kind == OutputKind::MultiOutput ? predict_multi(ps, images, full_cov) : predict_single(ps, images);
  }

  /// One reparameterized draw per image.
  Var sample(const ParameterStore& ps, const Var& images, Rng& rng) const {
    const bool full = sampling == SamplingMode::Full && spec.kind == OutputKind::MultiOutput;
    Prediction pr = predict(ps, images, full);
    return draw(pr, rng, full, spec.jitter);
  }

  static Var draw(const Prediction& pr, Rng& rng, bool full, double jitter) {
    if (!full) {
      Var eps(standard_normal(pr.mean.shape(), rng));
      return pr.mean + sqrt(pr.var) * eps;
    }
    const std::size_t n = pr.mean.dim(0), p = pr.mean.dim(1);
    CholeskyOptions opt;
    opt.jitter = jitter;
    Var lc = cholesky(*pr.cov, opt);
    Var eps(standard_normal(Shape{n, p, 1}, rng));
    return pr.mean + reshape(matmul(lc, eps), Shape{n, p});
  }

  /// sum_c KL(N(m_c, S_c) || N(0, Kuu)).
  Var kl_to_prior(const ParameterStore& ps) const {
    VariationalGaussian v = q(ps);
    const double m = static_cast<double>(spec.num_inducing);
    Var total;
    for (std::size_t g = 0; g < spec.num_groups(); ++g) {
      auto heads = group_heads(g);
      const double ch = static_cast<double>(heads.size());
      Var l = kuu_chol(ps, g);
      Var mean = spec.shared_inducing ? v.mean : column(v.mean, g);
      Var chol = spec.shared_inducing ? v.chol : slice_leading(v.chol, g);
      Var trace = sum(square(triangular_solve(l, chol)));
      Var maha = sum(square(triangular_solve(l, mean)));
      Var logdet_k = scale(sum(log(diag_part(l))), 2.0 * ch);
      Var logdet_s = sum(log(square(diag_part(chol))));
      Var kl = scale(add_scalar(trace + maha + logdet_k - logdet_s, -m * ch), 0.5);
      total = total.defined() ? total + kl : kl;
    }
    return total;
  }

  /// Posterior of the patch-response function g over every patch of each image, for head c:
  /// mean [N x P] and full within-image covariance [N x P x P].
  Prediction response_posterior(const ParameterStore& ps, const Var& images, std::size_t head = 0) const {
    check_input(images);
    if (head >= spec.num_heads) throw ShapeError("head index out of range");
    const std::size_t g = spec.shared_inducing ? 0 : head;
    VariationalGaussian v = q(ps);
    Var mean = column(v.mean, head);
    Var chol = slice_leading(v.chol, head);
    return multi_output_posterior(ps, images, g, mean, chol, true);
  }

 private:
  Prediction predict_single(const ParameterStore& ps, const Var& images) const {
    ConvKernel k = conv_kernel(ps);
    VariationalGaussian v = q(ps);
    Var kff = reshape(k.diag(images), Shape{1, images.dim(0)});
    std::vector<Var> means, vars;
    for (std::size_t g = 0; g < spec.num_groups(); ++g) {
      Var l = kuu_chol(ps, g);
      Var kmn = kuf(inducing(ps, g), k, images);
      Var mean = spec.shared_inducing ? v.mean : column(v.mean, g);
      Var chol = spec.shared_inducing ? v.chol : slice_leading(v.chol, g);
      ConditionalTerms t = conditional_terms(l, kmn, mean, chol);
      Var qff = reshape(sum(square(t.a), 0), Shape{1, images.dim(0)});
      means.push_back(transpose(t.mean));                // [Cg x N]
      vars.push_back(kff - qff + sum(square(t.t), 1));  // [Cg x N]
    }
    Var mean = means.size() == 1 ? means[0] : concat(means);
    Var var = vars.size() == 1 ? vars[0] : concat(vars);
    return Prediction{transpose(mean), transpose(var), std::nullopt};
  }

  Prediction predict_multi(const ParameterStore& ps, const Var& images, bool full_cov) const {
    VariationalGaussian v = q(ps);
    Prediction pr = multi_output_posterior(ps, images, 0, v.mean, v.chol, full_cov);
    if (spec.mean == MeanFunction::IdentityConv) pr.mean = pr.mean + identity_conv_mean(images, spec.scheme);
    return pr;
  }

  Prediction multi_output_posterior(const ParameterStore& ps, const Var& images, std::size_t group,
                                    const Var& q_mean, const Var& q_chol, bool full_cov) const {
    MultiOutputConvKernel k = multi_output_kernel(ps);
    const std::size_t n = images.dim(0), p = k.num_outputs(), m = spec.num_inducing;
    Var l = kuu_chol(ps, group);
    Var kmn = reshape(kuf(inducing(ps, group), k, images), Shape{m, n * p});
    Var chol = reshape(q_chol, Shape{m, m});
    ConditionalTerms t = conditional_terms(l, kmn, q_mean, chol);
    Prediction pr;
    pr.mean = reshape(t.mean, Shape{n, p});
    Var qff = reshape(sum(square(t.a), 0), Shape{n, p});
    Var sff = reshape(sum(square(t.t), 0), Shape{n, p});
    pr.var = k.marginal_variance(n) - qff + sff;
    if (full_cov)
      pr.cov = k.batched_covariance(images) - block_gram(reshape(t.a, Shape{m, n, p})) +
               block_gram(reshape(t.t, Shape{m, n, p}));
    return pr;
  }
};

}  // namespace tickgp
