#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace tickgp;
using namespace tickgp::testing;

namespace {

struct Fixture {
  GPLayer layer;
  ParameterStore ps;
};

Tensor random_lower(std::size_t c, std::size_t m, Rng& rng, double diag_lo = 0.3) {
  Tensor t = random_tensor({c, m, m}, rng, -0.3, 0.3);
  std::uniform_real_distribution<double> d(diag_lo, 1.0);
  for (std::size_t h = 0; h < c; ++h)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double& v = t[(h * m + i) * m + j];
        if (j > i) v = 0.0;
        if (j == i) v = d(rng);
      }
  return t;
}

/// A layer with random inducing inputs, hyperparameters and q.
Fixture make_layer(const LayerSpec& s, Rng& rng) {
  Fixture f{GPLayer(s), {}};
  register_layer(s, f.ps, 1.0, ModelConfig{});
  const std::size_t m = s.num_inducing;
  f.ps.set(s.key("Z"), random_tensor(f.ps.entry(s.key("Z")).raw.shape(), rng, 0.0, 1.0));
  f.ps.set(s.key("patch.variance"), Tensor::vector({1.3}));
  f.ps.set(s.key("patch.lengthscale"), Tensor::vector({0.7}));
  if (s.tick) {
    f.ps.set(s.key("Z_loc"), random_tensor(f.ps.entry(s.key("Z_loc")).raw.shape(), rng, 0.0, double(s.scheme.image_height)));
    f.ps.set(s.key("loc.lengthscale"), Tensor::vector({2.0}));
  }
  if (s.weights) f.ps.set(s.key("weights"), random_tensor({s.scheme.num_patches()}, rng, 0.2, 1.5));
  f.ps.set(s.key("q_mu"), random_tensor({m, s.num_heads}, rng));
  f.ps.set(s.key("q_sqrt"), random_lower(s.num_heads, m, rng));
  return f;
}

LayerSpec single_spec(std::size_t hw, std::size_t patch, std::size_t m, std::size_t heads, bool tick, bool weights) {
  LayerSpec s;
  s.name = "L0";
  s.kind = OutputKind::SingleOutput;
  s.scheme = PatchScheme(hw, hw, patch, patch);
  s.num_inducing = m;
  s.num_heads = heads;
  s.tick = tick;
  s.weights = weights;
  return s;
}

LayerSpec multi_spec(std::size_t hw, std::size_t patch, std::size_t m, bool tick, MeanFunction mean) {
  LayerSpec s;
  s.name = "H0";
  s.kind = OutputKind::MultiOutput;
  s.scheme = PatchScheme(hw, hw, patch, patch);
  s.num_inducing = m;
  s.tick = tick;
  s.mean = mean;
  return s;
}

RowMatrix mat(const Var& v, std::size_t b = 0) { return v.value().matrix(b); }

/// Dense posterior moments by explicit inverses: mean Kfu Kuu^-1 m,
/// cov Kff - Kfu Kuu^-1 Kuf + Kfu Kuu^-1 S Kuu^-1 Kuf.
struct Dense {
  Eigen::VectorXd mean;
  RowMatrix cov;
};

Dense dense_posterior(const RowMatrix& kuu, const RowMatrix& kuf, const RowMatrix& kff, const Eigen::VectorXd& m,
                      const RowMatrix& s) {
  RowMatrix kinv = kuu.inverse();
  RowMatrix a = kinv * kuf;
  return {a.transpose() * m, kff - kuf.transpose() * a + a.transpose() * s * a};
}

RowMatrix q_cov(const ParameterStore& ps, const LayerSpec& s, std::size_t head) {
  const std::size_t m = s.num_inducing;
  Tensor l = ps.value(s.key("q_sqrt"));
  ConstMatrixMap lm(l.data() + head * m * m, long(m), long(m));
  return lm * lm.transpose();
}

Eigen::VectorXd q_mean(const ParameterStore& ps, const LayerSpec& s, std::size_t head) {
  Tensor mu = ps.value(s.key("q_mu"));
  Eigen::VectorXd v(s.num_inducing);
  for (std::size_t i = 0; i < s.num_inducing; ++i) v[long(i)] = mu(i, head);
  return v;
}

void set_q_to_prior(Fixture& f) {
  const auto& s = f.layer.spec;
  const std::size_t m = s.num_inducing;
  RowMatrix k = mat(kuu(f.layer.inducing(f.ps), f.layer.response(f.ps), s.jitter));
  RowMatrix l = Eigen::LLT<RowMatrix>(k).matrixL();
  Tensor chol(Shape{s.num_heads, m, m});
  for (std::size_t h = 0; h < s.num_heads; ++h) chol.matrix(h) = l;
  f.ps.set(s.key("q_sqrt"), chol);
  f.ps.set(s.key("q_mu"), Tensor(Shape{m, s.num_heads}));
}

}  // namespace

// ---- predict ----------------------------------------------------------------------------

TEST(Predict, SingleOutputMatchesDenseOracle) {
  Rng rng(1);
  for (bool tick : {false, true}) {
    auto f = make_layer(single_spec(5, 3, 6, 3, tick, true), rng);
    Var x(random_images(4, 5, 5, rng));
    Prediction pr = f.layer.predict(f.ps, x);
    ConvKernel k = f.layer.conv_kernel(f.ps);
    RowMatrix ku = mat(kuu(f.layer.inducing(f.ps), k.response, f.layer.spec.jitter));
    RowMatrix kf = mat(kuf(f.layer.inducing(f.ps), k, x));
    RowMatrix kff = mat(conv_kernel_matrix(k, x, x));
    for (std::size_t c = 0; c < 3; ++c) {
      Dense d = dense_posterior(ku, kf, kff, q_mean(f.ps, f.layer.spec, c), q_cov(f.ps, f.layer.spec, c));
      for (std::size_t n = 0; n < 4; ++n) {
        EXPECT_NEAR(pr.mean.value()(n, c), d.mean[long(n)], 1e-8 * (1.0 + std::abs(d.mean[long(n)])));
        EXPECT_NEAR(pr.var.value()(n, c), d.cov(long(n), long(n)), 1e-8 * d.cov(long(n), long(n)));
      }
    }
  }
}

TEST(Predict, MultiOutputMatchesDenseOracle) {
  Rng rng(2);
  for (bool tick : {false, true}) {
    auto f = make_layer(multi_spec(5, 3, 7, tick, MeanFunction::Zero), rng);
    Var x(random_images(2, 5, 5, rng));
    Prediction pr = f.layer.predict(f.ps, x, true);
    MultiOutputConvKernel k = f.layer.multi_output_kernel(f.ps);
    RowMatrix ku = mat(kuu(f.layer.inducing(f.ps), k.response, f.layer.spec.jitter));
    Tensor kf = kuf(f.layer.inducing(f.ps), k, x).value();  // [M x N x P]
    for (std::size_t n = 0; n < 2; ++n) {
      RowMatrix kfn(7, 9);
      for (std::size_t m = 0; m < 7; ++m)
        for (std::size_t p = 0; p < 9; ++p) kfn(long(m), long(p)) = kf[(m * 2 + n) * 9 + p];
      Tensor img(Shape{5, 5}, std::vector<double>(x.value().data() + 25 * n, x.value().data() + 25 * n + 25));
      RowMatrix kff = mat(mock_covariance(k, Var(img), Var(img)));
      Dense d = dense_posterior(ku, kfn, kff, q_mean(f.ps, f.layer.spec, 0), q_cov(f.ps, f.layer.spec, 0));
      EXPECT_LE((pr.cov->value().matrix(n) - d.cov).cwiseAbs().maxCoeff(), 1e-8);
      for (std::size_t p = 0; p < 9; ++p) EXPECT_NEAR(pr.mean.value()(n, p), d.mean[long(p)], 1e-8);
    }
  }
}

TEST(Predict, PriorQGivesPriorCovariance) {
  Rng rng(3);
  auto f = make_layer(multi_spec(4, 2, 5, true, MeanFunction::Zero), rng);
  set_q_to_prior(f);
  Var x(random_images(2, 4, 4, rng));
  Prediction pr = f.layer.predict(f.ps, x, true);
  Tensor prior = f.layer.multi_output_kernel(f.ps).batched_covariance(x).value();
  EXPECT_LE(pr.mean.value().matrix().cwiseAbs().maxCoeff(), 1e-10);
  for (std::size_t n = 0; n < 2; ++n) EXPECT_LE((pr.cov->value().matrix(n) - prior.matrix(n)).cwiseAbs().maxCoeff(), 1e-8);

  auto g = make_layer(single_spec(4, 2, 5, 2, false, true), rng);
  set_q_to_prior(g);
  Prediction ps = g.layer.predict(g.ps, x);
  Tensor kd = g.layer.conv_kernel(g.ps).diag(x).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(ps.var.value()(n, c), kd[n], 1e-8 * kd[n]);
}

TEST(Predict, DeterministicInducingLimit) {
  Rng rng(4);
  auto f = make_layer(single_spec(4, 2, 5, 1, false, false), rng);
  const std::size_t m = 5;
  Tensor chol(Shape{1, m, m});
  chol.matrix() = 1e-8 * RowMatrix::Identity(m, m);
  f.ps.set("L0.q_sqrt", chol);
  Var x(random_images(3, 4, 4, rng));
  ConvKernel k = f.layer.conv_kernel(f.ps);
  RowMatrix ku = mat(kuu(f.layer.inducing(f.ps), k.response, f.layer.spec.jitter));
  RowMatrix kf = mat(kuf(f.layer.inducing(f.ps), k, x));
  RowMatrix qff = kf.transpose() * ku.ldlt().solve(kf);
  Tensor kd = k.diag(x).value();
  Tensor var = f.layer.predict(f.ps, x).var.value();
  for (std::size_t n = 0; n < 3; ++n) EXPECT_NEAR(var[n], kd[n] - qff(long(n), long(n)), 1e-8 * kd[n]);
}

TEST(Predict, InterpolatesAtInducingPixels) {
  // 1x1 patches: pixel p of the image equals inducing input z_p, so output p recovers m_p.
  LayerSpec s = multi_spec(2, 1, 4, false, MeanFunction::Zero);
  s.jitter = 0.0;
  Rng rng(5);
  auto f = make_layer(s, rng);
  Tensor z = Tensor::matrix({{0.1}, {0.45}, {0.8}, {0.95}});
  f.ps.set("H0.Z", z);
  f.ps.set("H0.patch.lengthscale", Tensor::vector({0.5}));
  Var x(Tensor(Shape{1, 2, 2}, std::vector<double>{0.1, 0.45, 0.8, 0.95}));
  Tensor mean = f.layer.predict(f.ps, x).mean.value();
  Tensor mu = f.ps.value("H0.q_mu");
  for (std::size_t p = 0; p < 4; ++p) EXPECT_NEAR(mean[p], mu[p], 1e-8);
}

TEST(Predict, FullCovarianceIsPsdAndMatchesMarginals) {
  Rng rng(6);
  for (bool tick : {false, true}) {
    auto f = make_layer(multi_spec(6, 3, 8, tick, MeanFunction::IdentityConv), rng);
    Var x(random_images(3, 6, 6, rng));
    Prediction full = f.layer.predict(f.ps, x, true);
    Prediction marg = f.layer.predict(f.ps, x, false);
    EXPECT_FALSE(marg.cov.has_value());
    for (std::size_t n = 0; n < 3; ++n) {
      RowMatrix c = full.cov->value().matrix(n);
      EXPECT_LE((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_GE(min_eigenvalue(c), -1e-8);
      for (std::size_t p = 0; p < 16; ++p) EXPECT_NEAR(marg.var.value()(n, p), c(long(p), long(p)), 1e-10);
    }
    EXPECT_EQ(full.mean.value().to_vector(), marg.mean.value().to_vector());
  }
}

TEST(Predict, IdentityMeanAddsCentrePixels) {
  Rng rng(7);
  auto zero = make_layer(multi_spec(5, 3, 4, false, MeanFunction::Zero), rng);
  GPLayer with_mean(multi_spec(5, 3, 4, false, MeanFunction::IdentityConv));
  Var x(random_images(2, 5, 5, rng));
  Tensor a = zero.layer.predict(zero.ps, x).mean.value();
  Tensor b = with_mean.predict(zero.ps, x).mean.value();
  Tensor centre = identity_conv_mean(x, PatchScheme(5, 5, 3, 3)).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], a[i] + centre[i], 1e-15);
}

TEST(Predict, SeparateInducingGroupsMatchSharedWhenEqual) {
  Rng rng(8);
  LayerSpec shared = single_spec(4, 2, 3, 2, true, true);
  LayerSpec separate = shared;
  separate.shared_inducing = false;
  auto f = make_layer(shared, rng);
  Fixture g{GPLayer(separate), {}};
  register_layer(separate, g.ps, 1.0, ModelConfig{});
  for (const auto& name : f.ps.names()) {
    Tensor v = f.ps.value(name);
    if (name == "L0.Z" || name == "L0.Z_loc") {
      Tensor two(Shape{2, v.dim(0), v.dim(1)});
      std::copy(v.values().begin(), v.values().end(), two.data());
      std::copy(v.values().begin(), v.values().end(), two.data() + v.size());
      v = two;
    }
    g.ps.set(name, v);
  }
  Var x(random_images(3, 4, 4, rng));
  Prediction a = f.layer.predict(f.ps, x), b = g.layer.predict(g.ps, x);
  EXPECT_LE((mat(a.mean) - mat(b.mean)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((mat(a.var) - mat(b.var)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(f.layer.kl_to_prior(f.ps).item(), g.layer.kl_to_prior(g.ps).item(), 1e-10);
}

TEST(Predict, ShapeErrors) {
  Rng rng(9);
  auto f = make_layer(single_spec(4, 2, 3, 1, false, false), rng);
  EXPECT_THROW(f.layer.predict(f.ps, Var(random_images(1, 5, 5, rng))), ShapeError);
  EXPECT_THROW(GPLayer(multi_spec(4, 2, 3, false, MeanFunction::IdentityConv)), ShapeError);
  VariationalGaussian bad{Var(Tensor(Shape{4, 1})), Var(Tensor(Shape{1, 3, 3}))};
  EXPECT_THROW(bad.validate(3, 1), ShapeError);
}

TEST(Predict, Gradients) {
  Rng rng(10);
  for (bool multi : {false, true}) {
    auto f = multi ? make_layer(multi_spec(5, 3, 4, true, MeanFunction::IdentityConv), rng)
                   : make_layer(single_spec(5, 3, 4, 2, true, true), rng);
    Var x(random_images(2, 5, 5, rng));
    Tensor wm = random_tensor(multi ? Shape{2, 9} : Shape{2, 2}, rng);
    Tensor wc = random_tensor({2, 9, 9}, rng);
    auto r = check_store_gradients(f.ps, [&] {
      Prediction pr = f.layer.predict(f.ps, x, multi);
      Var obj = sum(pr.mean * Var(wm)) + sum(square(pr.var)) + f.layer.kl_to_prior(f.ps);
      if (multi) obj = obj + sum(*pr.cov * Var(wc));
      return obj;
    });
    EXPECT_LE(r.max_rel, 1e-4) << (multi ? "multi " : "single ") << r.worst;
  }
}

// ---- sample ----------------------------------------------------------------------------

TEST(Sample, ZeroVarianceReturnsMean) {
  Rng rng(11);
  Prediction pr{Var(random_tensor({3, 4}, rng)), Var(Tensor(Shape{3, 4})), std::nullopt};
  Tensor s = GPLayer::draw(pr, rng, false, 0.0).value();
  EXPECT_EQ(s.to_vector(), pr.mean.value().to_vector());
}

TEST(Sample, MarginalAndFullAgreeOnDiagonalCovariance) {
  Rng rng(12);
  Tensor mean = random_tensor({2, 5}, rng), var = random_tensor({2, 5}, rng, 0.1, 2.0);
  Tensor cov(Shape{2, 5, 5});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 5; ++p) cov[(n * 5 + p) * 5 + p] = var(n, p);
  Prediction pr{Var(mean), Var(var), Var(cov)};
  Rng a(99), b(99);
  Tensor m = GPLayer::draw(pr, a, false, 0.0).value();
  Tensor full = GPLayer::draw(pr, b, true, 0.0).value();
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(m[i], full[i], 1e-14);
}

TEST(Sample, MonteCarloMomentsMatchPrediction) {
  Rng rng(13);
  auto f = make_layer(multi_spec(4, 3, 5, true, MeanFunction::IdentityConv), rng);
  Var x(random_images(2, 4, 4, rng));
  Prediction pr = f.layer.predict(f.ps, x);
  const std::size_t n = 10000, k = pr.mean.size();
  std::vector<double> s1(k), s2(k);
  for (std::size_t t = 0; t < n; ++t) {
    Tensor s = GPLayer::draw(pr, rng, false, 0.0).value();
    for (std::size_t i = 0; i < k; ++i) {
      s1[i] += s[i];
      s2[i] += s[i] * s[i];
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    const double mu = pr.mean.value()[i], v = pr.var.value()[i];
    const double m = s1[i] / n, sv = (s2[i] - n * m * m) / (n - 1);
    EXPECT_LE(std::abs(m - mu), 4.0 * std::sqrt(v / n));
    EXPECT_LE(std::abs(sv - v), 4.0 * v * std::sqrt(2.0 / (n - 1)));
  }
}

TEST(Sample, FullModeDrawsHaveTheCovariance) {
  Rng rng(14);
  auto f = make_layer(multi_spec(4, 3, 5, false, MeanFunction::Zero), rng);
  Var x(random_images(1, 4, 4, rng));
  Prediction pr = f.layer.predict(f.ps, x, true);
  const std::size_t n = 20000;
  RowMatrix acc = RowMatrix::Zero(4, 4);
  Eigen::VectorXd mu = Eigen::Map<const Eigen::VectorXd>(pr.mean.value().data(), 4);
  for (std::size_t t = 0; t < n; ++t) {
    Tensor s = GPLayer::draw(pr, rng, true, 0.0).value();
    Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(s.data(), 4) - mu;
    acc += d * d.transpose();
  }
  acc /= double(n);
  RowMatrix c = pr.cov->value().matrix(0);
  for (long i = 0; i < 4; ++i)
    for (long j = 0; j < 4; ++j) {
      const double se = std::sqrt((c(i, i) * c(j, j) + c(i, j) * c(i, j)) / n);
      EXPECT_LE(std::abs(acc(i, j) - c(i, j)), 4.0 * se);
    }
}

TEST(Sample, ReparameterizedGradients) {
  Rng rng(15);
  auto f = make_layer(multi_spec(5, 3, 4, false, MeanFunction::IdentityConv), rng);
  f.layer.sampling = SamplingMode::Full;
  Var x(random_images(2, 5, 5, rng));
  auto r = check_store_gradients(f.ps, [&] {
    Rng fixed(77);
    return sum(square(f.layer.sample(f.ps, x, fixed)));
  });
  EXPECT_LE(r.max_rel, 1e-3) << r.worst;
}

// ---- KL --------------------------------------------------------------------------------

TEST(KL, ZeroAtPrior) {
  Rng rng(16);
  for (bool tick : {false, true}) {
    auto f = make_layer(single_spec(5, 3, 6, 3, tick, true), rng);
    set_q_to_prior(f);
    EXPECT_NEAR(f.layer.kl_to_prior(f.ps).item(), 0.0, 1e-9);
  }
}

TEST(KL, OneDimensionalClosedForm) {
  LayerSpec s = single_spec(2, 1, 1, 1, false, false);
  s.jitter = 0.0;
  Rng rng(17);
  auto f = make_layer(s, rng);
  f.ps.set("L0.patch.variance", Tensor::vector({1.0}));
  f.ps.set("L0.q_mu", Tensor(Shape{1, 1}));
  f.ps.set("L0.q_sqrt", Tensor(Shape{1, 1, 1}, std::vector<double>{std::sqrt(std::numbers::e)}));
  EXPECT_NEAR(f.layer.kl_to_prior(f.ps).item(), (std::numbers::e - 2.0) / 2.0, 1e-12);
}

TEST(KL, MatchesQuadratureAtTwoInducingPoints) {
  // KL = E_q[log q(u) - log p(u)], integrated on a fine grid in whitened coordinates u = m + L e.
  Rng rng(18);
  for (int trial = 0; trial < 3; ++trial) {
    auto f = make_layer(single_spec(3, 2, 2, 2, trial == 2, false), rng);
    RowMatrix k = mat(kuu(f.layer.inducing(f.ps), f.layer.response(f.ps), f.layer.spec.jitter));
    RowMatrix kinv = k.inverse();
    const double logdet_k = std::log(k.determinant());
    double expected = 0.0;
    for (std::size_t c = 0; c < 2; ++c) {
      RowMatrix s = q_cov(f.ps, f.layer.spec, c);
      Eigen::VectorXd m = q_mean(f.ps, f.layer.spec, c);
      RowMatrix l = Eigen::LLT<RowMatrix>(s).matrixL();
      RowMatrix sinv = s.inverse();
      const double logdet_s = std::log(s.determinant());
      const double h = 0.02, lim = 9.0;
      double total = 0.0;
      for (double e1 = -lim; e1 <= lim + 1e-12; e1 += h)
        for (double e2 = -lim; e2 <= lim + 1e-12; e2 += h) {
          Eigen::Vector2d e(e1, e2);
          Eigen::VectorXd u = m + l * e;
          const double lq = -0.5 * (u - m).dot(sinv * (u - m)) - 0.5 * logdet_s;
          const double lp = -0.5 * u.dot(kinv * u) - 0.5 * logdet_k;
          total += std::exp(-0.5 * e.squaredNorm()) / (2.0 * std::numbers::pi) * (lq - lp) * h * h;
        }
      expected += total;
    }
    EXPECT_NEAR(f.layer.kl_to_prior(f.ps).item(), expected, 1e-6);
  }
}

TEST(KL, NonNegativeForRandomQ) {
  Rng rng(19);
  for (int trial = 0; trial < 100; ++trial) {
    auto f = make_layer(single_spec(4, 2, 4, 2, trial % 2 == 0, false), rng);
    EXPECT_GE(f.layer.kl_to_prior(f.ps).item(), 0.0);
  }
}

// ---- identity conv mean -----------------------------------------------------------------

TEST(IdentityConvMean, Examples) {
  Tensor img(Shape{1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  EXPECT_EQ(identity_conv_mean(Var(img), PatchScheme(3, 3, 3, 3)).value().to_vector(), std::vector<double>{5});
  Tensor zeros(Shape{1, 5, 5});
  Tensor centre = identity_conv_mean(Var(zeros), PatchScheme(5, 5, 3, 3)).value();
  EXPECT_EQ(centre.to_vector(), std::vector<double>(9, 0.0));
  Tensor ramp(Shape{1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) ramp[i] = double(i);
  EXPECT_EQ(identity_conv_mean(Var(ramp), PatchScheme(4, 4, 3, 3)).value().to_vector(),
            (std::vector<double>{5, 6, 9, 10}));
  EXPECT_THROW(identity_conv_mean(Var(ramp), PatchScheme(4, 4, 2, 2)), ShapeError);
}

// ---- likelihoods -------------------------------------------------------------------------

TEST(Softmax, UniformLatent) {
  SoftmaxLikelihood lik{10, 5};
  Var f(Tensor(Shape{1, 2, 10}, 0.3));
  Tensor lp = lik.log_prob(f, Tensor::vector({3, 9})).value();
  for (double v : lp.values()) EXPECT_NEAR(v, std::log(0.1), 1e-14);
}

TEST(Softmax, Saturation) {
  SoftmaxLikelihood lik{10, 5};
  Tensor f(Shape{1, 1, 10});
  f[4] = 1000.0;
  EXPECT_NEAR(lik.log_prob(Var(f), Tensor::vector({4})).item(), 0.0, 1e-300);
  EXPECT_NEAR(lik.log_prob(Var(f), Tensor::vector({2})).item(), -1000.0, 1e-9);
}

TEST(Softmax, LabelErrors) {
  SoftmaxLikelihood lik{3, 5};
  Var f(Tensor(Shape{1, 1, 3}));
  EXPECT_THROW(lik.log_prob(f, Tensor::vector({3})), DataError);
  EXPECT_THROW(lik.log_prob(f, Tensor::vector({-1})), DataError);
  EXPECT_THROW(lik.log_prob(f, Tensor::vector({0.5})), DataError);
  EXPECT_THROW(lik.log_prob(f, Tensor::vector({0, 1})), ShapeError);
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(20);
  SoftmaxLikelihood lik{10, 5};
  Tensor f = random_tensor({3, 4, 10}, rng, -5, 5), g = f;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t c = 0; c < 10; ++c) g[(s * 4 + n) * 10 + c] += 7.5 * double(n + 1);
  Tensor y = Tensor::vector({0, 3, 9, 5});
  Tensor a = lik.log_prob(Var(f), y).value(), b = lik.log_prob(Var(g), y).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-10);
}

TEST(Softmax, LogProbGradient) {
  Rng rng(21);
  SoftmaxLikelihood lik{4, 5};
  std::vector<Var> leaves = {Var(random_tensor({2, 3, 4}, rng, -2, 2))};
  auto r = check_gradients(leaves, [&] { return sum(lik.log_prob(leaves[0], Tensor::vector({0, 3, 1}))); });
  EXPECT_LE(r.max_rel, 1e-8);
}

TEST(PredictProba, SingleSampleIsSoftmax) {
  SoftmaxLikelihood lik{3, 1};
  Tensor f(Shape{1, 1, 3}, std::vector<double>{1.0, 2.0, 0.5});
  Tensor p = lik.predict_proba(f);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(0.5);
  EXPECT_NEAR(p[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(p[1], std::exp(2.0) / z, 1e-15);
  EXPECT_NEAR(p[2], std::exp(0.5) / z, 1e-15);
}

TEST(PredictProba, IdenticalSamplesAndAveraging) {
  SoftmaxLikelihood lik{3, 4};
  Tensor one(Shape{1, 1, 3}, std::vector<double>{0.3, -1.0, 2.0});
  Tensor four(Shape{4, 1, 3});
  for (std::size_t k = 0; k < 4; ++k) std::copy_n(one.data(), 3, four.data() + 3 * k);
  Tensor a = lik.predict_proba(one), b = lik.predict_proba(four);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);

  Tensor two(Shape{2, 1, 3}, std::vector<double>{800, 0, 0, 0, 800, 0});
  Tensor p = lik.predict_proba(two);
  EXPECT_NEAR(p[0], 0.5, 1e-12);
  EXPECT_NEAR(p[1], 0.5, 1e-12);
  EXPECT_NEAR(p[2], 0.0, 1e-12);
}

TEST(PredictProba, RowsAreDistributions) {
  Rng rng(22);
  SoftmaxLikelihood lik{10, 5};
  Tensor p = lik.predict_proba(random_tensor({5, 50, 10}, rng, -30, 30));
  for (std::size_t n = 0; n < 50; ++n) {
    double s = 0.0;
    for (std::size_t c = 0; c < 10; ++c) {
      EXPECT_GE(p(n, c), 0.0);
      EXPECT_LE(p(n, c), 1.0);
      s += p(n, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  EXPECT_THROW(lik.predict_proba(Tensor(Shape{0, 2, 10})), ShapeError);
}

TEST(Gaussian, AtTarget) {
  GaussianLikelihood lik{Var(Tensor::vector({0.3}))};
  Tensor lp = lik.log_prob(Var(Tensor(Shape{1, 2, 1}, std::vector<double>{0.7, -1.2})), Tensor::vector({0.7, -1.2})).value();
  for (double v : lp.values()) EXPECT_NEAR(v, -0.5 * std::log(2.0 * std::numbers::pi * 0.3), 1e-14);
}

TEST(Gaussian, ClosedFormDensity) {
  Rng rng(23);
  std::uniform_real_distribution<double> u(-3, 3), s(0.01, 4);
  for (int i = 0; i < 20; ++i) {
    const double f = u(rng), y = u(rng), v = s(rng);
    GaussianLikelihood lik{Var(Tensor::vector({v}))};
    const double got = lik.log_prob(Var(Tensor(Shape{1, 1}, std::vector<double>{f})), Tensor::vector({y})).item();
    const double density = std::exp(-(y - f) * (y - f) / (2 * v)) / std::sqrt(2 * std::numbers::pi * v);
    EXPECT_NEAR(got, std::log(density), 1e-12);
  }
}

TEST(Gaussian, VariationalExpectationMatchesMonteCarlo) {
  Rng rng(24);
  GaussianLikelihood lik{Var(Tensor::vector({0.4}))};
  const double mu = 0.3, var = 0.5, y = -0.2;
  const double closed =
      lik.variational_expectation(Var(Tensor::vector({mu})), Var(Tensor::vector({var})), Tensor::vector({y})).item();
  std::normal_distribution<double> n(mu, std::sqrt(var));
  const std::size_t draws = 200000;
  double s1 = 0, s2 = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    const double lp = lik.log_prob(Var(Tensor(Shape{1, 1}, std::vector<double>{n(rng)})), Tensor::vector({y})).item();
    s1 += lp;
    s2 += lp * lp;
  }
  const double m = s1 / draws, se = std::sqrt((s2 / draws - m * m) / draws);
  EXPECT_LE(std::abs(m - closed), 4.0 * se);
}
