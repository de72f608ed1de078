#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "tickgp/kernels/stationary.hpp"

namespace tickgp {

/// Pivoted partial Cholesky of an SPD matrix: returns F [n x r] with K ~ F F^T, stopping once the
/// trace of the residual drops below `tol`. Smooth kernels on dense grids have low numerical rank, so
/// this gives exact-to-tolerance samples without a diagonal jitter.
inline RowMatrix pivoted_cholesky(const RowMatrix& k, double tol) {
  const Eigen::Index n = k.rows();
  Eigen::VectorXd d = k.diagonal();
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  std::vector<Eigen::VectorXd> cols;
  while (static_cast<Eigen::Index>(cols.size()) < n) {
    Eigen::Index piv = 0;
    const double dmax = d.maxCoeff(&piv);
    if (d.sum() <= tol || dmax <= 0.0) break;
    Eigen::VectorXd c = k.col(piv);
    for (const auto& prev : cols) c -= prev[piv] * prev;
    c /= std::sqrt(dmax);
    d -= c.cwiseAbs2();
    d[piv] = 0.0;
    cols.push_back(std::move(c));
  }
  RowMatrix f(n, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) f.col(static_cast<Eigen::Index>(j)) = cols[j];
  return f;
}

struct CrossingReport {
  double lengthscale = 0.0;
  std::size_t samples = 0;
  std::size_t grid = 0;
  double analytic_up = 0.0;     // expected up-crossings of zero in [0, 1]
  double mc_up = 0.0;
  double mc_up_se = 0.0;
  double analytic_total = 0.0;  // up- and down-crossings
  double mc_total = 0.0;
  double mc_total_se = 0.0;
  std::size_t rank = 0;
  std::string warning;
};

/// Monte-Carlo zero-crossing counts of unit-variance SE-GP draws on `grid` equispaced points of [0, 1].
inline CrossingReport zero_crossing_experiment(double lengthscale, std::size_t samples, std::size_t grid, Rng& rng) {
  if (grid < 2 || samples < 2) throw ConfigError("crossing experiment needs >= 2 samples and >= 2 grid points");
  auto k = StationaryKernel::constant(KernelFamily::SquaredExponential, 1.0, lengthscale);
  CrossingReport r;
  r.lengthscale = lengthscale;
  r.samples = samples;
  r.grid = grid;
  r.analytic_up = expected_zero_crossings(k);
  r.analytic_total = 2.0 * r.analytic_up;
  if (static_cast<double>(grid) < 10.0 * r.analytic_total)
    r.warning = "grid of " + std::to_string(grid) + " points is coarse for " + std::to_string(r.analytic_total) +
                " expected crossings (< 10 points per crossing); counts will be biased low";
  Tensor t(Shape{grid, 1});
  for (std::size_t i = 0; i < grid; ++i) t[i] = static_cast<double>(i) / static_cast<double>(grid - 1);
  Var x(t);
  RowMatrix kmat = k.gram(x, x).value().matrix();
  RowMatrix f = pivoted_cholesky(kmat, 1e-12 * static_cast<double>(grid));
  r.rank = static_cast<std::size_t>(f.cols());
  std::normal_distribution<double> normal;
  Eigen::VectorXd eps(f.cols());
  double su = 0.0, su2 = 0.0, st = 0.0, st2 = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = normal(rng);
    Eigen::VectorXd g = f * eps;
    double up = 0.0, total = 0.0;
    for (Eigen::Index i = 0; i + 1 < g.size(); ++i) {
      const bool a = g[i] < 0.0, b = g[i + 1] < 0.0;
      if (a != b) {
        total += 1.0;
        if (a) up += 1.0;
      }
    }
    su += up;
    su2 += up * up;
    st += total;
    st2 += total * total;
  }
  const double n = static_cast<double>(samples);
  auto se = [n](double s1, double s2) { return std::sqrt(std::max(s2 / n - (s1 / n) * (s1 / n), 0.0) * n / (n - 1) / n); };
  r.mc_up = su / n;
  r.mc_up_se = se(su, su2);
  r.mc_total = st / n;
  r.mc_total_se = se(st, st2);
  return r;
}

}  // namespace tickgp
