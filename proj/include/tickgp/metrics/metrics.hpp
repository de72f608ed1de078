#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "tickgp/model/deep_model.hpp"

namespace tickgp {

/// Floats as text with 17 significant digits (round-trips every double).
inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void check_proba(const Tensor& proba, const std::vector<int>& labels) {
  if (proba.rank() != 2 || proba.dim(0) != labels.size())
    throw ShapeError("probabilities " + shape_string(proba.shape()) + " do not match " + std::to_string(labels.size()) +
                     " labels");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= proba.dim(1))
      throw DataError("label " + std::to_string(y) + " outside the " + std::to_string(proba.dim(1)) + " classes");
}

/// Rank of the true class (0 = highest); ties put the lower class index first.
inline std::size_t true_class_rank(const double* p, std::size_t c, std::size_t y) {
  std::size_t rank = 0;
  for (std::size_t j = 0; j < c; ++j)
    if (p[j] > p[y] || (p[j] == p[y] && j < y)) ++rank;
  return rank;
}

/// Percentage of images whose true class is not among the k most probable.
inline double top_k_error(const Tensor& proba, const std::vector<int>& labels, std::size_t k) {
  check_proba(proba, labels);
  const std::size_t c = proba.dim(1);
  if (k < 1 || k > c) throw ShapeError("k=" + std::to_string(k) + " outside [1, " + std::to_string(c) + "]");
  if (labels.empty()) return 0.0;
  std::size_t miss = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (true_class_rank(proba.data() + i * c, c, static_cast<std::size_t>(labels[i])) >= k) ++miss;
  return 100.0 * static_cast<double>(miss) / static_cast<double>(labels.size());
}

enum class NllSubset { Full, Misclassified };

struct NllResult {
  double value = 0.0;
  std::size_t count = 0;
  bool empty = false;  // subset had no images; value is 0 by definition
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean of -log p(true class) over the subset; probabilities floored at 1e-12.
inline NllResult nll(const Tensor& proba, const std::vector<int>& labels, NllSubset subset = NllSubset::Full) {
  check_proba(proba, labels);
  const std::size_t c = proba.dim(1);
  NllResult r;
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* p = proba.data() + i * c;
    const auto y = static_cast<std::size_t>(labels[i]);
    if (subset == NllSubset::Misclassified) {
      const auto argmax = static_cast<std::size_t>(std::max_element(p, p + c) - p);
      if (argmax == y) continue;
    }
    total -= std::log(std::max(p[y], kProbabilityFloor));
    ++r.count;
  }
  r.empty = r.count == 0;
  r.value = r.empty ? 0.0 : total / static_cast<double>(r.count);
  return r;
}

/// Joint posterior samples of the patch-response function g over every patch of one image, minus the
/// posterior mean, arranged by patch location: [S x out_h x out_w].
inline Tensor patch_response_map(const DeepModel& model, const Tensor& image, std::size_t num_samples, Rng& rng,
                                 std::size_t head = 0) {
  const GPLayer& layer = model.final_layer();
  const auto& sc = layer.spec.scheme;
  Tensor img = image.rank() == 2 ? image.reshaped(Shape{1, image.dim(0), image.dim(1)}) : image;
  if (img.rank() != 3 || img.dim(0) != 1) throw ShapeError("patch_response_map takes a single image");
  Prediction pr = layer.response_posterior(model.params, Var(img), head);
  const std::size_t p = sc.num_patches();
  RowMatrix cov = pr.cov->value().matrix(0);
  cov = 0.5 * (cov + cov.transpose());
  // Symmetric square root with clamped eigenvalues: exact for singular covariances (identical patches).
  Eigen::SelfAdjointEigenSolver<RowMatrix> es(cov);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition of the response covariance failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double tol = 1e-12 * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = ev[i] > tol ? std::sqrt(ev[i]) : 0.0;
  RowMatrix root = es.eigenvectors() * ev.asDiagonal();
  Tensor out(Shape{num_samples, sc.out_height(), sc.out_width()});
  std::normal_distribution<double> dist;
  Eigen::VectorXd eps(static_cast<Eigen::Index>(p));
  for (std::size_t s = 0; s < num_samples; ++s) {
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = dist(rng);
    Eigen::VectorXd dev = root * eps;
    std::copy(dev.data(), dev.data() + p, out.data() + s * p);
  }
  return out;
}

/// 8-bit binary PGM, min-max scaled; the scaling is recorded in a header comment.
inline void write_pgm(const std::string& path, const double* values, std::size_t height, std::size_t width) {
  const std::size_t n = height * width;
  const double lo = *std::min_element(values, values + n), hi = *std::max_element(values, values + n);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "P5\n# min " << format_double(lo) << " max " << format_double(hi) << " (0 -> min, 255 -> max)\n"
      << width << ' ' << height << "\n255\n";
  for (std::size_t i = 0; i < n; ++i) {
    const double t = hi > lo ? (values[i] - lo) / (hi - lo) : 0.5;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
}

/// Simple CSV writer with a fixed header.
class CsvWriter {
 public:
  CsvWriter() = default;
  CsvWriter(const std::string& path, const std::vector<std::string>& header, bool append = false)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw DataError("cannot write '" + path + "'");
    if (!append) row(header);
  }

  template <class... T>
  void write(const T&... fields) {
    std::vector<std::string> f{to_field(fields)...};
    row(f);
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << fields[i];
    out_ << '\n';
    out_.flush();
  }

 private:
  static std::string to_field(double v) { return format_double(v); }
  static std::string to_field(const std::string& s) { return s; }
  static std::string to_field(const char* s) { return s; }
  template <class I>
    requires std::is_integral_v<I>
  static std::string to_field(I v) {
    return std::to_string(v);
  }

  std::ofstream out_;
};

}  // namespace tickgp
