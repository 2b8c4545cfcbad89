#pragma once

// Linear hidden-feature extraction: per-layer affine maps from neuron
// pre-activation space into a low-dimensional feature space.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "featcov/binary_io.hpp"
#include "featcov/error.hpp"

namespace featcov {

enum class Technique { pca, pca_scaled, ica };

inline const char *to_string(Technique t) {
  switch (t) {
  case Technique::pca: return "pca";
  case Technique::pca_scaled: return "pca_scaled";
  case Technique::ica: return "ica";
  }
  return "?";
}

inline Technique parse_technique(const std::string &s) {
  if (s == "pca")
    return Technique::pca;
  if (s == "pca_scaled")
    return Technique::pca_scaled;
  if (s == "ica")
    return Technique::ica;
  throw ArgumentError("feature", "unknown technique '" + s + "'");
}

/// One feature component written as an affine form over raw neuron values.
struct LinearForm {
  std::vector<double> coeffs;
  double constant = 0.0;

  double eval(std::span<const double> v) const {
    double acc = constant;
    for (std::size_t k = 0; k < coeffs.size(); ++k)
      acc += coeffs[k] * v[k];
    return acc;
  }
};

/// feat(v) = (v ./ scale) * W + B, with W of size |h| x t.
struct FeatureMap {
  std::size_t layer = 0;
  Technique technique = Technique::pca;
  std::uint64_t seed = 0;
  Eigen::MatrixXd W;
  Eigen::VectorXd B;
  /// Per-neuron divisor (pca_scaled only).
  std::optional<Eigen::VectorXd> scale;
  /// Fraction of total variance per component (pca variants only).
  std::vector<double> explained_variance_ratio;

  std::size_t input_size() const { return static_cast<std::size_t>(W.rows()); }
  std::size_t components() const { return static_cast<std::size_t>(W.cols()); }

  LinearForm component(std::size_t j) const {
    LinearForm f;
    f.coeffs.resize(input_size());
    for (std::size_t k = 0; k < input_size(); ++k)
      f.coeffs[k] = W(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) /
                    (scale ? (*scale)(static_cast<Eigen::Index>(k)) : 1.0);
    f.constant = B(static_cast<Eigen::Index>(j));
    return f;
  }
};

inline std::vector<double> project(const FeatureMap &fm, std::span<const double> v) {
  if (v.size() != fm.input_size())
    throw ShapeError("feature", "layer " + std::to_string(fm.layer) + ": vector has " +
                                    std::to_string(v.size()) + " entries, map expects " +
                                    std::to_string(fm.input_size()));
  Eigen::Map<const Eigen::VectorXd> x(v.data(), static_cast<Eigen::Index>(v.size()));
  Eigen::VectorXd out =
      fm.scale ? Eigen::VectorXd(fm.W.transpose() * x.cwiseQuotient(*fm.scale) + fm.B)
               : Eigen::VectorXd(fm.W.transpose() * x + fm.B);
  return {out.data(), out.data() + out.size()};
}

/// Row-wise project over a samples x neurons matrix. Goes through project()
/// row by row so that both give bit-identical feature values.
inline Eigen::MatrixXd project_dataset(const FeatureMap &fm, const Eigen::MatrixXd &preacts) {
  if (preacts.rows() > 0 && static_cast<std::size_t>(preacts.cols()) != fm.input_size())
    throw ShapeError("feature", "matrix has " + std::to_string(preacts.cols()) +
                                    " columns, map expects " + std::to_string(fm.input_size()));
  Eigen::MatrixXd out(preacts.rows(), fm.W.cols());
  std::vector<double> row(static_cast<std::size_t>(preacts.cols()));
  for (Eigen::Index i = 0; i < preacts.rows(); ++i) {
    for (Eigen::Index k = 0; k < preacts.cols(); ++k)
      row[static_cast<std::size_t>(k)] = preacts(i, k);
    const auto f = project(fm, row);
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      out(i, j) = f[static_cast<std::size_t>(j)];
  }
  return out;
}

namespace detail {

struct Eigenpairs {
  Eigen::VectorXd values;  // descending
  Eigen::MatrixXd vectors; // columns, unit norm, in neuron space
};

/// Leading eigenpairs of the sample covariance of the centred matrix `xc`.
/// Falls back to the Gram matrix when there are fewer samples than neurons.
inline Eigenpairs covariance_eigen(const Eigen::MatrixXd &xc) {
  const auto n = xc.rows(), h = xc.cols();
  const double denom = static_cast<double>(n - 1);
  Eigenpairs out;
  if (n >= h) {
    Eigen::MatrixXd cov = (xc.transpose() * xc) / denom;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    out.values = es.eigenvalues().reverse();
    out.vectors = es.eigenvectors().rowwise().reverse();
  } else {
    Eigen::MatrixXd gram = (xc * xc.transpose()) / denom;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    Eigen::VectorXd vals = es.eigenvalues().reverse();
    Eigen::MatrixXd u = es.eigenvectors().rowwise().reverse();
    out.values = vals;
    out.vectors = Eigen::MatrixXd::Zero(h, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd v = xc.transpose() * u.col(i);
      double norm = v.norm();
      if (norm > 0)
        out.vectors.col(i) = v / norm;
    }
  }
  out.values = out.values.cwiseMax(0.0);
  return out;
}

/// Flips each column so that its largest-magnitude entry is positive.
inline void canonical_signs(Eigen::MatrixXd &cols) {
  for (Eigen::Index j = 0; j < cols.cols(); ++j) {
    Eigen::Index arg = 0;
    cols.col(j).cwiseAbs().maxCoeff(&arg);
    if (cols(arg, j) < 0)
      cols.col(j) *= -1.0;
  }
}

inline std::size_t numerical_rank(const Eigen::VectorXd &desc_values, Eigen::Index n, Eigen::Index h) {
  if (desc_values.size() == 0 || desc_values(0) <= 0)
    return 0;
  const double tol = desc_values(0) * static_cast<double>(std::max(n, h)) *
                     std::numeric_limits<double>::epsilon() * 10.0;
  std::size_t r = 0;
  for (Eigen::Index i = 0; i < desc_values.size(); ++i)
    if (desc_values(i) > tol)
      ++r;
  return r;
}

/// (W W^T)^{-1/2} W
inline Eigen::MatrixXd symmetric_decorrelation(const Eigen::MatrixXd &w) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w * w.transpose());
  Eigen::VectorXd inv_sqrt = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose() * w;
}

} // namespace detail

struct IcaOptions {
  int max_iterations = 500;
  double tolerance = 1e-6;
};

/// Fits a feature map on a samples x neurons matrix of pre-activation values.
///
/// PCA components come out ordered by decreasing explained variance, each
/// with its largest loading positive. ICA whitens onto the leading `t`
/// principal directions and then runs symmetric FastICA with the log-cosh
/// contrast, initialised from `seed`.
inline FeatureMap fit_feature_map(Technique technique, const Eigen::MatrixXd &preacts, std::size_t t,
                                  std::uint64_t seed = 0, std::size_t layer = 0,
                                  IcaOptions ica = {}) {
  const std::string mod = "feature";
  const auto n = preacts.rows(), h = preacts.cols();
  if (t == 0)
    throw ArgumentError(mod, "component count must be at least 1");
  if (n < 2)
    throw ArgumentError(mod, "need at least 2 samples, got " + std::to_string(n));
  if (h == 0)
    throw ArgumentError(mod, "layer has no neurons");
  if (!preacts.allFinite())
    throw ArgumentError(mod, "non-finite pre-activation values");
  if (t > static_cast<std::size_t>(std::min(n, h)))
    throw ArgumentError(mod, "cannot extract " + std::to_string(t) + " components from " +
                                 std::to_string(n) + " samples of " + std::to_string(h) + " neurons");
  const auto ti = static_cast<Eigen::Index>(t);

  FeatureMap fm;
  fm.layer = layer;
  fm.technique = technique;
  fm.seed = seed;

  Eigen::RowVectorXd mean = preacts.colwise().mean();
  Eigen::MatrixXd xc = preacts.rowwise() - mean;
  if (technique == Technique::pca_scaled) {
    Eigen::VectorXd sd = (xc.array().square().colwise().sum() / static_cast<double>(n)).sqrt().transpose();
    sd = sd.cwiseMax(1e-12);
    xc = xc.array().rowwise() / sd.transpose().array();
    fm.scale = sd;
  }

  auto eig = detail::covariance_eigen(xc);
  const double total = eig.values.sum();
  if (!(total > 0.0))
    throw NumericError(mod, "layer " + std::to_string(layer) + ": zero variance on every neuron");
  const auto rank = detail::numerical_rank(eig.values, n, h);
  if (rank < t)
    throw NumericError(mod, "layer " + std::to_string(layer) + ": sample has rank " +
                                std::to_string(rank) + " < " + std::to_string(t) + " components");

  // mean of the (possibly scaled) data, in the same space as W
  Eigen::VectorXd shifted_mean = mean.transpose();
  if (fm.scale)
    shifted_mean = shifted_mean.cwiseQuotient(*fm.scale);

  if (technique != Technique::ica) {
    fm.W = eig.vectors.leftCols(ti);
    detail::canonical_signs(fm.W);
    for (Eigen::Index j = 0; j < ti; ++j)
      fm.explained_variance_ratio.push_back(eig.values(j) / total);
    fm.B = -(fm.W.transpose() * shifted_mean);
    return fm;
  }

  // whitening: z = K (v - mean), K = diag(1/sqrt(lambda)) E^T
  Eigen::MatrixXd K = eig.values.head(ti).cwiseSqrt().cwiseInverse().asDiagonal() *
                      eig.vectors.leftCols(ti).transpose();
  Eigen::MatrixXd Z = K * xc.transpose(); // t x n
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd w(ti, ti);
  for (Eigen::Index i = 0; i < ti; ++i)
    for (Eigen::Index j = 0; j < ti; ++j)
      w(i, j) = normal(rng);
  w = detail::symmetric_decorrelation(w);
  bool converged = false;
  for (int it = 0; it < ica.max_iterations; ++it) {
    Eigen::MatrixXd g = (w * Z).array().tanh().matrix();
    Eigen::VectorXd gprime_mean = (1.0 - g.array().square()).rowwise().mean();
    Eigen::MatrixXd w1 = (g * Z.transpose()) / static_cast<double>(n) - gprime_mean.asDiagonal() * w;
    w1 = detail::symmetric_decorrelation(w1);
    double lim = ((w1 * w.transpose()).diagonal().cwiseAbs().array() - 1.0).abs().maxCoeff();
    w = w1;
    if (lim < ica.tolerance) {
      converged = true;
      break;
    }
  }
  if (!converged)
    throw NumericError(mod, "layer " + std::to_string(layer) + ": ICA did not converge in " +
                                std::to_string(ica.max_iterations) + " iterations");
  fm.W = (w * K).transpose();
  detail::canonical_signs(fm.W);
  fm.B = -(fm.W.transpose() * shifted_mean);
  return fm;
}

// --- serialisation (.bnf) ---------------------------------------------------

inline std::string serialize_feature_map(const FeatureMap &fm) {
  io::ByteWriter w;
  std::string head = "BNF 1\nlayer " + std::to_string(fm.layer) + "\ntechnique " +
                     to_string(fm.technique) + "\ncomponents " + std::to_string(fm.components()) +
                     "\ninputs " + std::to_string(fm.input_size()) + "\nseed " +
                     std::to_string(fm.seed) + "\nscale " + (fm.scale ? "1" : "0") + "\n";
  if (!fm.explained_variance_ratio.empty()) {
    head += "evr";
    for (double r : fm.explained_variance_ratio)
      head += " " + io::format_real(r);
    head += "\n";
  }
  w.put_text(head + "end\n");
  for (Eigen::Index r = 0; r < fm.W.rows(); ++r)
    for (Eigen::Index c = 0; c < fm.W.cols(); ++c)
      w.put_f64(fm.W(r, c));
  for (Eigen::Index c = 0; c < fm.B.size(); ++c)
    w.put_f64(fm.B(c));
  if (fm.scale)
    for (Eigen::Index r = 0; r < fm.scale->size(); ++r)
      w.put_f64((*fm.scale)(r));
  return w.take();
}

inline FeatureMap parse_feature_map(std::string_view bytes) {
  const std::string mod = "feature";
  auto h = io::parse_header(bytes, "BNF", 1, mod);
  FeatureMap fm;
  fm.layer = static_cast<std::size_t>(io::parse_int(h.require("layer", mod).at(1), mod));
  fm.technique = parse_technique(h.require("technique", mod).at(1));
  auto t = io::parse_int(h.require("components", mod).at(1), mod);
  auto n = io::parse_int(h.require("inputs", mod).at(1), mod);
  fm.seed = static_cast<std::uint64_t>(std::stoull(h.require("seed", mod).at(1)));
  bool scaled = io::parse_int(h.require("scale", mod).at(1), mod) != 0;
  if (t <= 0 || n <= 0)
    throw FormatError(mod, "bad dimensions");
  if (const auto *evr = h.find("evr"))
    for (std::size_t i = 1; i < evr->size(); ++i)
      fm.explained_variance_ratio.push_back(io::parse_double((*evr)[i], mod));
  io::ByteReader r(bytes.substr(h.payload_offset), mod);
  fm.W.resize(n, t);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < t; ++j)
      fm.W(i, j) = r.get_f64();
  fm.B.resize(t);
  for (Eigen::Index j = 0; j < t; ++j)
    fm.B(j) = r.get_f64();
  if (scaled) {
    Eigen::VectorXd s(n);
    for (Eigen::Index i = 0; i < n; ++i)
      s(i) = r.get_f64();
    fm.scale = s;
  }
  if (r.remaining() != 0)
    throw FormatError(mod, "trailing bytes after payload");
  return fm;
}

} // namespace featcov
