#pragma once

// Linear encodings of a network evaluation around a candidate input x, of
// feature-interval targets and of the L-infinity proximity objective.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "featcov/discretise.hpp"
#include "featcov/feature.hpp"
#include "featcov/lp.hpp"
#include "featcov/model.hpp"

namespace featcov {

enum class ReluEncoding {
  phase_fixed, ///< n = n^ with n^ >= 0, or n = 0 with n^ <= 0, as exhibited by x
  relaxation,  ///< n >= n^, n >= 0 only
};

/// An LP over the input and the neuron values of layers 1..upto, with the
/// variable ids of every layer. Indices follow Activations (0 is the
/// input). The activation outputs of layer `upto` are not encoded.
struct NetworkEncoding {
  lp::LPProblem lp;
  std::size_t upto = 0;
  std::vector<std::vector<std::size_t>> pre;
  std::vector<std::vector<std::size_t>> post;
  std::vector<double> seed; ///< the candidate input
  /// Distance variable, set by add_linf_objective.
  std::optional<std::size_t> distance;

  std::span<const std::size_t> inputs() const { return pre[0]; }

  /// Variable assignment induced by evaluating `x` (for feasibility checks).
  std::vector<double> assignment_of(const Activations &act) const {
    std::vector<double> a(lp.variable_count(), 0.0);
    for (std::size_t l = 0; l <= upto; ++l) {
      for (std::size_t k = 0; k < pre[l].size(); ++k)
        a[pre[l][k]] = act[l].pre[k];
      if (l < upto)
        for (std::size_t k = 0; k < post[l].size(); ++k)
          a[post[l][k]] = act[l].post[k];
    }
    if (distance) {
      double d = 0;
      for (std::size_t k = 0; k < seed.size(); ++k)
        d = std::max(d, std::abs(act[0].pre[k] - seed[k]));
      a[*distance] = d;
    }
    return a;
  }
};

namespace detail {

inline void encode_relu(NetworkEncoding &e, std::size_t l, const Activations &act, ReluEncoding mode) {
  for (std::size_t k = 0; k < e.pre[l].size(); ++k) {
    const auto n_hat = e.pre[l][k], n = e.post[l][k];
    if (mode == ReluEncoding::relaxation) {
      e.lp.add({{n, 1.0}, {n_hat, -1.0}}, lp::Relation::ge, 0.0, lp::Tag::relu_phase);
      e.lp.add({{n, 1.0}}, lp::Relation::ge, 0.0, lp::Tag::relu_phase);
    } else if (act[l].pre[k] >= 0) {
      e.lp.add({{n, 1.0}, {n_hat, -1.0}}, lp::Relation::eq, 0.0, lp::Tag::relu_phase);
      e.lp.add({{n_hat, 1.0}}, lp::Relation::ge, 0.0, lp::Tag::relu_phase);
    } else {
      e.lp.add({{n, 1.0}}, lp::Relation::eq, 0.0, lp::Tag::relu_phase);
      e.lp.add({{n_hat, 1.0}}, lp::Relation::le, 0.0, lp::Tag::relu_phase);
    }
  }
}

} // namespace detail

/// Selection constraints of maxpool layer `l` (Activations index): for
/// every output j, equality with each input attaining x's window maximum
/// and a strict (slack delta_strict) lower bound over the others.
inline void encode_maxpool(NetworkEncoding &e, const Model &m, const Activations &act, std::size_t l) {
  const auto sel = maxpool_selection_matrix(m, l, act);
  for (std::size_t j = 0; j < sel.rows; ++j) {
    const auto out = e.pre[l][j];
    for (auto k : sel.windows[j]) {
      const auto in = e.post[l - 1][k];
      if (sel(j, k))
        e.lp.add({{out, 1.0}, {in, -1.0}}, lp::Relation::eq, 0.0, lp::Tag::maxpool_phase);
      else
        e.lp.add({{out, 1.0}, {in, -1.0}}, lp::Relation::ge, lp::delta_strict, lp::Tag::maxpool_phase);
    }
  }
}

/// Constraints of the network evaluation from the input up to the
/// pre-activations of layer `upto`, with ReLU phases and maxpool selections
/// taken from the evaluation of `x`, plus the input-domain box.
inline NetworkEncoding encode_network(const Model &m, std::span<const double> x, std::size_t upto,
                                      ReluEncoding relu = ReluEncoding::phase_fixed) {
  if (upto == 0 || upto > m.layers.size())
    throw ArgumentError("encoding", "layer " + std::to_string(upto) + " is not a model layer");
  const auto act = forward(m, x);
  NetworkEncoding e;
  e.upto = upto;
  e.seed.assign(x.begin(), x.end());
  e.pre.resize(upto + 1);
  e.post.resize(upto);

  for (std::size_t k = 0; k < x.size(); ++k) {
    const auto v = e.lp.add_variable("x" + std::to_string(k));
    e.pre[0].push_back(v);
    const auto r = m.domain_of(k);
    e.lp.add({{v, 1.0}}, lp::Relation::ge, r.lo, lp::Tag::input_box);
    e.lp.add({{v, 1.0}}, lp::Relation::le, r.hi, lp::Tag::input_box);
  }
  e.post[0] = e.pre[0];

  for (std::size_t l = 1; l <= upto; ++l) {
    const auto &L = m.layers[l - 1];
    const auto &in = e.post[l - 1];
    if (L.kind == LayerKind::flatten) {
      e.pre[l] = in;
    } else {
      for (std::size_t j = 0; j < L.output_size(); ++j)
        e.pre[l].push_back(e.lp.add_variable("pre" + std::to_string(l) + "_" + std::to_string(j)));
      if (L.kind == LayerKind::maxpool2d) {
        encode_maxpool(e, m, act, l);
      } else if (L.has_affine_form()) {
        for (std::size_t j = 0; j < L.output_size(); ++j) {
          std::vector<std::pair<std::size_t, double>> terms{{e.pre[l][j], 1.0}};
          L.for_each_term(j, [&](std::size_t i, double w) { terms.emplace_back(in[i], -w); });
          e.lp.add(std::move(terms), lp::Relation::eq, L.bias_at(j), lp::Tag::network);
        }
      } else {
        throw ArgumentError("encoding", "layer " + std::to_string(l) + ": unsupported kind " + to_string(L.kind));
      }
    }
    if (l == upto)
      break;
    if (L.activation == Activation::relu) {
      for (std::size_t j = 0; j < e.pre[l].size(); ++j)
        e.post[l].push_back(e.lp.add_variable("post" + std::to_string(l) + "_" + std::to_string(j)));
      detail::encode_relu(e, l, act, relu);
    } else if (L.activation == Activation::none) {
      e.post[l] = e.pre[l];
    } else {
      throw ArgumentError("encoding", "layer " + std::to_string(l) + ": cannot encode " +
                                          to_string(L.activation) + " below the target layer");
    }
  }
  return e;
}

namespace detail {

inline std::vector<std::pair<std::size_t, double>> feature_terms(const NetworkEncoding &e, const FeatureMap &fm,
                                                                 std::size_t component, double &constant) {
  if (fm.layer > e.upto)
    throw ArgumentError("encoding", "feature layer " + std::to_string(fm.layer) + " is above the encoded layers");
  const auto &vars = e.pre[fm.layer];
  if (vars.size() != fm.input_size())
    throw ShapeError("encoding", "feature map does not match layer " + std::to_string(fm.layer));
  if (component >= fm.components())
    throw ArgumentError("encoding", "no feature component " + std::to_string(component));
  const auto form = fm.component(component);
  std::vector<std::pair<std::size_t, double>> terms;
  for (std::size_t k = 0; k < vars.size(); ++k)
    if (form.coeffs[k] != 0.0)
      terms.emplace_back(vars[k], form.coeffs[k]);
  constant = form.constant;
  return terms;
}

} // namespace detail

/// lb <= lambda(n^) and lambda(n^) <= ub - delta_strict for interval k of
/// `part`; infinite ends are omitted. `margin` moves the closed lower end
/// inwards. Returns the number of constraints added.
inline std::size_t encode_target(NetworkEncoding &e, const FeatureMap &fm, std::size_t component,
                                 const Partition &part, std::size_t k, double margin = 0.0) {
  if (k >= part.interval_count())
    throw ArgumentError("encoding", "interval " + std::to_string(k) + " out of range");
  double c = 0;
  auto terms = detail::feature_terms(e, fm, component, c);
  if (terms.empty())
    throw NumericError("encoding", "feature component has no neuron coefficients");
  std::size_t added = 0;
  const double lo = part.lower(k), hi = part.upper(k);
  if (std::isfinite(lo)) {
    e.lp.add(terms, lp::Relation::ge, lo + margin - c, lp::Tag::target);
    ++added;
  }
  if (std::isfinite(hi)) {
    e.lp.add(terms, lp::Relation::le, hi - lp::delta_strict - c, lp::Tag::target);
    ++added;
  }
  return added;
}

/// Pins every component other than `excluded` to the value x induces.
inline std::size_t encode_replication(NetworkEncoding &e, const FeatureMap &fm, std::size_t excluded,
                                      const Activations &act) {
  const auto values = project(fm, act[fm.layer].pre);
  std::size_t added = 0;
  for (std::size_t j = 0; j < fm.components(); ++j) {
    if (j == excluded)
      continue;
    double c = 0;
    auto terms = detail::feature_terms(e, fm, j, c);
    if (terms.empty())
      continue;
    e.lp.add(std::move(terms), lp::Relation::eq, values[j] - c, lp::Tag::replication);
    ++added;
  }
  return added;
}

/// Adds d >= 0 with -d <= x'_k - x_k <= d for every input k and makes d
/// the sole objective.
inline std::size_t add_linf_objective(NetworkEncoding &e) {
  std::fill(e.lp.objective.begin(), e.lp.objective.end(), 0.0);
  const auto d = e.lp.add_variable("d", 0.0, lp::inf, 1.0);
  e.distance = d;
  for (std::size_t k = 0; k < e.seed.size(); ++k) {
    const auto v = e.pre[0][k];
    e.lp.add({{v, 1.0}, {d, -1.0}}, lp::Relation::le, e.seed[k], lp::Tag::objective_link);
    e.lp.add({{v, 1.0}, {d, 1.0}}, lp::Relation::ge, e.seed[k], lp::Tag::objective_link);
  }
  return d;
}

/// ReLU phases (layers below `upto`) and maxpool selections (layers up to
/// `upto`) of `b` that differ from those encoded from `a`.
inline std::size_t phase_mismatches(const Model &m, const Activations &a, const Activations &b, std::size_t upto) {
  std::size_t bad = 0;
  for (std::size_t l = 1; l <= upto; ++l) {
    const auto &L = m.layers[l - 1];
    if (L.kind == LayerKind::maxpool2d) {
      const auto sa = maxpool_selection_matrix(m, l, a);
      const auto &in = b[l - 1].post;
      for (std::size_t j = 0; j < sa.rows; ++j) {
        double best = -INFINITY;
        for (auto k : sa.windows[j])
          best = std::max(best, in[k]);
        bool ok = false;
        for (auto k : sa.selected[j])
          ok = ok || in[k] == best;
        bad += !ok;
      }
    }
    if (l < upto && L.activation == Activation::relu)
      for (std::size_t j = 0; j < a[l].pre.size(); ++j)
        bad += (a[l].pre[j] >= 0) != (b[l].pre[j] >= 0);
  }
  return bad;
}

} // namespace featcov
