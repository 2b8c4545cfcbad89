#pragma once

// Coverage metrics over a fitted network: feature coverage (share of
// intervals whose marginal reaches epsilon), feature-dependence coverage
// (share of exercised child-interval / parent-combination pairs) and their
// product. Ratios are computed in exact rational arithmetic so that the
// "coverage equals 1" criteria are exact comparisons.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "featcov/binary_io.hpp"
#include "featcov/bn.hpp"
#include "featcov/error.hpp"

namespace featcov {

using Rational = boost::multiprecision::cpp_rational;

/// Exact rational value of a double.
inline Rational to_rational(double v) {
  if (!std::isfinite(v))
    throw ArgumentError("coverage", "non-finite value");
  int exp = 0;
  double mant = std::frexp(v, &exp);
  // scale the 53-bit mantissa to an integer
  auto m = static_cast<long long>(std::ldexp(mant, 53));
  exp -= 53;
  Rational r(m);
  boost::multiprecision::cpp_int p2 = 1;
  if (exp >= 0) {
    p2 <<= exp;
    return r * Rational(p2);
  }
  p2 <<= -exp;
  return r / Rational(p2);
}

inline double to_double(const Rational &r) { return r.convert_to<double>(); }

enum class CriterionKind { feature, feature_dependence };

inline const char *to_string(CriterionKind k) {
  return k == CriterionKind::feature ? "feature" : "feature_dependence";
}

/// An interval (feature) or an interval under one parent combination
/// (feature dependence) whose probability is below epsilon.
struct CoverageTarget {
  CriterionKind kind = CriterionKind::feature;
  std::size_t node = 0;
  std::size_t interval = 0;
  /// Parent-combination index (feature_dependence only).
  std::optional<std::size_t> parent;
  Rational probability;

  bool operator==(const CoverageTarget &o) const {
    return kind == o.kind && node == o.node && interval == o.interval && parent == o.parent;
  }
};

struct NodeCoverage {
  std::size_t node = 0;
  CriterionKind kind = CriterionKind::feature;
  std::size_t covered = 0;
  std::size_t total = 0;
};

struct CoverageReport {
  double epsilon = 0;
  Rational bfcov;
  Rational bfdcov;
  Rational bfxcov;
  std::vector<NodeCoverage> nodes;
};

namespace detail {

inline Rational checked_epsilon(double eps) {
  if (!(eps > 0) || !(eps < 1))
    throw ArgumentError("coverage", "epsilon must lie in (0, 1)");
  return to_rational(eps);
}

inline void refuse_smoothing(const ProbabilityTables &t) {
  if (t.smoothing != 0.0)
    throw ArgumentError("coverage", "coverage is undefined on smoothed tables");
}

inline Rational conditional(const NodeTable &nt, std::size_t row, std::size_t k) {
  return nt.row_counts[row] ? Rational(nt.count(row, k)) / Rational(nt.row_counts[row]) : Rational(0);
}

} // namespace detail

/// Full report; marginals are computed once and shared by both metrics.
inline CoverageReport coverage_report(const BNStructure &s, const ProbabilityTables &t, double epsilon) {
  detail::refuse_smoothing(t);
  const Rational eps = detail::checked_epsilon(epsilon);
  const auto mp = marginals<Rational>(s, t);
  CoverageReport rep;
  rep.epsilon = epsilon;

  Rational sum_f = 0;
  for (std::size_t id = 0; id < s.node_count(); ++id) {
    NodeCoverage nc{id, CriterionKind::feature, 0, s.nodes[id].intervals()};
    for (const auto &p : mp[id])
      if (p >= eps)
        ++nc.covered;
    sum_f += Rational(nc.covered) / Rational(nc.total);
    rep.nodes.push_back(nc);
  }
  rep.bfcov = sum_f / Rational(s.node_count());

  Rational sum_d = 0;
  std::size_t vplus = 0;
  for (std::size_t id = 0; id < s.node_count(); ++id) {
    if (s.nodes[id].layer_pos == 0)
      continue;
    ++vplus;
    const auto &nt = t.nodes[id];
    NodeCoverage nc{id, CriterionKind::feature_dependence, 0, nt.rows * nt.intervals};
    for (std::size_t k = 0; k < nt.intervals; ++k) {
      if (mp[id][k] < eps) {
        nc.covered += nt.rows;
        continue;
      }
      for (std::size_t r = 0; r < nt.rows; ++r)
        if (detail::conditional(nt, r, k) >= eps)
          ++nc.covered;
    }
    sum_d += Rational(nc.covered) / Rational(nc.total);
    rep.nodes.push_back(nc);
  }
  if (vplus == 0)
    throw ArgumentError("coverage", "feature-dependence coverage needs at least 2 analysed layers");
  rep.bfdcov = sum_d / Rational(vplus);
  rep.bfxcov = rep.bfcov * rep.bfdcov;
  return rep;
}

inline Rational bfcov(const BNStructure &s, const ProbabilityTables &t, double epsilon) {
  return coverage_report(s, t, epsilon).bfcov;
}

inline Rational bfdcov(const BNStructure &s, const ProbabilityTables &t, double epsilon) {
  return coverage_report(s, t, epsilon).bfdcov;
}

inline Rational bfxcov(const BNStructure &s, const ProbabilityTables &t, double epsilon) {
  return coverage_report(s, t, epsilon).bfxcov;
}

inline bool criterion_satisfied(const CoverageReport &rep, CriterionKind which) {
  return (which == CriterionKind::feature ? rep.bfcov : rep.bfdcov) == Rational(1);
}

inline bool criterion_satisfied(const BNStructure &s, const ProbabilityTables &t, double epsilon,
                                CriterionKind which) {
  return criterion_satisfied(coverage_report(s, t, epsilon), which);
}

/// Every interval with marginal < epsilon, and every (interval, parent
/// combination) with conditional < epsilon whose interval has marginal >=
/// epsilon. Ordered by probability, then node, interval and parent.
inline std::vector<CoverageTarget> uncovered_targets(const BNStructure &s, const ProbabilityTables &t,
                                                     double epsilon) {
  detail::refuse_smoothing(t);
  const Rational eps = detail::checked_epsilon(epsilon);
  const auto mp = marginals<Rational>(s, t);
  std::vector<CoverageTarget> out;
  for (std::size_t id = 0; id < s.node_count(); ++id) {
    const auto &nt = t.nodes[id];
    for (std::size_t k = 0; k < nt.intervals; ++k) {
      if (mp[id][k] < eps) {
        out.push_back({CriterionKind::feature, id, k, std::nullopt, mp[id][k]});
        continue;
      }
      if (s.nodes[id].layer_pos == 0)
        continue;
      for (std::size_t r = 0; r < nt.rows; ++r) {
        auto cp = detail::conditional(nt, r, k);
        if (cp < eps)
          out.push_back({CriterionKind::feature_dependence, id, k, r, cp});
      }
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const CoverageTarget &a, const CoverageTarget &b) {
    if (a.probability != b.probability)
      return a.probability < b.probability;
    if (a.node != b.node)
      return a.node < b.node;
    if (a.interval != b.interval)
      return a.interval < b.interval;
    return a.parent.value_or(0) < b.parent.value_or(0);
  });
  return out;
}

/// CSV with columns node,kind,covered,total,ratio (one row per node and
/// metric), followed by the three aggregate rows.
inline void write_coverage_csv(std::ostream &os, const BNStructure &s, const CoverageReport &rep) {
  os << "node,kind,covered,total,ratio\n";
  for (const auto &n : rep.nodes)
    os << s.node_name(n.node) << ',' << to_string(n.kind) << ',' << n.covered << ',' << n.total << ','
       << io::format_real(static_cast<double>(n.covered) / static_cast<double>(n.total)) << '\n';
  os << "all,bfcov,,," << io::format_real(to_double(rep.bfcov)) << '\n';
  os << "all,bfdcov,,," << io::format_real(to_double(rep.bfdcov)) << '\n';
  os << "all,bfxcov,,," << io::format_real(to_double(rep.bfxcov)) << '\n';
}

} // namespace featcov
