#pragma once

// Linear programmes and an embedded two-phase primal simplex (dense
// tableau). Problems are general: variables carry optional bounds and
// constraints may be <=, >= or =. Single-variable constraints are folded
// into bounds before solving.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "featcov/binary_io.hpp"
#include "featcov/error.hpp"

namespace featcov::lp {

inline constexpr double inf = std::numeric_limits<double>::infinity();
/// Slack realising strict inequalities (maxpool selection, right-open
/// interval ends).
inline constexpr double delta_strict = 1e-6;
inline constexpr double feasibility_tol = 1e-7;

enum class Relation { le, ge, eq };

enum class Tag { network, relu_phase, maxpool_phase, input_box, target, replication, objective_link };

inline const char *to_string(Tag t) {
  switch (t) {
  case Tag::network: return "network";
  case Tag::relu_phase: return "relu_phase";
  case Tag::maxpool_phase: return "maxpool_phase";
  case Tag::input_box: return "input_box";
  case Tag::target: return "target";
  case Tag::replication: return "replication";
  case Tag::objective_link: return "objective_link";
  }
  return "?";
}

struct LinearConstraint {
  std::vector<std::pair<std::size_t, double>> coefficients; ///< variable id -> coefficient
  Relation relation = Relation::le;
  double rhs = 0;
  Tag tag = Tag::network;

  double lhs(const std::vector<double> &x) const {
    double s = 0;
    for (auto [v, a] : coefficients)
      s += a * x[v];
    return s;
  }

  /// Amount by which `x` violates the constraint (0 when satisfied).
  double violation(const std::vector<double> &x) const {
    const double l = lhs(x);
    switch (relation) {
    case Relation::le: return std::max(0.0, l - rhs);
    case Relation::ge: return std::max(0.0, rhs - l);
    case Relation::eq: return std::abs(l - rhs);
    }
    return 0;
  }
};

class LPProblem {
public:
  std::vector<std::string> names;
  std::vector<double> lower, upper;
  std::vector<double> objective; ///< minimised
  std::vector<LinearConstraint> constraints;

  std::size_t variable_count() const { return names.size(); }

  std::size_t add_variable(std::string name, double lo = -inf, double hi = inf, double cost = 0) {
    if (std::isnan(lo) || std::isnan(hi) || !std::isfinite(cost))
      throw ArgumentError("lp", "bad bounds or cost for variable " + name);
    names.push_back(std::move(name));
    lower.push_back(lo);
    upper.push_back(hi);
    objective.push_back(cost);
    return names.size() - 1;
  }

  /// Adds a constraint; duplicate variable ids are merged and zero
  /// coefficients dropped.
  void add(LinearConstraint c) {
    std::sort(c.coefficients.begin(), c.coefficients.end());
    std::vector<std::pair<std::size_t, double>> merged;
    for (auto [v, a] : c.coefficients) {
      if (v >= names.size())
        throw ArgumentError("lp", "constraint refers to unknown variable " + std::to_string(v));
      if (!std::isfinite(a))
        throw ArgumentError("lp", "non-finite coefficient");
      if (!merged.empty() && merged.back().first == v)
        merged.back().second += a;
      else
        merged.emplace_back(v, a);
    }
    std::erase_if(merged, [](const auto &p) { return p.second == 0.0; });
    if (merged.empty())
      throw ArgumentError("lp", "constraint has no coefficients");
    if (!std::isfinite(c.rhs))
      throw ArgumentError("lp", "non-finite right-hand side");
    c.coefficients = std::move(merged);
    constraints.push_back(std::move(c));
  }

  void add(std::vector<std::pair<std::size_t, double>> coeffs, Relation rel, double rhs, Tag tag) {
    add(LinearConstraint{std::move(coeffs), rel, rhs, tag});
  }

  /// Largest violation of constraints and bounds by `x`.
  double max_violation(const std::vector<double> &x) const {
    double v = 0;
    for (const auto &c : constraints)
      v = std::max(v, c.violation(x));
    for (std::size_t j = 0; j < x.size(); ++j)
      v = std::max({v, lower[j] - x[j], x[j] - upper[j]});
    return v;
  }
};

enum class Status { optimal, infeasible, unbounded, iteration_limit };

inline const char *to_string(Status s) {
  switch (s) {
  case Status::optimal: return "optimal";
  case Status::infeasible: return "infeasible";
  case Status::unbounded: return "unbounded";
  case Status::iteration_limit: return "iteration_limit";
  }
  return "?";
}

struct LPSolution {
  Status status = Status::infeasible;
  std::vector<double> assignment;
  double objective_value = 0;
  std::size_t iterations = 0;
  double max_violation = 0;
};

struct SolverOptions {
  std::size_t iteration_limit = 100000;
  /// Consecutive degenerate pivots after which Bland's rule takes over
  /// until the next improving pivot.
  std::size_t degenerate_streak = 50;
  double pivot_tol = 1e-9;
  double cost_tol = 1e-9;
};

namespace detail {

enum class VarMap { shifted, flipped, split };

struct Mapping {
  VarMap kind = VarMap::split;
  double offset = 0;
  std::size_t col = 0;
};

class Tableau {
public:
  Tableau(std::size_t m, std::size_t n) : m_(m), n_(n), a_((m + 1) * (n + 1), 0.0), basis_(m, 0) {}

  double &at(std::size_t r, std::size_t c) { return a_[r * (n_ + 1) + c]; }
  double at(std::size_t r, std::size_t c) const { return a_[r * (n_ + 1) + c]; }
  double &rhs(std::size_t r) { return at(r, n_); }
  double &cost(std::size_t c) { return at(m_, c); }

  std::size_t rows() const { return m_; }
  std::size_t cols() const { return n_; }
  std::vector<std::size_t> &basis() { return basis_; }

  void pivot(std::size_t r, std::size_t c) {
    const double p = at(r, c);
    double *row = &a_[r * (n_ + 1)];
    for (std::size_t j = 0; j <= n_; ++j)
      row[j] /= p;
    row[c] = 1.0;
    for (std::size_t i = 0; i <= m_; ++i) {
      if (i == r)
        continue;
      double *other = &a_[i * (n_ + 1)];
      const double f = other[c];
      if (f == 0.0)
        continue;
      for (std::size_t j = 0; j <= n_; ++j)
        other[j] -= f * row[j];
      other[c] = 0.0;
    }
    basis_[r] = c;
  }

  /// Minimises the cost row over the allowed columns.
  Status optimise(const std::vector<bool> &allowed, const SolverOptions &opt, std::size_t &iterations) {
    std::size_t streak = 0;
    for (;;) {
      if (iterations >= opt.iteration_limit)
        return Status::iteration_limit;
      const bool bland = streak >= opt.degenerate_streak;
      std::size_t enter = n_;
      double best = -opt.cost_tol;
      for (std::size_t j = 0; j < n_; ++j) {
        if (!allowed[j])
          continue;
        const double z = at(m_, j);
        if (z < best) {
          enter = j;
          best = z;
          if (bland)
            break;
        }
      }
      if (enter == n_)
        return Status::optimal;
      std::size_t leave = m_;
      double ratio = inf;
      for (std::size_t i = 0; i < m_; ++i) {
        const double a = at(i, enter);
        if (a <= opt.pivot_tol)
          continue;
        const double q = std::max(0.0, at(i, n_)) / a;
        const double tie = 1e-12 * std::max(1.0, std::abs(ratio));
        if (leave == m_ || q < ratio - tie) {
          leave = i;
          ratio = q;
        } else if (q <= ratio + tie && basis_[i] < basis_[leave]) {
          leave = i;
          ratio = std::min(ratio, q);
        }
      }
      if (leave == m_)
        return Status::unbounded;
      streak = ratio <= 1e-12 ? streak + 1 : 0;
      pivot(leave, enter);
      ++iterations;
    }
  }

private:
  std::size_t m_, n_;
  std::vector<double> a_;
  std::vector<std::size_t> basis_;
};

} // namespace detail

/// Minimises the objective subject to the constraints and bounds.
inline LPSolution solve(const LPProblem &p, const SolverOptions &opt = {}) {
  const std::size_t nv = p.variable_count();
  LPSolution sol;

  // fold singleton constraints into bounds
  std::vector<double> lo = p.lower, hi = p.upper;
  std::vector<const LinearConstraint *> rows;
  for (const auto &c : p.constraints) {
    if (c.coefficients.size() != 1) {
      rows.push_back(&c);
      continue;
    }
    auto [v, a] = c.coefficients[0];
    const double b = c.rhs / a;
    Relation rel = c.relation;
    if (a < 0 && rel != Relation::eq)
      rel = rel == Relation::le ? Relation::ge : Relation::le;
    if (rel != Relation::ge)
      hi[v] = std::min(hi[v], b);
    if (rel != Relation::le)
      lo[v] = std::max(lo[v], b);
  }
  for (std::size_t j = 0; j < nv; ++j) {
    if (lo[j] > hi[j] + feasibility_tol)
      return sol;
    if (lo[j] > hi[j])
      lo[j] = hi[j] = 0.5 * (lo[j] + hi[j]);
  }

  // map every variable onto non-negative standard-form columns
  std::vector<detail::Mapping> map(nv);
  std::size_t ny = 0;
  std::vector<std::pair<std::size_t, double>> upper_rows; // column, bound
  for (std::size_t j = 0; j < nv; ++j) {
    auto &m = map[j];
    m.col = ny;
    if (std::isfinite(lo[j])) {
      m.kind = detail::VarMap::shifted;
      m.offset = lo[j];
      ny += 1;
      if (std::isfinite(hi[j]))
        upper_rows.emplace_back(m.col, hi[j] - lo[j]);
    } else if (std::isfinite(hi[j])) {
      m.kind = detail::VarMap::flipped;
      m.offset = hi[j];
      ny += 1;
    } else {
      m.kind = detail::VarMap::split;
      ny += 2;
    }
  }

  // standard-form rows: dense coefficients over the y columns
  struct Row {
    std::vector<std::pair<std::size_t, double>> coef;
    Relation rel;
    double rhs;
  };
  std::vector<Row> std_rows;
  for (const auto *c : rows) {
    Row r{{}, c->relation, c->rhs};
    for (auto [v, a] : c->coefficients) {
      const auto &m = map[v];
      switch (m.kind) {
      case detail::VarMap::shifted:
        r.coef.emplace_back(m.col, a);
        r.rhs -= a * m.offset;
        break;
      case detail::VarMap::flipped:
        r.coef.emplace_back(m.col, -a);
        r.rhs -= a * m.offset;
        break;
      case detail::VarMap::split:
        r.coef.emplace_back(m.col, a);
        r.coef.emplace_back(m.col + 1, -a);
        break;
      }
    }
    std_rows.push_back(std::move(r));
  }
  for (auto [col, b] : upper_rows)
    std_rows.push_back(Row{{{col, 1.0}}, Relation::le, b});
  for (auto &r : std_rows) {
    if (r.rhs < 0) {
      r.rhs = -r.rhs;
      for (auto &e : r.coef)
        e.second = -e.second;
      if (r.rel != Relation::eq)
        r.rel = r.rel == Relation::le ? Relation::ge : Relation::le;
    }
  }

  const std::size_t m = std_rows.size();
  std::size_t n_slack = 0, n_art = 0;
  for (const auto &r : std_rows) {
    n_slack += r.rel != Relation::eq;
    n_art += r.rel != Relation::le;
  }
  const std::size_t n = ny + n_slack + n_art;
  const std::size_t art0 = ny + n_slack;

  // objective over y columns (constant offsets dropped)
  std::vector<double> cy(ny, 0.0);
  for (std::size_t j = 0; j < nv; ++j) {
    const double c = p.objective[j];
    const auto &mp = map[j];
    switch (mp.kind) {
    case detail::VarMap::shifted: cy[mp.col] += c; break;
    case detail::VarMap::flipped: cy[mp.col] -= c; break;
    case detail::VarMap::split: cy[mp.col] += c; cy[mp.col + 1] -= c; break;
    }
  }

  detail::Tableau T(m, n);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  Eigen::VectorXd b(static_cast<Eigen::Index>(m));
  {
    std::size_t s = ny, a = art0;
    for (std::size_t i = 0; i < m; ++i) {
      const auto &r = std_rows[i];
      for (auto [col, v] : r.coef)
        A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(col)) += v;
      b(static_cast<Eigen::Index>(i)) = r.rhs;
      if (r.rel == Relation::le) {
        A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) = 1.0;
        T.basis()[i] = s++;
      } else {
        if (r.rel == Relation::ge)
          A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s++)) = -1.0;
        A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = 1.0;
        T.basis()[i] = a++;
      }
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      T.at(i, j) = A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    T.rhs(i) = b(static_cast<Eigen::Index>(i));
  }

  std::vector<bool> allowed(n, true);
  if (n_art > 0) {
    // phase 1: minimise the sum of artificials
    for (std::size_t j = 0; j <= n; ++j)
      T.cost(j) = j >= art0 && j < n ? 1.0 : 0.0;
    for (std::size_t i = 0; i < m; ++i)
      if (T.basis()[i] >= art0)
        for (std::size_t j = 0; j <= n; ++j)
          T.cost(j) -= T.at(i, j);
    const auto st = T.optimise(allowed, opt, sol.iterations);
    if (st == Status::iteration_limit) {
      sol.status = st;
      return sol;
    }
    if (-T.cost(n) > feasibility_tol)
      return sol;
    // drive remaining artificials out of the basis where possible
    for (std::size_t i = 0; i < m; ++i) {
      if (T.basis()[i] < art0)
        continue;
      std::size_t best = art0;
      double mag = opt.pivot_tol;
      for (std::size_t j = 0; j < art0; ++j)
        if (std::abs(T.at(i, j)) > mag) {
          mag = std::abs(T.at(i, j));
          best = j;
        }
      if (best < art0)
        T.pivot(i, best);
    }
    for (std::size_t j = art0; j < n; ++j)
      allowed[j] = false;
  }

  // phase 2
  for (std::size_t j = 0; j <= n; ++j)
    T.cost(j) = j < ny ? cy[j] : 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t bj = T.basis()[i];
    const double cb = bj < ny ? cy[bj] : 0.0;
    if (cb != 0.0)
      for (std::size_t j = 0; j <= n; ++j)
        T.cost(j) -= cb * T.at(i, j);
  }
  const auto st = T.optimise(allowed, opt, sol.iterations);
  if (st != Status::optimal) {
    sol.status = st;
    return sol;
  }

  // basic solution, refined by re-solving the basis system on the
  // original coefficients
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    y[T.basis()[i]] = std::max(0.0, T.rhs(i));
  if (m > 0) {
    Eigen::MatrixXd B(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    for (std::size_t i = 0; i < m; ++i)
      B.col(static_cast<Eigen::Index>(i)) = A.col(static_cast<Eigen::Index>(T.basis()[i]));
    Eigen::FullPivLU<Eigen::MatrixXd> lu(B);
    if (lu.isInvertible()) {
      Eigen::VectorXd yb = lu.solve(b);
      if (yb.allFinite() && (B * yb - b).cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, b.cwiseAbs().maxCoeff()))
        for (std::size_t i = 0; i < m; ++i)
          y[T.basis()[i]] = std::max(0.0, yb(static_cast<Eigen::Index>(i)));
    }
  }

  sol.assignment.assign(nv, 0.0);
  for (std::size_t j = 0; j < nv; ++j) {
    const auto &mp = map[j];
    switch (mp.kind) {
    case detail::VarMap::shifted: sol.assignment[j] = mp.offset + y[mp.col]; break;
    case detail::VarMap::flipped: sol.assignment[j] = mp.offset - y[mp.col]; break;
    case detail::VarMap::split: sol.assignment[j] = y[mp.col] - y[mp.col + 1]; break;
    }
  }
  sol.objective_value = 0;
  for (std::size_t j = 0; j < nv; ++j)
    sol.objective_value += p.objective[j] * sol.assignment[j];
  sol.max_violation = p.max_violation(sol.assignment);
  sol.status = Status::optimal;
  return sol;
}

// --- text dump ------------------------------------------------------------------

namespace detail {

inline std::string lp_name(const std::string &s) {
  std::string out;
  for (char ch : s)
    out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '.') ? ch : '_';
  if (out.empty() || std::isdigit(static_cast<unsigned char>(out[0])) || out[0] == '.')
    out = "v_" + out;
  return out;
}

inline void lp_terms(std::ostream &os, const std::vector<std::pair<std::size_t, double>> &terms,
                     const std::vector<std::string> &names) {
  for (auto [v, a] : terms)
    os << (a < 0 ? " - " : " + ") << io::format_real(std::abs(a)) << ' ' << lp_name(names[v]);
}

} // namespace detail

/// CPLEX-style LP text (Minimize / Subject To / Bounds / End).
inline void write_lp(std::ostream &os, const LPProblem &p, const std::string &comment = {}) {
  if (!comment.empty())
    os << "\\ " << comment << '\n';
  os << "Minimize\n obj:";
  std::vector<std::pair<std::size_t, double>> obj;
  for (std::size_t j = 0; j < p.variable_count(); ++j)
    if (p.objective[j] != 0.0)
      obj.emplace_back(j, p.objective[j]);
  if (obj.empty())
    os << " 0 " << detail::lp_name(p.names.empty() ? "x" : p.names[0]);
  detail::lp_terms(os, obj, p.names);
  os << "\nSubject To\n";
  for (std::size_t i = 0; i < p.constraints.size(); ++i) {
    const auto &c = p.constraints[i];
    os << ' ' << to_string(c.tag) << '_' << i << ':';
    detail::lp_terms(os, c.coefficients, p.names);
    os << (c.relation == Relation::le ? " <= " : c.relation == Relation::ge ? " >= " : " = ")
       << io::format_real(c.rhs) << '\n';
  }
  os << "Bounds\n";
  for (std::size_t j = 0; j < p.variable_count(); ++j) {
    const auto name = detail::lp_name(p.names[j]);
    const bool fl = std::isfinite(p.lower[j]), fh = std::isfinite(p.upper[j]);
    if (!fl && !fh)
      os << ' ' << name << " free\n";
    else if (fl && fh)
      os << ' ' << io::format_real(p.lower[j]) << " <= " << name << " <= " << io::format_real(p.upper[j]) << '\n';
    else if (fl)
      os << ' ' << name << " >= " << io::format_real(p.lower[j]) << '\n';
    else
      os << " -inf <= " << name << " <= " << io::format_real(p.upper[j]) << '\n';
  }
  os << "End\n";
}

} // namespace featcov::lp
