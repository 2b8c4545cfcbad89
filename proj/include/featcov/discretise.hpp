#pragma once

// Partitions of a feature component's real line into right-open intervals.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "featcov/error.hpp"

namespace featcov {

enum class Strategy { uniform, quantile, kde };

inline const char *to_string(Strategy s) {
  switch (s) {
  case Strategy::uniform: return "uniform";
  case Strategy::quantile: return "quantile";
  case Strategy::kde: return "kde";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string &s) {
  if (s == "uniform")
    return Strategy::uniform;
  if (s == "quantile")
    return Strategy::quantile;
  if (s == "kde")
    return Strategy::kde;
  throw ArgumentError("discretise", "unknown strategy '" + s + "'");
}

/// Intervals (-inf, c_1), [c_1, c_2), ..., [c_{m-1}, +inf) given by strictly
/// increasing finite boundaries c_1 < ... < c_{m-1}. Interval indices are
/// 0-based throughout the library.
struct Partition {
  std::size_t layer = 0;
  std::size_t component = 0;
  std::vector<double> boundaries;
  Strategy strategy = Strategy::uniform;
  bool extended = false;
  /// Set when the strategy could not produce its nominal interval count
  /// (constant component, collapsed quantiles, density fallback).
  bool degenerate = false;
  std::string note;

  std::size_t interval_count() const { return boundaries.size() + 1; }

  double lower(std::size_t k) const {
    return k == 0 ? -std::numeric_limits<double>::infinity() : boundaries.at(k - 1);
  }
  double upper(std::size_t k) const {
    return k == boundaries.size() ? std::numeric_limits<double>::infinity() : boundaries.at(k);
  }
};

/// The unique k with lower(k) <= value < upper(k).
inline std::size_t interval_of(const Partition &p, double value) {
  return static_cast<std::size_t>(
      std::upper_bound(p.boundaries.begin(), p.boundaries.end(), value) - p.boundaries.begin());
}

/// Componentwise interval_of over one layer's feature values.
inline std::vector<std::size_t> elicited_combination(std::span<const Partition> parts,
                                                     std::span<const double> features) {
  if (parts.size() != features.size())
    throw ShapeError("discretise", std::to_string(features.size()) + " feature values for " +
                                       std::to_string(parts.size()) + " partitions");
  std::vector<std::size_t> out(parts.size());
  for (std::size_t j = 0; j < parts.size(); ++j)
    out[j] = interval_of(parts[j], features[j]);
  return out;
}

namespace detail {

inline void check_values(std::span<const double> values) {
  if (values.empty())
    throw ArgumentError("discretise", "no values to discretise");
  for (double v : values)
    if (!std::isfinite(v))
      throw ArgumentError("discretise", "non-finite value");
}

/// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(const std::vector<double> &s, double q) {
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, s.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return frac == 0.0 ? s[lo] : s[lo] + frac * (s[hi] - s[lo]);
}

/// Turns bin edges (min .. max inclusive) into a partition. Extended
/// partitions keep the outer edges as boundaries; plain ones let the end
/// bins absorb the open rays.
inline Partition from_edges(std::vector<double> edges, std::size_t k, Strategy s, bool extended) {
  edges.erase(std::unique(edges.begin(), edges.end(),
                          [](double a, double b) { return !(b > a); }),
              edges.end());
  Partition p;
  p.strategy = s;
  p.extended = extended;
  if (edges.size() == 1) {
    p.degenerate = true;
    p.note = "constant component";
  } else if (edges.size() < k + 1) {
    p.degenerate = true;
    p.note = "collapsed to " + std::to_string(edges.size() - 1) + " of " + std::to_string(k) + " bins";
  }
  if (extended)
    p.boundaries = std::move(edges);
  else if (edges.size() > 2)
    p.boundaries.assign(edges.begin() + 1, edges.end() - 1);
  return p;
}

} // namespace detail

/// k equal-width bins over [min, max]. Extended: k + 2 intervals, the two
/// open ends holding no training value (the exact maximum lands in
/// [max, +inf) under the right-open convention).
inline Partition discretise_kbins_uniform(std::span<const double> values, std::size_t k, bool extended) {
  detail::check_values(values);
  if (k == 0)
    throw ArgumentError("discretise", "bin count must be at least 1");
  auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<double> edges(k + 1);
  const double width = (hi - lo) / static_cast<double>(k);
  for (std::size_t i = 0; i <= k; ++i)
    edges[i] = lo + width * static_cast<double>(i);
  edges[k] = hi;
  return detail::from_edges(std::move(edges), k, Strategy::uniform, extended);
}

/// Bins holding similar numbers of values: edges at empirical quantiles
/// i/k (linear interpolation); duplicate edges are collapsed.
inline Partition discretise_kbins_quantile(std::span<const double> values, std::size_t k, bool extended) {
  detail::check_values(values);
  if (k == 0)
    throw ArgumentError("discretise", "bin count must be at least 1");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> edges(k + 1);
  for (std::size_t i = 0; i <= k; ++i)
    edges[i] = detail::quantile_sorted(sorted, static_cast<double>(i) / static_cast<double>(k));
  edges[0] = sorted.front();
  edges[k] = sorted.back();
  return detail::from_edges(std::move(edges), k, Strategy::quantile, extended);
}

struct DensityOptions {
  /// Absolute density threshold; defaults to `relative_dmin` of the peak.
  std::optional<double> dmin;
  double relative_dmin = 0.01;
  /// Gaussian kernel bandwidth; Silverman's rule of thumb when absent.
  std::optional<double> bandwidth;
  std::size_t grid_points = 512;
  /// A local minimum is prominent when both flanking maxima exceed it by
  /// this fraction of the peak density.
  double prominence = 0.10;
};

inline double silverman_bandwidth(std::span<const double> values) {
  const auto n = static_cast<double>(values.size());
  std::vector<double> s(values.begin(), values.end());
  std::sort(s.begin(), s.end());
  double mean = 0;
  for (double v : s)
    mean += v;
  mean /= n;
  double var = 0;
  for (double v : s)
    var += (v - mean) * (v - mean);
  const double sd = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  const double iqr = (detail::quantile_sorted(s, 0.75) - detail::quantile_sorted(s, 0.25)) / 1.34;
  double spread = std::min(sd, iqr);
  if (!(spread > 0))
    spread = std::max(sd, iqr);
  return 0.9 * spread * std::pow(n, -0.2);
}

/// Boundaries where a Gaussian KDE crosses `dmin`, plus prominent local
/// minima above `dmin`. Falls back to one extended uniform bin when the
/// density gives no boundary at all.
inline Partition discretise_density(std::span<const double> values, const DensityOptions &opt = {}) {
  detail::check_values(values);
  if (opt.bandwidth && !(*opt.bandwidth > 0))
    throw ArgumentError("discretise", "bandwidth must be positive");
  if (opt.dmin && !(*opt.dmin > 0))
    throw ArgumentError("discretise", "density threshold must be positive");
  if (opt.grid_points < 3)
    throw ArgumentError("discretise", "density grid needs at least 3 points");

  auto fallback = [&](const std::string &why) {
    auto p = discretise_kbins_uniform(values, 1, true);
    p.strategy = Strategy::kde;
    p.degenerate = true;
    p.note = why + "; fell back to 1-bin-uniform-extended";
    return p;
  };

  auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  const double bw = opt.bandwidth ? *opt.bandwidth : silverman_bandwidth(values);
  if (!(bw > 0) || lo == hi)
    return fallback("constant component");

  const std::size_t G = opt.grid_points;
  const double g0 = lo - 3 * bw, g1 = hi + 3 * bw;
  const double step = (g1 - g0) / static_cast<double>(G - 1);
  std::vector<double> grid(G), dens(G, 0.0);
  const double norm = 1.0 / (static_cast<double>(values.size()) * bw * std::sqrt(2 * M_PI));
  for (std::size_t a = 0; a < G; ++a) {
    grid[a] = g0 + step * static_cast<double>(a);
    double acc = 0;
    for (double v : values) {
      const double u = (grid[a] - v) / bw;
      acc += std::exp(-0.5 * u * u);
    }
    dens[a] = acc * norm;
  }
  const double peak = *std::max_element(dens.begin(), dens.end());
  const double dmin = opt.dmin ? *opt.dmin : opt.relative_dmin * peak;

  std::vector<double> bounds;
  for (std::size_t a = 0; a + 1 < G; ++a) {
    const bool in_a = dens[a] >= dmin, in_b = dens[a + 1] >= dmin;
    if (in_a != in_b)
      bounds.push_back(grid[a] + (dmin - dens[a]) / (dens[a + 1] - dens[a]) * step);
  }
  for (std::size_t a = 1; a + 1 < G; ++a) {
    if (!(dens[a] > dmin) || !(dens[a] < dens[a - 1]) || !(dens[a] <= dens[a + 1]))
      continue;
    double left = dens[a], right = dens[a];
    for (std::size_t b = a; b-- > 0 && dens[b] > dmin;)
      left = std::max(left, dens[b]);
    for (std::size_t b = a + 1; b < G && dens[b] > dmin; ++b)
      right = std::max(right, dens[b]);
    const double need = opt.prominence * peak;
    if (left - dens[a] >= need && right - dens[a] >= need)
      bounds.push_back(grid[a]);
  }
  if (bounds.empty())
    return fallback("density never crosses the threshold");
  std::sort(bounds.begin(), bounds.end());
  bounds.erase(std::unique(bounds.begin(), bounds.end()), bounds.end());
  Partition p;
  p.strategy = Strategy::kde;
  p.boundaries = std::move(bounds);
  return p;
}

/// Strategy selection as exposed on the command line.
struct DiscretisationConfig {
  Strategy strategy = Strategy::quantile;
  std::size_t bins = 3;
  bool extended = true;
  DensityOptions density;
};

inline Partition discretise(std::span<const double> values, const DiscretisationConfig &cfg) {
  switch (cfg.strategy) {
  case Strategy::uniform:
    return discretise_kbins_uniform(values, cfg.bins, cfg.extended);
  case Strategy::quantile:
    return discretise_kbins_quantile(values, cfg.bins, cfg.extended);
  case Strategy::kde:
    return discretise_density(values, cfg.density);
  }
  throw ArgumentError("discretise", "unknown strategy");
}

} // namespace featcov
