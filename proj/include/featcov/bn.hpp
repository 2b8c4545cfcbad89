#pragma once

// Layered discrete Bayesian network over discretised feature components.
//
// Nodes are feature components of the analysed layers. Every node of an
// analysed layer depends on every node of the previous analysed layer, so
// the network is a chain of "layer-joint" variables whose states are the
// interval combinations of a whole layer. All exact inference below runs
// over that chain.
//
// Tables are raw empirical frequencies. A conditional row whose parent
// combination was never observed holds zeros, so a combination never seen
// along some factor has joint probability 0.
//
// Because of those zero rows, the network can lose mass along the chain.
// Queries are therefore answered on the network truncated at the deepest
// layer they involve, normalised over the combinations it supports: layer
// marginals are conditioned on the support of the layers up to theirs, and
// posteriors on the evidence. When no mass is lost this is the ordinary
// Bayesian-network semantics.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "featcov/discretise.hpp"
#include "featcov/error.hpp"

namespace featcov {

struct BNNode {
  std::size_t layer_pos = 0; ///< position among analysed layers
  std::size_t component = 0;
  Partition partition;

  std::size_t intervals() const { return partition.interval_count(); }
};

struct BNLayer {
  std::size_t model_layer = 0; ///< Activations index of the analysed layer
  std::vector<std::size_t> nodes;
  std::size_t combos = 1;
};

/// Interval combination of one analysed layer.
using Combination = std::vector<std::size_t>;
/// Combinations elicited by one input, one per analysed layer.
using IntervalTrace = std::vector<Combination>;

struct BNStructure {
  std::vector<BNNode> nodes;
  std::vector<BNLayer> layers;

  std::size_t node_count() const { return nodes.size(); }

  std::vector<std::pair<std::size_t, std::size_t>> edges() const {
    std::vector<std::pair<std::size_t, std::size_t>> e;
    for (std::size_t i = 1; i < layers.size(); ++i)
      for (auto p : layers[i - 1].nodes)
        for (auto c : layers[i].nodes)
          e.emplace_back(p, c);
    return e;
  }

  /// Mixed-radix index of a layer combination; the first component is the
  /// most significant digit.
  std::size_t encode(std::size_t layer, std::span<const std::size_t> combo) const {
    const auto &L = layers.at(layer);
    if (combo.size() != L.nodes.size())
      throw ShapeError("bn", "layer " + std::to_string(layer) + ": combination has " +
                                 std::to_string(combo.size()) + " entries, expected " +
                                 std::to_string(L.nodes.size()));
    std::size_t idx = 0;
    for (std::size_t j = 0; j < combo.size(); ++j) {
      const auto m = nodes[L.nodes[j]].intervals();
      if (combo[j] >= m)
        throw ArgumentError("bn", "interval index " + std::to_string(combo[j]) + " out of range for " +
                                      node_name(L.nodes[j]));
      idx = idx * m + combo[j];
    }
    return idx;
  }

  Combination decode(std::size_t layer, std::size_t idx) const {
    const auto &L = layers.at(layer);
    Combination c(L.nodes.size());
    for (std::size_t j = L.nodes.size(); j-- > 0;) {
      const auto m = nodes[L.nodes[j]].intervals();
      c[j] = idx % m;
      idx /= m;
    }
    return c;
  }

  /// Position of node `id` within its layer.
  std::size_t slot(std::size_t id) const {
    const auto &L = layers.at(nodes.at(id).layer_pos);
    return static_cast<std::size_t>(std::find(L.nodes.begin(), L.nodes.end(), id) - L.nodes.begin());
  }

  std::string node_name(std::size_t id) const {
    const auto &n = nodes.at(id);
    return "L" + std::to_string(layers.at(n.layer_pos).model_layer) + ".f" + std::to_string(n.component);
  }

  /// Node id from its name ("L3.f1") or its numeric id.
  std::size_t find_node(const std::string &name) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (node_name(i) == name || std::to_string(i) == name)
        return i;
    throw ArgumentError("bn", "no node named '" + name + "'");
  }
};

/// Builds the layered structure from per-layer partitions (outer index:
/// analysed layer in network order; inner: feature component).
inline BNStructure build_structure(const std::vector<std::size_t> &model_layers,
                                   const std::vector<std::vector<Partition>> &partitions,
                                   std::size_t max_combos = 1u << 20) {
  if (model_layers.size() != partitions.size())
    throw ShapeError("bn", "partition list does not match analysed layers");
  if (model_layers.size() < 2)
    throw ArgumentError("bn", "need at least 2 analysed layers, got " + std::to_string(model_layers.size()));
  BNStructure s;
  for (std::size_t i = 0; i < model_layers.size(); ++i) {
    if (i && model_layers[i] <= model_layers[i - 1])
      throw ArgumentError("bn", "analysed layers must be strictly increasing");
    if (partitions[i].empty())
      throw ArgumentError("bn", "analysed layer " + std::to_string(model_layers[i]) + " has no components");
    BNLayer L;
    L.model_layer = model_layers[i];
    for (std::size_t j = 0; j < partitions[i].size(); ++j) {
      L.nodes.push_back(s.nodes.size());
      s.nodes.push_back({i, j, partitions[i][j]});
      L.combos *= partitions[i][j].interval_count();
      if (L.combos > max_combos)
        throw ArgumentError("bn", "layer " + std::to_string(model_layers[i]) +
                                      " has more than " + std::to_string(max_combos) +
                                      " interval combinations");
    }
    s.layers.push_back(std::move(L));
  }
  return s;
}

/// Count-backed probability table of one node. First-layer nodes have a
/// single row (the marginal); later nodes one row per parent combination.
struct NodeTable {
  std::size_t intervals = 0;
  std::size_t rows = 1;
  std::vector<std::uint64_t> counts;     // rows x intervals
  std::vector<std::uint64_t> row_counts; // rows
  std::vector<double> probs;             // rows x intervals

  bool observed(std::size_t row) const { return row_counts[row] > 0; }
  double prob(std::size_t row, std::size_t k) const { return probs[row * intervals + k]; }
  std::uint64_t count(std::size_t row, std::size_t k) const { return counts[row * intervals + k]; }

  void refresh_row(std::size_t row) {
    for (std::size_t k = 0; k < intervals; ++k)
      probs[row * intervals + k] =
          row_counts[row] ? static_cast<double>(count(row, k)) / static_cast<double>(row_counts[row]) : 0.0;
  }
};

struct ProbabilityTables {
  std::vector<NodeTable> nodes;
  std::uint64_t sample_count = 0;
  /// Additive smoothing applied to `probs` (inference-only; counts and the
  /// exact rational path are unaffected and coverage/monitors refuse it).
  double smoothing = 0.0;
};

inline ProbabilityTables empty_tables(const BNStructure &s) {
  ProbabilityTables t;
  for (const auto &n : s.nodes) {
    NodeTable nt;
    nt.intervals = n.intervals();
    nt.rows = n.layer_pos == 0 ? 1 : s.layers[n.layer_pos - 1].combos;
    nt.counts.assign(nt.rows * nt.intervals, 0);
    nt.row_counts.assign(nt.rows, 0);
    nt.probs.assign(nt.rows * nt.intervals, 0.0);
    t.nodes.push_back(std::move(nt));
  }
  return t;
}

inline void check_trace(const BNStructure &s, const IntervalTrace &tr) {
  if (tr.size() != s.layers.size())
    throw ShapeError("bn", "trace covers " + std::to_string(tr.size()) + " layers, network has " +
                               std::to_string(s.layers.size()));
  for (std::size_t i = 0; i < tr.size(); ++i)
    (void)s.encode(i, tr[i]);
}

/// Adds one input's elicited combinations to the counts and renormalises
/// the touched rows.
inline void add_observation(const BNStructure &s, ProbabilityTables &t, const IntervalTrace &tr) {
  check_trace(s, tr);
  if (t.smoothing != 0.0)
    throw ArgumentError("bn", "cannot update smoothed tables");
  ++t.sample_count;
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const std::size_t row = i == 0 ? 0 : s.encode(i - 1, tr[i - 1]);
    for (std::size_t j = 0; j < s.layers[i].nodes.size(); ++j) {
      auto &nt = t.nodes[s.layers[i].nodes[j]];
      ++nt.counts[row * nt.intervals + tr[i][j]];
      ++nt.row_counts[row];
      nt.refresh_row(row);
    }
  }
  // first-layer rows are normalised by the sample count, which every
  // observation changes
  for (auto id : s.layers[0].nodes)
    t.nodes[id].refresh_row(0);
}

inline ProbabilityTables fit_tables(const BNStructure &s, std::span<const IntervalTrace> traces) {
  if (traces.empty())
    throw ArgumentError("bn", "cannot fit tables on an empty dataset");
  auto t = empty_tables(s);
  for (const auto &tr : traces)
    add_observation(s, t, tr);
  return t;
}

/// Copy with additive smoothing (count + alpha) / (row + alpha * m) on every
/// row, observed or not. For exploratory inference only.
inline ProbabilityTables smoothed(const ProbabilityTables &t, double alpha) {
  if (!(alpha > 0))
    throw ArgumentError("bn", "smoothing constant must be positive");
  auto out = t;
  out.smoothing = alpha;
  for (auto &nt : out.nodes)
    for (std::size_t r = 0; r < nt.rows; ++r)
      for (std::size_t k = 0; k < nt.intervals; ++k)
        nt.probs[r * nt.intervals + k] = (static_cast<double>(nt.count(r, k)) + alpha) /
                                         (static_cast<double>(nt.row_counts[r]) + alpha * static_cast<double>(nt.intervals));
  return out;
}

/// Product of every node's table entry along the trace.
inline double joint_probability(const BNStructure &s, const ProbabilityTables &t, const IntervalTrace &tr) {
  check_trace(s, tr);
  double p = 1.0;
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const std::size_t row = i == 0 ? 0 : s.encode(i - 1, tr[i - 1]);
    for (std::size_t j = 0; j < s.layers[i].nodes.size(); ++j)
      p *= t.nodes[s.layers[i].nodes[j]].prob(row, tr[i][j]);
  }
  return p;
}

// --- exact chain inference ---------------------------------------------------

/// Fixes node -> interval.
using Evidence = std::vector<std::pair<std::size_t, std::size_t>>;

namespace detail {

/// Table entry as scalar S: doubles read `probs` (so smoothing applies),
/// other scalar types are built exactly from the counts.
template <class S> S entry(const NodeTable &nt, std::size_t row, std::size_t k) {
  if constexpr (std::is_same_v<S, double>) {
    return nt.prob(row, k);
  } else {
    if (nt.row_counts[row] == 0)
      return S(0);
    return S(nt.count(row, k)) / S(nt.row_counts[row]);
  }
}

template <class S> bool is_zero(const S &v) { return v == S(0); }

/// Per node of a layer, the intervals allowed by the evidence (all when the
/// node is not fixed).
inline std::vector<std::vector<std::size_t>> allowed(const BNStructure &s, std::size_t layer,
                                                     const std::vector<long> &fixed) {
  std::vector<std::vector<std::size_t>> out;
  for (auto id : s.layers[layer].nodes) {
    std::vector<std::size_t> ks;
    if (fixed[id] >= 0)
      ks.push_back(static_cast<std::size_t>(fixed[id]));
    else
      for (std::size_t k = 0; k < s.nodes[id].intervals(); ++k)
        ks.push_back(k);
    out.push_back(std::move(ks));
  }
  return out;
}

/// Calls fn(combo_index, product) for every combination of layer `layer`
/// with a non-zero product of per-node factors (row `row` of each node's
/// table), restricted to the allowed intervals.
template <class S, class Fn>
void for_each_child(const BNStructure &s, const ProbabilityTables &t, std::size_t layer, std::size_t row,
                    const std::vector<std::vector<std::size_t>> &allow, Fn &&fn) {
  const auto &L = s.layers[layer];
  const std::size_t n = L.nodes.size();
  std::vector<std::vector<std::pair<std::size_t, S>>> choices(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto &nt = t.nodes[L.nodes[j]];
    for (auto k : allow[j]) {
      S p = entry<S>(nt, row, k);
      if (!is_zero(p))
        choices[j].emplace_back(k, std::move(p));
    }
    if (choices[j].empty())
      return;
  }
  std::vector<std::size_t> pos(n, 0);
  for (;;) {
    S prod(1);
    std::size_t idx = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const auto &[k, p] = choices[j][pos[j]];
      prod *= p;
      idx = idx * s.nodes[L.nodes[j]].intervals() + k;
    }
    fn(idx, prod);
    std::size_t j = n;
    while (j-- > 0) {
      if (++pos[j] < choices[j].size())
        break;
      pos[j] = 0;
    }
    if (j == static_cast<std::size_t>(-1))
      return;
  }
}

template <class S> bool row_active(const ProbabilityTables &t, const NodeTable &nt, std::size_t row) {
  if constexpr (std::is_same_v<S, double>)
    return t.smoothing > 0 || nt.observed(row);
  else
    return nt.observed(row);
}

template <class S>
std::vector<S> first_layer(const BNStructure &s, const ProbabilityTables &t, const std::vector<long> &fixed) {
  std::vector<S> alpha(s.layers[0].combos, S(0));
  for_each_child<S>(s, t, 0, 0, allowed(s, 0, fixed), [&](std::size_t c, const S &p) { alpha[c] = p; });
  return alpha;
}

/// alpha_i(c) = sum_p alpha_{i-1}(p) prod_j CP_j(c_j | p), evidence-masked.
template <class S>
std::vector<S> propagate(const BNStructure &s, const ProbabilityTables &t, std::size_t layer,
                         const std::vector<S> &prev, const std::vector<long> &fixed) {
  std::vector<S> alpha(s.layers[layer].combos, S(0));
  const auto allow = allowed(s, layer, fixed);
  const auto &probe = t.nodes[s.layers[layer].nodes[0]];
  for (std::size_t p = 0; p < prev.size(); ++p) {
    if (is_zero(prev[p]) || !row_active<S>(t, probe, p))
      continue;
    for_each_child<S>(s, t, layer, p, allow, [&](std::size_t c, const S &q) { alpha[c] += prev[p] * q; });
  }
  return alpha;
}

/// beta_{i}(p) = sum_c prod_j CP_j(c_j | p) * beta_{i+1}(c), evidence-masked.
template <class S>
std::vector<S> pull_back(const BNStructure &s, const ProbabilityTables &t, std::size_t child_layer,
                         const std::vector<S> &next, const std::vector<long> &fixed) {
  std::vector<S> beta(s.layers[child_layer - 1].combos, S(0));
  const auto allow = allowed(s, child_layer, fixed);
  const auto &probe = t.nodes[s.layers[child_layer].nodes[0]];
  for (std::size_t p = 0; p < beta.size(); ++p) {
    if (!row_active<S>(t, probe, p))
      continue;
    for_each_child<S>(s, t, child_layer, p, allow, [&](std::size_t c, const S &q) {
      if (!is_zero(next[c]))
        beta[p] += q * next[c];
    });
  }
  return beta;
}

inline std::vector<long> fixings(const BNStructure &s, const Evidence &ev) {
  std::vector<long> fixed(s.node_count(), -1);
  for (auto [node, k] : ev) {
    if (node >= s.node_count())
      throw ArgumentError("bn", "evidence on unknown node " + std::to_string(node));
    if (k >= s.nodes[node].intervals())
      throw ArgumentError("bn", "evidence interval " + std::to_string(k) + " out of range for " +
                                    s.node_name(node));
    if (fixed[node] >= 0)
      throw ArgumentError("bn", "more than one fixing for " + s.node_name(node));
    fixed[node] = static_cast<long>(k);
  }
  return fixed;
}

template <class S>
std::vector<std::vector<S>> marginalise(const BNStructure &s, std::size_t layer, const std::vector<S> &joint,
                                        const S &z) {
  const auto &L = s.layers[layer];
  std::vector<std::vector<S>> out;
  for (auto id : L.nodes)
    out.emplace_back(s.nodes[id].intervals(), S(0));
  for (std::size_t c = 0; c < joint.size(); ++c) {
    if (is_zero(joint[c]))
      continue;
    auto combo = s.decode(layer, c);
    for (std::size_t j = 0; j < combo.size(); ++j)
      out[j][combo[j]] += joint[c];
  }
  if (!is_zero(z))
    for (auto &row : out)
      for (auto &v : row)
        v /= z;
  return out;
}

} // namespace detail

/// Distribution over the interval combinations of each analysed layer,
/// normalised over the combinations the network supports up to that layer.
template <class S = double>
std::vector<std::vector<S>> layer_distributions(const BNStructure &s, const ProbabilityTables &t) {
  const std::vector<long> none(s.node_count(), -1);
  std::vector<std::vector<S>> out;
  out.push_back(detail::first_layer<S>(s, t, none));
  for (std::size_t i = 1; i < s.layers.size(); ++i)
    out.push_back(detail::propagate<S>(s, t, i, out.back(), none));
  for (auto &d : out) {
    S z(0);
    for (const auto &v : d)
      z += v;
    if (!detail::is_zero(z))
      for (auto &v : d)
        v /= z;
  }
  return out;
}

/// Marginal probability of every interval of every node (outer index: node id).
template <class S = double> std::vector<std::vector<S>> marginals(const BNStructure &s, const ProbabilityTables &t) {
  auto dists = layer_distributions<S>(s, t);
  std::vector<std::vector<S>> out(s.node_count());
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    auto per = detail::marginalise<S>(s, i, dists[i], S(0));
    for (std::size_t j = 0; j < per.size(); ++j)
      out[s.layers[i].nodes[j]] = std::move(per[j]);
  }
  return out;
}

/// Posterior distribution of every node of analysed layer `layer` given
/// the evidence, on the network truncated at the deepest layer involved.
/// Throws NumericError when the evidence has probability zero.
template <class S = double>
std::vector<std::vector<S>> layer_posteriors(const BNStructure &s, const ProbabilityTables &t, const Evidence &ev,
                                             std::size_t layer) {
  if (layer >= s.layers.size())
    throw ArgumentError("bn", "no analysed layer " + std::to_string(layer));
  const auto fixed = detail::fixings(s, ev);
  std::size_t depth = layer;
  for (auto [node, k] : ev)
    depth = std::max(depth, s.nodes[node].layer_pos);

  auto alpha = detail::first_layer<S>(s, t, fixed);
  for (std::size_t i = 1; i <= layer; ++i)
    alpha = detail::propagate<S>(s, t, i, alpha, fixed);
  std::vector<S> beta(s.layers[depth].combos, S(1));
  for (std::size_t i = depth; i > layer; --i)
    beta = detail::pull_back<S>(s, t, i, beta, fixed);

  S z(0);
  for (std::size_t c = 0; c < alpha.size(); ++c) {
    alpha[c] *= beta[c];
    z += alpha[c];
  }
  if (detail::is_zero(z))
    throw NumericError("bn", "unsupported evidence: it has probability zero");
  return detail::marginalise<S>(s, layer, alpha, z);
}

struct MapResult {
  std::size_t interval = 0;
  double probability = 0.0;
};

/// Interval of `query` with the largest posterior probability given the
/// evidence (marginal-posterior MAP). Ties go to the lowest interval.
inline MapResult map_query(const BNStructure &s, const ProbabilityTables &t, const Evidence &ev, std::size_t query) {
  if (query >= s.node_count())
    throw ArgumentError("bn", "unknown query node " + std::to_string(query));
  const auto &n = s.nodes[query];
  auto post = layer_posteriors<double>(s, t, ev, n.layer_pos);
  const auto &row = post[s.slot(query)];
  MapResult r;
  for (std::size_t k = 0; k < row.size(); ++k)
    if (row[k] > row[r.interval])
      r.interval = k;
  r.probability = row[r.interval];
  return r;
}

/// Posterior tables of the first analysed layer's nodes given evidence on
/// later nodes (typically the output layer).
inline std::vector<std::vector<double>> evidential_update(const BNStructure &s, const ProbabilityTables &t,
                                                          const Evidence &ev) {
  return layer_posteriors<double>(s, t, ev, 0);
}

} // namespace featcov
