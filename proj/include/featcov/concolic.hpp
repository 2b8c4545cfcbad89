#pragma once

// Coverage-guided concolic test generation: pick an uncovered target,
// pick a nearby candidate input, solve an LP for a close input eliciting
// the target, filter it through the oracle and grow the test set.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "featcov/abstraction.hpp"
#include "featcov/coverage.hpp"
#include "featcov/encoding.hpp"
#include "featcov/lp.hpp"

namespace featcov {

struct TestTarget {
  CriterionKind kind = CriterionKind::feature;
  std::size_t node = 0;
  std::size_t layer_pos = 0;
  std::size_t component = 0;
  std::size_t interval = 0;
  std::optional<std::size_t> parent; ///< parent-combination index
  double probability = 0;

  auto key() const {
    return std::make_tuple(static_cast<int>(kind), node, interval, parent.value_or(static_cast<std::size_t>(-1)));
  }
};

enum class CandidateHeuristic { closeness, random, label_stratified };

inline CandidateHeuristic parse_heuristic(const std::string &s) {
  if (s == "closeness")
    return CandidateHeuristic::closeness;
  if (s == "random")
    return CandidateHeuristic::random;
  if (s == "label-stratified" || s == "label_stratified")
    return CandidateHeuristic::label_stratified;
  throw ArgumentError("concolic", "unknown candidate heuristic '" + s + "'");
}

struct ConcolicConfig {
  CriterionKind criterion = CriterionKind::feature;
  double epsilon = 1e-3;
  std::size_t max_iterations = 100;
  double oracle_linf = 0.3;
  bool improvement_filter = true;
  bool replication = false;
  /// Clip solver output into the input domain before the oracle check
  /// instead of rejecting it.
  bool clip = false;
  ReluEncoding relu = ReluEncoding::phase_fixed;
  /// Inward shift of closed lower target bounds, so that solutions on the
  /// boundary still elicit the interval after a forward pass.
  double target_margin = 1e-9;
  CandidateHeuristic heuristic = CandidateHeuristic::closeness;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> dump_lp_dir;
};

/// Plausibility filter: x' within the input domain and within `bound` of x
/// in L-infinity distance.
inline bool oracle(const Model &m, std::span<const double> x, std::span<const double> x_prime, double bound) {
  if (x.size() != x_prime.size() || !m.within_domain(x_prime))
    return false;
  for (std::size_t k = 0; k < x.size(); ++k)
    if (!(std::abs(x[k] - x_prime[k]) <= bound))
      return false;
  return true;
}

inline double linf_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0;
  for (std::size_t k = 0; k < a.size(); ++k)
    d = std::max(d, std::abs(a[k] - b[k]));
  return d;
}

/// Distance of a feature value to a target interval: 0 inside, otherwise
/// the distance to the nearest finite bound.
inline double distance_to_interval(const Partition &p, std::size_t k, double v) {
  const double lo = p.lower(k), hi = p.upper(k);
  if (lo <= v && v < hi)
    return 0.0;
  double d = std::numeric_limits<double>::infinity();
  if (std::isfinite(lo))
    d = std::min(d, std::abs(v - lo));
  if (std::isfinite(hi))
    d = std::min(d, std::abs(v - hi));
  return d;
}

/// Candidate ranking score: distance to the nearest finite bound,
/// whether or not v is inside the interval.
inline double distance_to_bounds(const Partition &p, std::size_t k, double v) {
  double d = std::numeric_limits<double>::infinity();
  if (std::isfinite(p.lower(k)))
    d = std::min(d, std::abs(v - p.lower(k)));
  if (std::isfinite(p.upper(k)))
    d = std::min(d, std::abs(v - p.upper(k)));
  return d;
}

/// Progress measure of a target: the targeted component's distance to its
/// interval, plus for dependence targets the distances of the parent-layer
/// components to the targeted parent combination.
inline double target_distance(const BNAbstraction &bn, const TestTarget &t,
                              const std::vector<std::vector<double>> &feats) {
  double d = distance_to_interval(bn.structure.nodes[t.node].partition, t.interval, feats[t.layer_pos][t.component]);
  if (t.parent) {
    const auto combo = bn.structure.decode(t.layer_pos - 1, *t.parent);
    const auto parts = bn.partitions(t.layer_pos - 1);
    for (std::size_t j = 0; j < parts.size(); ++j)
      d += distance_to_interval(parts[j], combo[j], feats[t.layer_pos - 1][j]);
  }
  return d;
}

struct AdversarialRecord {
  std::size_t source = 0;    ///< test-set index of x
  std::size_t generated = 0; ///< test-set index of x'
  std::size_t source_label = 0;
  std::size_t new_label = 0;
  double linf = 0;
};

struct IterationRecord {
  std::size_t iteration = 0;
  TestTarget target;
  std::size_t candidate = 0;
  lp::Status status = lp::Status::infeasible;
  double lp_objective = std::numeric_limits<double>::quiet_NaN();
  bool oracle_pass = false;
  bool retained = false;
  bool adversarial = false;
  double linf = std::numeric_limits<double>::quiet_NaN();
  double d_before = std::numeric_limits<double>::quiet_NaN();
  double d_after = std::numeric_limits<double>::quiet_NaN();
  double delta = std::numeric_limits<double>::quiet_NaN();
  std::size_t parent_mismatches = 0;
  std::size_t phase_mismatches = 0;
  double bfcov = 0;
  double bfdcov = 0;
};

struct GenerationState {
  Dataset tests;                 ///< X_i; labels are those of the source seed
  std::vector<std::size_t> ok;   ///< Xok_i as indices into tests
  std::size_t seed_count = 0;    ///< leading entries of tests that form X_0
  std::vector<std::size_t> predicted;
  std::vector<std::vector<std::vector<double>>> features; ///< per test, per analysed layer
  BNAbstraction bn;
  std::set<std::tuple<std::tuple<int, std::size_t, std::size_t, std::size_t>, std::size_t>> attempted;
  std::vector<AdversarialRecord> adversarials;
  std::size_t iteration = 0;
};

enum class StopReason { satisfied, exhausted, iteration_cap };

inline const char *to_string(StopReason r) {
  switch (r) {
  case StopReason::satisfied: return "criterion_satisfied";
  case StopReason::exhausted: return "targets_exhausted";
  case StopReason::iteration_cap: return "iteration_cap";
  }
  return "?";
}

struct ConcolicResult {
  GenerationState state;
  std::vector<IterationRecord> log;
  std::vector<double> coverage_series; ///< active criterion, before the first and after every iteration
  std::size_t rejected_seeds = 0;
  StopReason stop = StopReason::iteration_cap;
  CoverageReport final_coverage;
};

/// Initial state: X_0 = the correctly classified seeds; the abstraction's
/// feature maps and partitions are kept and its tables refitted on X_0.
inline GenerationState initial_state(const Model &m, const BNAbstraction &bn, const Dataset &seeds,
                                     std::size_t *rejected = nullptr) {
  validate(seeds, m);
  if (!seeds.has_labels())
    throw ArgumentError("concolic", "seed set needs labels");
  GenerationState st;
  st.bn = bn;
  st.tests.shape = seeds.shape;
  std::size_t bad = 0;
  std::vector<IntervalTrace> traces;
  for (std::size_t n = 0; n < seeds.size(); ++n) {
    const auto act = forward(m, seeds.inputs[n]);
    const auto label = label_of(m, act);
    if (label != seeds.labels[n]) {
      ++bad;
      continue;
    }
    st.ok.push_back(st.tests.size());
    st.tests.inputs.push_back(seeds.inputs[n]);
    st.tests.labels.push_back(seeds.labels[n]);
    st.predicted.push_back(label);
    st.features.push_back(features_of(bn, act));
    traces.push_back(trace_of_features(bn, st.features.back()));
  }
  if (st.tests.size() == 0)
    throw ArgumentError("concolic", "no correctly classified seed input");
  st.seed_count = st.tests.size();
  st.bn.tables = fit_tables(bn.structure, traces);
  if (rejected)
    *rejected = bad;
  return st;
}

inline TestTarget make_target(const BNStructure &s, const CoverageTarget &t) {
  TestTarget out;
  out.kind = t.kind;
  out.node = t.node;
  out.layer_pos = s.nodes[t.node].layer_pos;
  out.component = s.nodes[t.node].component;
  out.interval = t.interval;
  out.parent = t.parent;
  out.probability = to_double(t.probability);
  return out;
}

/// Unmet targets of the active criterion in selection order.
inline std::vector<TestTarget> open_targets(const GenerationState &st, double epsilon, CriterionKind kind) {
  std::vector<TestTarget> out;
  for (const auto &t : uncovered_targets(st.bn.structure, st.bn.tables, epsilon))
    if (t.kind == kind)
      out.push_back(make_target(st.bn.structure, t));
  return out;
}

inline bool attempted(const GenerationState &st, const TestTarget &t, std::size_t candidate) {
  return st.attempted.count({t.key(), candidate}) > 0;
}

/// Best not-yet-attempted candidate from Xok for the target, or nothing
/// when every candidate has been tried.
inline std::optional<std::size_t> select_candidate(const GenerationState &st, const TestTarget &t,
                                                   const ConcolicConfig &cfg = {}) {
  const auto &part = st.bn.structure.nodes[t.node].partition;
  std::vector<std::size_t> pool;
  for (auto i : st.ok)
    if (!attempted(st, t, i))
      pool.push_back(i);
  if (pool.empty())
    return std::nullopt;

  if (cfg.heuristic == CandidateHeuristic::random) {
    std::mt19937_64 rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (st.iteration + 1)));
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    return pool[pick(rng)];
  }
  if (cfg.heuristic == CandidateHeuristic::label_stratified) {
    std::set<std::size_t> labels;
    for (auto i : pool)
      labels.insert(st.tests.labels[i]);
    auto it = labels.begin();
    std::advance(it, static_cast<long>(st.iteration % labels.size()));
    std::erase_if(pool, [&](std::size_t i) { return st.tests.labels[i] != *it; });
  }

  std::optional<Combination> parent_combo;
  if (t.parent)
    parent_combo = st.bn.structure.decode(t.layer_pos - 1, *t.parent);
  std::size_t best = pool[0];
  double best_d = std::numeric_limits<double>::infinity();
  bool best_parent = false;
  for (auto i : pool) {
    const double d = distance_to_bounds(part, t.interval, st.features[i][t.layer_pos][t.component]);
    bool elicits_parent = false;
    if (parent_combo) {
      const auto parts = st.bn.partitions(t.layer_pos - 1);
      elicits_parent = elicited_combination(parts, st.features[i][t.layer_pos - 1]) == *parent_combo;
    }
    if (d < best_d || (d == best_d && elicits_parent && !best_parent)) {
      best = i;
      best_d = d;
      best_parent = elicits_parent;
    }
  }
  return best;
}

/// Lowest-probability unmet target with an untried candidate, with that
/// candidate; nothing when the targets are exhausted.
inline std::optional<std::pair<TestTarget, std::size_t>> select_target(const GenerationState &st,
                                                                       const ConcolicConfig &cfg) {
  for (const auto &t : open_targets(st, cfg.epsilon, cfg.criterion))
    if (auto c = select_candidate(st, t, cfg))
      return std::make_pair(t, *c);
  return std::nullopt;
}

/// One generation step (LP build and solve, oracle, filter, state update).
inline IterationRecord attempt(GenerationState &st, const Model &m, const TestTarget &t, std::size_t candidate,
                               const ConcolicConfig &cfg) {
  IterationRecord rec;
  rec.iteration = st.iteration;
  rec.target = t;
  rec.candidate = candidate;
  st.attempted.insert({t.key(), candidate});

  const auto &bn = st.bn;
  const auto &x = st.tests.inputs[candidate];
  const auto act = forward(m, x);
  const auto &layer = bn.structure.layers[t.layer_pos];
  const auto &fm = bn.feature_maps[t.layer_pos];
  const auto &part = bn.structure.nodes[t.node].partition;

  auto enc = encode_network(m, x, layer.model_layer, cfg.relu);
  encode_target(enc, fm, t.component, part, t.interval, cfg.target_margin);
  std::optional<Combination> parent_combo;
  if (t.parent) {
    parent_combo = bn.structure.decode(t.layer_pos - 1, *t.parent);
    const auto parts = bn.partitions(t.layer_pos - 1);
    for (std::size_t j = 0; j < parts.size(); ++j)
      encode_target(enc, bn.feature_maps[t.layer_pos - 1], j, parts[j], (*parent_combo)[j], cfg.target_margin);
  }
  if (cfg.replication)
    encode_replication(enc, fm, t.component, act);
  add_linf_objective(enc);
  const auto sol = lp::solve(enc.lp);
  if (cfg.dump_lp_dir) {
    std::filesystem::create_directories(*cfg.dump_lp_dir);
    std::ofstream os(*cfg.dump_lp_dir / ("iter_" + std::to_string(st.iteration) + ".lp"));
    lp::write_lp(os, enc.lp, "iteration " + std::to_string(st.iteration) + ", status " + to_string(sol.status));
  }
  rec.status = sol.status;
  rec.d_before = target_distance(bn, t, st.features[candidate]);
  if (sol.status != lp::Status::optimal) {
    ++st.iteration;
    return rec;
  }
  rec.lp_objective = sol.objective_value;

  std::vector<double> xp(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    double v = sol.assignment[enc.pre[0][k]];
    const auto r = m.domain_of(k);
    // solver round-off just outside the box
    if ((v < r.lo && v > r.lo - 1e-9) || cfg.clip)
      v = std::max(v, r.lo);
    if ((v > r.hi && v < r.hi + 1e-9) || cfg.clip)
      v = std::min(v, r.hi);
    xp[k] = v;
  }
  rec.linf = linf_distance(x, xp);
  rec.oracle_pass = oracle(m, x, xp, cfg.oracle_linf);

  const auto act_p = forward(m, xp);
  auto feats_p = features_of(bn, act_p);
  rec.d_after = target_distance(bn, t, feats_p);
  rec.delta = rec.d_before - rec.d_after;
  rec.phase_mismatches = phase_mismatches(m, act, act_p, layer.model_layer);
  if (parent_combo) {
    const auto got = elicited_combination(bn.partitions(t.layer_pos - 1), feats_p[t.layer_pos - 1]);
    for (std::size_t j = 0; j < got.size(); ++j)
      rec.parent_mismatches += got[j] != (*parent_combo)[j];
  }

  rec.retained = rec.oracle_pass && (!cfg.improvement_filter || rec.delta > 0);
  if (rec.retained) {
    const auto label = label_of(m, act_p);
    const auto idx = st.tests.size();
    st.tests.inputs.push_back(xp);
    st.tests.labels.push_back(st.tests.labels[candidate]);
    st.predicted.push_back(label);
    add_observation(st.bn.structure, st.bn.tables, trace_of_features(st.bn, feats_p));
    st.features.push_back(std::move(feats_p));
    if (label == st.predicted[candidate]) {
      st.ok.push_back(idx);
    } else {
      rec.adversarial = true;
      st.adversarials.push_back({candidate, idx, st.predicted[candidate], label, rec.linf});
    }
  }
  ++st.iteration;
  return rec;
}

inline double criterion_value(const CoverageReport &r, CriterionKind k) {
  return to_double(k == CriterionKind::feature ? r.bfcov : r.bfdcov);
}

/// The generation loop: runs until the criterion is satisfied, no
/// (target, candidate) pair is left, or the iteration cap is reached.
inline ConcolicResult run(const Model &m, const BNAbstraction &bn, const Dataset &seeds, const ConcolicConfig &cfg) {
  validate(m);
  check_abstraction(bn);
  if (seeds.size() == 0)
    throw ArgumentError("concolic", "seed set is empty");
  if (!(cfg.oracle_linf >= 0))
    throw ArgumentError("concolic", "oracle bound must be non-negative");
  ConcolicResult res;
  res.state = initial_state(m, bn, seeds, &res.rejected_seeds);
  auto &st = res.state;
  auto rep = coverage_report(st.bn.structure, st.bn.tables, cfg.epsilon);
  res.coverage_series.push_back(criterion_value(rep, cfg.criterion));
  for (;;) {
    if (criterion_satisfied(rep, cfg.criterion)) {
      res.stop = StopReason::satisfied;
      break;
    }
    if (st.iteration >= cfg.max_iterations) {
      res.stop = StopReason::iteration_cap;
      break;
    }
    auto pick = select_target(st, cfg);
    if (!pick) {
      res.stop = StopReason::exhausted;
      break;
    }
    auto rec = attempt(st, m, pick->first, pick->second, cfg);
    if (rec.retained)
      rep = coverage_report(st.bn.structure, st.bn.tables, cfg.epsilon);
    rec.bfcov = to_double(rep.bfcov);
    rec.bfdcov = to_double(rep.bfdcov);
    res.coverage_series.push_back(criterion_value(rep, cfg.criterion));
    res.log.push_back(rec);
  }
  res.final_coverage = rep;
  return res;
}

// --- reports ----------------------------------------------------------------------

inline void write_iteration_csv(std::ostream &os, const BNStructure &s, const std::vector<IterationRecord> &log) {
  os << "iteration,kind,node,interval,parent,target_probability,candidate,status,lp_objective,oracle,retained,"
        "adversarial,linf,d_before,d_after,delta,parent_mismatches,phase_mismatches,bfcov,bfdcov\n";
  for (const auto &r : log) {
    os << r.iteration << ',' << to_string(r.target.kind) << ',' << s.node_name(r.target.node) << ','
       << r.target.interval << ',' << (r.target.parent ? std::to_string(*r.target.parent) : std::string()) << ','
       << io::format_real(r.target.probability) << ',' << r.candidate << ',' << to_string(r.status) << ','
       << io::format_real(r.lp_objective) << ',' << r.oracle_pass << ',' << r.retained << ',' << r.adversarial << ','
       << io::format_real(r.linf) << ',' << io::format_real(r.d_before) << ',' << io::format_real(r.d_after) << ','
       << io::format_real(r.delta) << ',' << r.parent_mismatches << ',' << r.phase_mismatches << ','
       << io::format_real(r.bfcov) << ',' << io::format_real(r.bfdcov) << '\n';
  }
}

inline void write_adversarial_csv(std::ostream &os, const std::vector<AdversarialRecord> &adv) {
  os << "source,generated,label,new_label,linf\n";
  for (const auto &a : adv)
    os << a.source << ',' << a.generated << ',' << a.source_label << ',' << a.new_label << ','
       << io::format_real(a.linf) << '\n';
}

/// The inputs generated during the run (X_i without X_0).
inline Dataset generated_inputs(const GenerationState &st) {
  Dataset d;
  d.shape = st.tests.shape;
  for (std::size_t i = st.seed_count; i < st.tests.size(); ++i) {
    d.inputs.push_back(st.tests.inputs[i]);
    d.labels.push_back(st.tests.labels[i]);
  }
  return d;
}

} // namespace featcov
