#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "featcov/featcov.hpp"
#include "oracles.hpp"
#include "synth.hpp"

using namespace featcov;
using lp::LPProblem;
using lp::Relation;
using lp::Status;
using lp::Tag;

namespace {

const std::filesystem::path fixtures = FEATCOV_FIXTURES;

double oracle_distance(const std::vector<double> &a, const std::vector<double> &b) {
  double d = 0;
  for (std::size_t k = 0; k < a.size(); ++k)
    d = std::max(d, std::abs(a[k] - b[k]));
  return d;
}

LPProblem random_lp(std::mt19937_64 &rng, bool anchored) {
  std::uniform_int_distribution<int> coef(-5, 5), nvar(1, 6), ncon(1, 10);
  LPProblem p;
  const int n = nvar(rng), m = ncon(rng);
  std::vector<double> x0;
  for (int j = 0; j < n; ++j) {
    const double lo = -static_cast<double>(rng() % 6), hi = static_cast<double>(rng() % 6);
    p.add_variable("v" + std::to_string(j), lo, hi, coef(rng));
    x0.push_back(std::round(lo + (hi - lo) * std::uniform_real_distribution<double>(0, 1)(rng)));
  }
  for (int i = 0; i < m; ++i) {
    std::vector<std::pair<std::size_t, double>> terms;
    double at = 0;
    for (int j = 0; j < n; ++j)
      if (int a = coef(rng); a != 0 && rng() % 2) {
        terms.emplace_back(j, a);
        at += a * x0[static_cast<std::size_t>(j)];
      }
    if (terms.empty())
      continue;
    const auto r = rng() % 6;
    const auto rel = r == 0 ? Relation::eq : r < 3 ? Relation::le : Relation::ge;
    double b = static_cast<double>(static_cast<int>(rng() % 21) - 10);
    if (anchored)
      b = rel == Relation::eq ? at : rel == Relation::le ? at + static_cast<double>(rng() % 3)
                                                         : at - static_cast<double>(rng() % 3);
    p.add(terms, rel, b, Tag::network);
  }
  return p;
}

} // namespace

// --- solver --------------------------------------------------------------------

TEST(Simplex, DistanceToAHalfLine) {
  // min d  s.t.  v >= 5, |v - 3| <= d
  LPProblem p;
  const auto v = p.add_variable("v", 0, 10);
  const auto d = p.add_variable("d", 0, lp::inf, 1);
  p.add({{v, 1}}, Relation::ge, 5, Tag::target);
  p.add({{v, 1}, {d, -1}}, Relation::le, 3, Tag::objective_link);
  p.add({{v, 1}, {d, 1}}, Relation::ge, 3, Tag::objective_link);
  auto s = lp::solve(p);
  ASSERT_EQ(s.status, Status::optimal);
  EXPECT_NEAR(s.assignment[v], 5, 1e-9);
  EXPECT_NEAR(s.assignment[d], 2, 1e-9);
  EXPECT_NEAR(s.objective_value, 2, 1e-9);
  EXPECT_LE(s.max_violation, 1e-9);
}

TEST(Simplex, Infeasible) {
  LPProblem p;
  const auto x = p.add_variable("x", 0, 1);
  const auto y = p.add_variable("y", 0, 1);
  p.add({{x, 1}, {y, 1}}, Relation::ge, 3, Tag::network);
  EXPECT_EQ(lp::solve(p).status, Status::infeasible);
}

TEST(Simplex, Unbounded) {
  LPProblem p;
  const auto x = p.add_variable("x", 0, lp::inf, -1);
  const auto y = p.add_variable("y", -lp::inf, lp::inf);
  p.add({{x, 1}, {y, -1}}, Relation::eq, 0, Tag::network);
  EXPECT_EQ(lp::solve(p).status, Status::unbounded);
}

TEST(Simplex, FreeAndFlippedVariables) {
  // min x - y  s.t.  x free, y <= 4, x + y = 1, x >= -2
  LPProblem p;
  const auto x = p.add_variable("x", -lp::inf, lp::inf, 1);
  const auto y = p.add_variable("y", -lp::inf, 4, -1);
  p.add({{x, 1}, {y, 1}}, Relation::eq, 1, Tag::network);
  p.add({{x, 1}}, Relation::ge, -2, Tag::network);
  auto s = lp::solve(p);
  ASSERT_EQ(s.status, Status::optimal);
  EXPECT_NEAR(s.assignment[x], -2, 1e-9);
  EXPECT_NEAR(s.assignment[y], 3, 1e-9);
  EXPECT_NEAR(s.objective_value, -5, 1e-9);
}

TEST(Simplex, BealeCyclingExampleTerminates) {
  LPProblem p;
  const auto x4 = p.add_variable("x4", 0, lp::inf, -0.75);
  const auto x5 = p.add_variable("x5", 0, lp::inf, 20);
  const auto x6 = p.add_variable("x6", 0, lp::inf, -0.5);
  const auto x7 = p.add_variable("x7", 0, lp::inf, 6);
  p.add({{x4, 0.25}, {x5, -8}, {x6, -1}, {x7, 9}}, Relation::le, 0, Tag::network);
  p.add({{x4, 0.5}, {x5, -12}, {x6, -0.5}, {x7, 3}}, Relation::le, 0, Tag::network);
  p.add({{x6, 1}}, Relation::le, 1, Tag::network);
  for (std::size_t streak : {50u, 1u}) {
    lp::SolverOptions opt;
    opt.degenerate_streak = streak;
    auto s = lp::solve(p, opt);
    ASSERT_EQ(s.status, Status::optimal);
    EXPECT_NEAR(s.objective_value, -1.25, 1e-9);
  }
}

TEST(Simplex, DegenerateVertex) {
  // many constraints through the optimum (0, 0)
  LPProblem p;
  const auto x = p.add_variable("x", 0, 5, 1);
  const auto y = p.add_variable("y", 0, 5, 1);
  for (int k = 1; k <= 6; ++k)
    p.add({{x, static_cast<double>(k)}, {y, 1}}, Relation::ge, 0, Tag::network);
  p.add({{x, 1}, {y, -1}}, Relation::eq, 0, Tag::network);
  auto s = lp::solve(p);
  ASSERT_EQ(s.status, Status::optimal);
  EXPECT_NEAR(s.objective_value, 0, 1e-12);
}

TEST(Simplex, IterationLimitIsReported) {
  std::mt19937_64 rng(1);
  auto p = random_lp(rng, true);
  while (p.constraints.size() < 4)
    p = random_lp(rng, true);
  lp::SolverOptions opt;
  opt.iteration_limit = 0;
  auto s = lp::solve(p, opt);
  EXPECT_TRUE(s.status == Status::iteration_limit || s.iterations == 0);
}

TEST(Simplex, MatchesVertexEnumeration) {
  std::mt19937_64 rng(77);
  std::size_t optimal = 0;
  for (int trial = 0; trial < 150; ++trial) {
    auto p = random_lp(rng, trial % 4 != 0);
    auto want = oracle::vertex_minimum(p);
    auto s = lp::solve(p);
    if (!want) {
      EXPECT_EQ(s.status, Status::infeasible) << "trial " << trial;
      continue;
    }
    ASSERT_EQ(s.status, Status::optimal) << "trial " << trial;
    ++optimal;
    EXPECT_NEAR(s.objective_value, want->objective, 1e-7) << "trial " << trial;
    EXPECT_LE(p.max_violation(s.assignment), 1e-7);
    EXPECT_NEAR(s.max_violation, p.max_violation(s.assignment), 1e-12);
  }
  EXPECT_GT(optimal, 80u);
}

TEST(LpProblem, MergesAndValidatesConstraints) {
  LPProblem p;
  const auto x = p.add_variable("x", 0, 1);
  p.add({{x, 1}, {x, 2}}, Relation::le, 3, Tag::network);
  ASSERT_EQ(p.constraints.back().coefficients.size(), 1u);
  EXPECT_EQ(p.constraints.back().coefficients[0].second, 3);
  EXPECT_THROW(p.add({{x, 1}, {x, -1}}, Relation::le, 0, Tag::network), ArgumentError);
  EXPECT_THROW(p.add({{5, 1}}, Relation::le, 0, Tag::network), ArgumentError);
  EXPECT_THROW(p.add({{x, 1}}, Relation::le, lp::inf, Tag::network), ArgumentError);
}

TEST(LpProblem, WritesCplexLpText) {
  LPProblem p;
  const auto x = p.add_variable("x", 0, 2, 1);
  const auto d = p.add_variable("d", 0, lp::inf, 0);
  p.add({{x, 1}, {d, -1}}, Relation::le, 0.5, Tag::objective_link);
  std::ostringstream os;
  lp::write_lp(os, p, "demo");
  const auto text = os.str();
  for (const char *section : {"Minimize", "Subject To", "Bounds", "End"})
    EXPECT_NE(text.find(section), std::string::npos) << section;
  EXPECT_NE(text.find("\\ demo"), std::string::npos);
  EXPECT_NE(text.find("<= 0.5"), std::string::npos);
}

// --- encoding ------------------------------------------------------------------

TEST(Encoding, SeedIsFeasibleWithZeroObjective) {
  std::mt19937_64 rng(3);
  auto mlp = synth::mlp(12, {6, 8, 8, 3});
  auto cnn = synth::tiny_cnn(3);
  for (const Model *m : {&mlp, &cnn}) {
    for (const auto &x : synth::uniform_inputs(rng, 15, m->input_size())) {
      for (std::size_t upto = 1; upto <= m->layers.size(); ++upto) {
        auto e = encode_network(*m, x, upto);
        add_linf_objective(e);
        EXPECT_LE(e.lp.max_violation(e.assignment_of(forward(*m, x))), 1e-9);
        auto s = lp::solve(e.lp);
        ASSERT_EQ(s.status, Status::optimal);
        EXPECT_NEAR(s.objective_value, 0, 1e-7);
      }
    }
  }
}

TEST(Encoding, LpSolutionsReproduceTheNetwork) {
  // with a target pulling a feature, the LP's neuron values are those of a
  // forward pass on the returned input (phases unchanged)
  auto m = load_model(fixtures / "concolic_mlp.bnm");
  auto a = load_abstraction(fixtures / "concolic_mlp.bna");
  auto seeds = load_dataset(fixtures / "concolic_seeds.bnd");
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto &x = seeds.inputs[i];
    auto e = encode_network(m, x, 3);
    const auto &part = a.structure.nodes[2].partition;
    const auto here = interval_of(part, project(a.feature_maps[1], forward(m, x)[3].pre)[0]);
    const auto k = here == 0 ? 1 : here - 1;
    encode_target(e, a.feature_maps[1], 0, part, k, 1e-9);
    add_linf_objective(e);
    auto s = lp::solve(e.lp);
    if (s.status != Status::optimal)
      continue;
    ++checked;
    std::vector<double> xp;
    for (auto v : e.inputs())
      xp.push_back(std::clamp(s.assignment[v], 0.0, 1.0));
    const auto act = forward(m, xp);
    for (std::size_t j = 0; j < e.pre[3].size(); ++j)
      EXPECT_NEAR(act[3].pre[j], s.assignment[e.pre[3][j]], 1e-6);
    // phases are kept, up to neurons the LP put on the kink
    const auto act_x = forward(m, x);
    for (std::size_t l = 1; l < 3; ++l)
      for (std::size_t j = 0; j < act[l].pre.size(); ++j)
        if ((act_x[l].pre[j] >= 0) != (act[l].pre[j] >= 0))
          EXPECT_LE(std::abs(act[l].pre[j]), 1e-7);
    const double f = project(a.feature_maps[1], act[3].pre)[0];
    EXPECT_GE(f, part.lower(k) - 1e-6);
    EXPECT_LT(f, part.upper(k));
    EXPECT_NEAR(s.objective_value, oracle_distance(x, xp), 1e-6);
  }
  EXPECT_GT(checked, 0u);
}

TEST(Encoding, TargetConstraintsFollowTheInterval) {
  auto m = synth::mlp(2, {4, 5, 3});
  std::vector<double> x{0.2, 0.4, 0.6, 0.8};
  auto e = encode_network(m, x, 1);
  FeatureMap fm;
  fm.layer = 1;
  fm.W = Eigen::MatrixXd::Ones(5, 1);
  fm.B = Eigen::VectorXd::Constant(1, 0.5);
  Partition p;
  p.boundaries = {-1.0, 2.0};
  const auto before = e.lp.constraints.size();
  EXPECT_EQ(encode_target(e, fm, 0, p, 0), 1u);
  EXPECT_EQ(e.lp.constraints.back().relation, Relation::le);
  EXPECT_DOUBLE_EQ(e.lp.constraints.back().rhs, -1.0 - lp::delta_strict - 0.5);
  EXPECT_EQ(encode_target(e, fm, 0, p, 1), 2u);
  EXPECT_EQ(encode_target(e, fm, 0, p, 2), 1u);
  EXPECT_EQ(e.lp.constraints.back().relation, Relation::ge);
  EXPECT_DOUBLE_EQ(e.lp.constraints.back().rhs, 2.0 - 0.5);
  EXPECT_EQ(e.lp.constraints.size(), before + 4);
  EXPECT_THROW(encode_target(e, fm, 0, p, 3), ArgumentError);
  EXPECT_THROW(encode_target(e, fm, 1, p, 0), ArgumentError);
}

TEST(Encoding, ReplicationPinsTheOtherComponents) {
  auto m = load_model(fixtures / "concolic_mlp.bnm");
  auto a = load_abstraction(fixtures / "concolic_mlp.bna");
  auto seeds = load_dataset(fixtures / "concolic_seeds.bnd");
  const auto &x = seeds.inputs[0];
  const auto act = forward(m, x);
  auto e = encode_network(m, x, 2);
  EXPECT_EQ(encode_replication(e, a.feature_maps[0], 0, act), 1u);
  add_linf_objective(e);
  auto s = lp::solve(e.lp);
  ASSERT_EQ(s.status, Status::optimal);
  EXPECT_NEAR(s.objective_value, 0, 1e-7);
  EXPECT_EQ(e.lp.constraints.back().tag, Tag::objective_link);
}

TEST(Encoding, RejectsUnencodableRequests) {
  auto m = synth::mlp(2, {4, 5, 3});
  std::vector<double> x(4, 0.5);
  EXPECT_THROW(encode_network(m, x, 0), ArgumentError);
  EXPECT_THROW(encode_network(m, x, 3), ArgumentError);
}

// --- concolic --------------------------------------------------------------------

TEST(Concolic, OracleAndDistances) {
  auto m = synth::mlp(2, {3, 4, 2});
  std::vector<double> x{0.1, 0.5, 0.9}, y{0.3, 0.5, 0.8};
  EXPECT_TRUE(featcov::oracle(m, x, y, 0.2 + 1e-12));
  EXPECT_FALSE(featcov::oracle(m, x, y, 0.19));
  EXPECT_FALSE(featcov::oracle(m, x, std::vector<double>{0.1, 0.5, 1.1}, 1.0));
  EXPECT_DOUBLE_EQ(linf_distance(x, y), oracle_distance(x, y));

  Partition p;
  p.boundaries = {0.0, 1.0};
  EXPECT_EQ(distance_to_interval(p, 1, 0.5), 0.0);
  // just outside the open upper end
  EXPECT_EQ(distance_to_interval(p, 1, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(distance_to_interval(p, 1, 1.5), 0.5);
  EXPECT_DOUBLE_EQ(distance_to_interval(p, 0, 3.0), 3.0);
  EXPECT_EQ(distance_to_interval(p, 0, -3.0), 0.0);
  EXPECT_DOUBLE_EQ(distance_to_bounds(p, 1, 0.25), 0.25);
  EXPECT_DOUBLE_EQ(distance_to_bounds(p, 2, 0.25), 0.75);
}

TEST(Concolic, ClosenessPicksTheNearestCandidate) {
  auto m = load_model(fixtures / "concolic_mlp.bnm");
  auto a = load_abstraction(fixtures / "concolic_mlp.bna");
  auto seeds = load_dataset(fixtures / "concolic_seeds.bnd");
  auto st = initial_state(m, a, seeds);
  for (const auto &t : open_targets(st, 1e-3, CriterionKind::feature)) {
    auto c = select_candidate(st, t);
    ASSERT_TRUE(c.has_value());
    const auto &part = st.bn.structure.nodes[t.node].partition;
    double best = std::numeric_limits<double>::infinity();
    for (auto i : st.ok)
      best = std::min(best, distance_to_bounds(part, t.interval, st.features[i][t.layer_pos][t.component]));
    EXPECT_EQ(distance_to_bounds(part, t.interval, st.features[*c][t.layer_pos][t.component]), best);
  }
}

TEST(Concolic, AttemptedPairsAreNotRetried) {
  auto m = load_model(fixtures / "concolic_mlp.bnm");
  auto a = load_abstraction(fixtures / "concolic_mlp.bna");
  auto seeds = load_dataset(fixtures / "concolic_seeds.bnd");
  auto st = initial_state(m, a, seeds);
  ConcolicConfig cfg;
  auto pick = select_target(st, cfg);
  ASSERT_TRUE(pick.has_value());
  attempt(st, m, pick->first, pick->second, cfg);
  EXPECT_TRUE(attempted(st, pick->first, pick->second));
  auto next = select_candidate(st, pick->first, cfg);
  if (next)
    EXPECT_NE(*next, pick->second);
}

TEST(Concolic, FeatureRunInvariants) {
  auto m = load_model(fixtures / "concolic_mlp.bnm");
  auto a = load_abstraction(fixtures / "concolic_mlp.bna");
  auto seeds = load_dataset(fixtures / "concolic_seeds.bnd");
  ConcolicConfig cfg;
  auto res = run(m, a, seeds, cfg);
  const auto &st = res.state;
  EXPECT_EQ(res.coverage_series.size(), res.log.size() + 1);
  for (std::size_t i = 1; i < res.coverage_series.size(); ++i)
    EXPECT_GE(res.coverage_series[i], res.coverage_series[i - 1]);
  EXPECT_GT(res.coverage_series.back(), res.coverage_series.front());
  EXPECT_EQ(st.seed_count + res.rejected_seeds, seeds.size());

  // Xok is a subset of X; adversarial inputs are exactly the retained
  // inputs that are not in Xok
  std::set<std::size_t> ok(st.ok.begin(), st.ok.end());
  for (auto i : st.ok)
    EXPECT_LT(i, st.tests.size());
  std::size_t retained = 0;
  for (const auto &r : res.log) {
    if (!r.retained)
      continue;
    const auto idx = st.seed_count + retained++;
    EXPECT_TRUE(r.oracle_pass);
    EXPECT_GT(r.delta, 0.0);
    EXPECT_LE(linf_distance(st.tests.inputs[r.candidate], st.tests.inputs[idx]), cfg.oracle_linf);
    EXPECT_EQ(ok.count(idx) == 0, r.adversarial);
  }
  for (const auto &adv : st.adversarials) {
    EXPECT_NE(oracle::naive_label(m, st.tests.inputs[adv.source]),
              oracle::naive_label(m, st.tests.inputs[adv.generated]));
    EXPECT_EQ(adv.source_label, oracle::naive_label(m, st.tests.inputs[adv.source]));
  }
  // the incrementally updated tables equal a refit on all tests
  auto t = fit_tables(st.bn.structure, traces_of(st.bn, m, st.tests.inputs));
  for (std::size_t id = 0; id < st.bn.structure.node_count(); ++id)
    EXPECT_EQ(t.nodes[id].counts, st.bn.tables.nodes[id].counts);
}

TEST(Concolic, RunsAreReproducible) {
  auto m = load_model(fixtures / "concolic_mlp.bnm");
  auto a = load_abstraction(fixtures / "concolic_mlp.bna");
  auto seeds = load_dataset(fixtures / "concolic_seeds.bnd");
  for (auto h : {CandidateHeuristic::closeness, CandidateHeuristic::random}) {
    ConcolicConfig cfg;
    cfg.criterion = CriterionKind::feature_dependence;
    cfg.max_iterations = 15;
    cfg.heuristic = h;
    cfg.seed = 5;
    auto r1 = run(m, a, seeds, cfg);
    auto r2 = run(m, a, seeds, cfg);
    EXPECT_EQ(r1.coverage_series, r2.coverage_series);
    EXPECT_EQ(r1.state.tests.inputs, r2.state.tests.inputs);
    ASSERT_EQ(r1.log.size(), 15u);
  }
}

TEST(Concolic, DependenceTargetsCarryTheirParent) {
  auto m = load_model(fixtures / "concolic_mlp.bnm");
  auto a = load_abstraction(fixtures / "concolic_mlp.bna");
  auto seeds = load_dataset(fixtures / "concolic_seeds.bnd");
  auto st = initial_state(m, a, seeds);
  auto targets = open_targets(st, 1e-3, CriterionKind::feature_dependence);
  ASSERT_FALSE(targets.empty());
  for (const auto &t : targets) {
    ASSERT_TRUE(t.parent.has_value());
    EXPECT_GT(t.layer_pos, 0u);
    EXPECT_LT(t.probability, 1e-3);
  }
}

TEST(Concolic, RejectsBadSeeds) {
  auto m = load_model(fixtures / "concolic_mlp.bnm");
  auto a = load_abstraction(fixtures / "concolic_mlp.bna");
  auto seeds = load_dataset(fixtures / "concolic_seeds.bnd");
  Dataset unlabeled = seeds;
  unlabeled.labels.clear();
  EXPECT_THROW(run(m, a, unlabeled, {}), ArgumentError);
  Dataset wrong = seeds;
  for (auto &l : wrong.labels)
    l = (l + 1) % 10;
  EXPECT_THROW(run(m, a, wrong, {}), ArgumentError);
  EXPECT_THROW(parse_heuristic("nearest"), ArgumentError);
}
