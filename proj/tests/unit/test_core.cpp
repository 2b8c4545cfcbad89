#include <gtest/gtest.h>

#include <random>

#include "featcov/featcov.hpp"
#include "oracles.hpp"
#include "synth.hpp"

using namespace featcov;

namespace {

const std::filesystem::path fixtures = FEATCOV_FIXTURES;

std::size_t parameter_count(const Model &m) {
  std::size_t n = 0;
  for (const auto &l : m.layers)
    n += l.parameter_count();
  return n;
}

} // namespace

// --- binary io ---------------------------------------------------------------

TEST(BinaryIo, Sha256KnownVector) {
  EXPECT_EQ(io::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(io::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(BinaryIo, ScalarRoundTrip) {
  io::ByteWriter w;
  w.put_u8(200);
  w.put_u64(0x0123456789abcdefULL);
  w.put_f64(-1.0 / 3.0);
  w.put_f32(0.25f);
  io::ByteReader r(w.bytes(), "test");
  EXPECT_EQ(r.get_u8(), 200);
  EXPECT_EQ(r.get_u64(), 0x0123456789abcdefULL);
  EXPECT_EQ(r.get_f64(), -1.0 / 3.0);
  EXPECT_EQ(r.get_f32(), 0.25f);
  EXPECT_EQ(r.remaining(), 0u);
}

TEST(BinaryIo, LittleEndianLayout) {
  io::ByteWriter w;
  w.put_u64(1);
  EXPECT_EQ(w.bytes()[0], '\x01');
  EXPECT_EQ(w.bytes()[7], '\x00');
}

TEST(BinaryIo, TruncatedReadThrows) {
  io::ByteReader r(std::string(3, 'x'), "test");
  EXPECT_THROW(r.get_u64(), FormatError);
}

TEST(BinaryIo, HeaderErrors) {
  EXPECT_THROW(io::parse_header("XYZ 1\nend\n", "BNM", 1, "model"), FormatError);
  EXPECT_THROW(io::parse_header("BNM 9\nend\n", "BNM", 1, "model"), FormatError);
  EXPECT_THROW(io::parse_header("BNM 1\ndtype f32\n", "BNM", 1, "model"), FormatError);
  auto h = io::parse_header("BNM 1\ndtype f64\nend\nPAYLOAD", "BNM", 1, "model");
  EXPECT_EQ(h.require("dtype", "model").at(1), "f64");
  EXPECT_EQ(h.payload_offset, std::string("BNM 1\ndtype f64\nend\n").size());
}

TEST(BinaryIo, MissingFileThrows) { EXPECT_THROW(io::read_file("/nonexistent/file.bnm", "model"), Error); }

TEST(BinaryIo, ErrorMessagesNameTheModule) {
  try {
    io::ByteReader("", "dataset").get_u8();
    FAIL();
  } catch (const FormatError &e) {
    EXPECT_EQ(e.module(), "dataset");
    EXPECT_EQ(std::string(e.what()).rfind("dataset: ", 0), 0u);
  }
}

// --- model -------------------------------------------------------------------

TEST(Model, ForwardMatchesNaiveEvaluation) {
  std::mt19937_64 rng(1);
  for (const auto &m : {synth::tiny_cnn(3), synth::mlp(4, {5, 7, 3}), synth::concolic_fixture()}) {
    for (const auto &x : synth::uniform_inputs(rng, 20, m.input_size())) {
      const auto act = forward(m, x);
      const auto want = oracle::naive_logits(m, x);
      ASSERT_EQ(act.layers.back().pre.size(), want.size());
      for (std::size_t k = 0; k < want.size(); ++k)
        EXPECT_NEAR(act.layers.back().pre[k], want[k], 1e-12);
      EXPECT_EQ(classify(m, x), oracle::naive_label(m, x));
    }
  }
}

TEST(Model, ConvWithStrideMatchesNaiveEvaluation) {
  std::mt19937_64 rng(2);
  Model m;
  m.input_shape = {7, 7, 2};
  auto c = synth::conv(rng, {7, 7, 2}, 3, 3, Activation::relu);
  c.stride = {2, 2};
  c.output_shape = {3, 3, 3};
  m.layers.push_back(c);
  m.layers.push_back(synth::flatten({3, 3, 3}));
  validate(m);
  for (const auto &x : synth::uniform_inputs(rng, 10, m.input_size())) {
    const auto act = forward(m, x);
    const auto want = oracle::naive_logits(m, x);
    for (std::size_t k = 0; k < want.size(); ++k)
      EXPECT_NEAR(act.layers.back().pre[k], want[k], 1e-12);
  }
}

TEST(Model, MaxpoolAndFlatten) {
  Model m;
  m.input_shape = {4, 4, 1};
  m.layers.push_back(synth::maxpool({4, 4, 1}, 2));
  m.layers.push_back(synth::flatten({2, 2, 1}));
  validate(m);
  std::vector<double> x(16);
  for (std::size_t k = 0; k < 16; ++k)
    x[k] = static_cast<double>((k * 7) % 16) / 16.0;
  const auto act = forward(m, x);
  // 2x2 windows of the 4x4 grid, row-major
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox) {
      double best = -1;
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b)
          best = std::max(best, x[(oy * 2 + a) * 4 + ox * 2 + b]);
      EXPECT_EQ(act[1].pre[oy * 2 + ox], best);
    }
  EXPECT_EQ(act[2].pre, act[1].post);
}

TEST(Model, MaxpoolSelectionMatrixMarksTheMaxima) {
  Model m;
  m.input_shape = {2, 2, 1};
  m.layers.push_back(synth::maxpool({2, 2, 1}, 2));
  validate(m);
  const std::vector<double> x{0.5, 0.9, 0.9, 0.1};
  const auto sel = maxpool_selection_matrix(m, 1, forward(m, x));
  EXPECT_FALSE(sel(0, 0));
  EXPECT_TRUE(sel(0, 1));
  EXPECT_TRUE(sel(0, 2));
  EXPECT_FALSE(sel(0, 3));
}

TEST(Model, SoftmaxSumsToOne) {
  auto m = synth::mlp(5, {4, 6, 5});
  std::mt19937_64 rng(5);
  for (const auto &x : synth::uniform_inputs(rng, 5, 4)) {
    const auto out = forward(m, x).output();
    double s = 0;
    for (double v : out)
      s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Model, ValidateRejectsBadShapes) {
  auto m = synth::mlp(1, {3, 4, 2});
  m.layers[1].input_shape = {5};
  EXPECT_THROW(validate(m), ShapeError);
  m = synth::mlp(1, {3, 4, 2});
  m.layers[0].weights.pop_back();
  EXPECT_THROW(validate(m), ShapeError);
  m = synth::mlp(1, {3, 4, 2});
  m.layers[0].activation = Activation::softmax;
  EXPECT_THROW(validate(m), ShapeError);
  m = synth::mlp(1, {3, 4, 2});
  m.label_count = 7;
  EXPECT_THROW(validate(m), ShapeError);
  EXPECT_THROW(forward(synth::mlp(1, {3, 4, 2}), std::vector<double>(4, 0.0)), ShapeError);
}

TEST(Model, ParameterCountsOfTheMnistArchitectures) {
  auto plain = load_model(fixtures / "mnist_small.bnm");
  ASSERT_EQ(plain.layers.size(), 4u);
  EXPECT_EQ(plain.layers[0].parameter_count(), 80u);
  EXPECT_EQ(plain.layers[1].parameter_count(), 0u);
  EXPECT_EQ(plain.layers[2].parameter_count(), 227178u);
  EXPECT_EQ(plain.layers[3].parameter_count(), 430u);
  auto pooled = load_model(fixtures / "mnist_small_maxp.bnm");
  EXPECT_EQ(pooled.layers[3].parameter_count(), 56826u);
  EXPECT_EQ(parameter_count(pooled), 80u + 56826u + 430u);
}

TEST(ModelIo, RoundTripF64IsExact) {
  auto m = synth::tiny_cnn(9);
  m.input_domain = {Range{-1.0, 2.0}};
  auto back = parse_model(serialize_model(m, io::DType::f64));
  ASSERT_EQ(back.layers.size(), m.layers.size());
  EXPECT_EQ(back.input_shape, m.input_shape);
  EXPECT_EQ(back.label_count, m.label_count);
  EXPECT_EQ(back.input_domain[0].lo, -1.0);
  EXPECT_EQ(back.input_domain[0].hi, 2.0);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    EXPECT_EQ(back.layers[i].kind, m.layers[i].kind);
    EXPECT_EQ(back.layers[i].activation, m.layers[i].activation);
    EXPECT_EQ(back.layers[i].weights, m.layers[i].weights);
    EXPECT_EQ(back.layers[i].bias, m.layers[i].bias);
    EXPECT_EQ(back.layers[i].window, m.layers[i].window);
    EXPECT_EQ(back.layers[i].stride, m.layers[i].stride);
  }
  EXPECT_EQ(serialize_model(back, io::DType::f64), serialize_model(m, io::DType::f64));
}

TEST(ModelIo, RoundTripF32RoundsWeights) {
  auto m = synth::mlp(3, {4, 5, 2});
  auto back = parse_model(serialize_model(m, io::DType::f32));
  for (std::size_t k = 0; k < m.layers[0].weights.size(); ++k)
    EXPECT_EQ(back.layers[0].weights[k], static_cast<double>(static_cast<float>(m.layers[0].weights[k])));
}

TEST(ModelIo, TruncatedPayloadThrows) {
  auto bytes = serialize_model(synth::mlp(3, {4, 5, 2}));
  EXPECT_THROW(parse_model(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(parse_model("BNM 1\nend\n"), FormatError);
}

TEST(DatasetIo, RoundTrip) {
  std::mt19937_64 rng(4);
  Dataset d;
  d.shape = {2, 3};
  d.inputs = synth::uniform_inputs(rng, 7, 6);
  d.labels = {0, 1, 2, 3, 4, 5, 255};
  auto back = parse_dataset(serialize_dataset(d, io::DType::f64));
  EXPECT_EQ(back.shape, d.shape);
  EXPECT_EQ(back.inputs, d.inputs);
  EXPECT_EQ(back.labels, d.labels);

  d.labels.clear();
  back = parse_dataset(serialize_dataset(d, io::DType::f32));
  EXPECT_FALSE(back.has_labels());
  EXPECT_EQ(back.size(), 7u);
  EXPECT_EQ(back.inputs[3][2], static_cast<double>(static_cast<float>(d.inputs[3][2])));
}

TEST(DatasetIo, Errors) {
  Dataset d;
  d.shape = {2};
  d.inputs = {{0.1, 0.2}};
  d.labels = {300};
  EXPECT_THROW(serialize_dataset(d), ArgumentError);
  d.labels = {1};
  auto bytes = serialize_dataset(d);
  EXPECT_THROW(parse_dataset(bytes + "x"), FormatError);
  EXPECT_THROW(parse_dataset(bytes.substr(0, bytes.size() - 2)), FormatError);

  auto m = synth::mlp(1, {2, 3, 2});
  d.inputs = {{0.1, 1.5}};
  EXPECT_THROW(validate(d, m), ArgumentError);
  d.inputs = {{0.1, 0.2, 0.3}};
  EXPECT_THROW(validate(d, m), ShapeError);
}

TEST(DatasetIo, FixturesLoad) {
  auto m = load_model(fixtures / "concolic_mlp.bnm");
  auto train = load_dataset(fixtures / "concolic_train.bnd");
  auto seeds = load_dataset(fixtures / "concolic_seeds.bnd");
  EXPECT_EQ(train.size(), 500u);
  EXPECT_EQ(seeds.size(), 100u);
  EXPECT_NO_THROW(validate(train, m));
  EXPECT_NO_THROW(validate(seeds, m));
}

// --- feature maps --------------------------------------------------------------

namespace {

Eigen::MatrixXd correlated_sample(std::uint64_t seed, Eigen::Index n, Eigen::Index h) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  Eigen::MatrixXd mix = Eigen::MatrixXd::NullaryExpr(h, h, [&] { return g(rng); });
  Eigen::MatrixXd X = Eigen::MatrixXd::NullaryExpr(n, h, [&] { return g(rng); }) * mix;
  X.rowwise() += Eigen::RowVectorXd::LinSpaced(h, -2, 5);
  return X;
}

double abs_corr(const Eigen::VectorXd &a, const Eigen::VectorXd &b) {
  Eigen::VectorXd x = a.array() - a.mean(), y = b.array() - b.mean();
  return std::abs(x.dot(y) / (x.norm() * y.norm()));
}

} // namespace

TEST(Pca, ComponentsAreOrthonormal) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto X = correlated_sample(seed, 200, 8);
    auto fm = fit_feature_map(Technique::pca, X, 4);
    EXPECT_LE((fm.W.transpose() * fm.W - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Pca, FullRankRoundTrip) {
  auto X = correlated_sample(3, 300, 6);
  auto fm = fit_feature_map(Technique::pca, X, 6);
  Eigen::MatrixXd F = project_dataset(fm, X);
  Eigen::MatrixXd back = (F * fm.W.transpose()).rowwise() + X.colwise().mean();
  EXPECT_LE((back - X).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Pca, ExplainedVarianceDescendsAndFeaturesAreCentred) {
  auto X = correlated_sample(5, 400, 6);
  auto fm = fit_feature_map(Technique::pca, X, 3);
  ASSERT_EQ(fm.explained_variance_ratio.size(), 3u);
  EXPECT_GE(fm.explained_variance_ratio[0], fm.explained_variance_ratio[1]);
  EXPECT_GE(fm.explained_variance_ratio[1], fm.explained_variance_ratio[2]);
  Eigen::MatrixXd F = project_dataset(fm, X);
  EXPECT_LE(F.colwise().mean().cwiseAbs().maxCoeff(), 1e-9);
  // the first component carries the largest sample variance
  Eigen::VectorXd var = (F.rowwise() - F.colwise().mean()).array().square().colwise().mean();
  EXPECT_GE(var(0), var(1));
  EXPECT_GE(var(1), var(2));
}

TEST(Pca, ProjectMatchesDatasetProjection) {
  auto X = correlated_sample(6, 50, 5);
  auto fm = fit_feature_map(Technique::pca_scaled, X, 2);
  Eigen::MatrixXd F = project_dataset(fm, X);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    std::vector<double> row;
    for (Eigen::Index k = 0; k < X.cols(); ++k)
      row.push_back(X(i, k));
    auto f = project(fm, row);
    EXPECT_EQ(f[0], F(i, 0));
    EXPECT_EQ(f[1], F(i, 1));
    // the linear form view agrees with the projection
    EXPECT_NEAR(fm.component(1).eval(row), f[1], 1e-10);
  }
}

TEST(Pca, RejectsRankDeficiency) {
  Eigen::MatrixXd X(20, 4);
  for (Eigen::Index i = 0; i < 20; ++i)
    X.row(i) << static_cast<double>(i), 2.0 * static_cast<double>(i), 1.0, -static_cast<double>(i);
  EXPECT_THROW(fit_feature_map(Technique::pca, X, 2), NumericError);
  EXPECT_NO_THROW(fit_feature_map(Technique::pca, X, 1));
  EXPECT_THROW(fit_feature_map(Technique::pca, X, 0), ArgumentError);
  EXPECT_THROW(fit_feature_map(Technique::pca, X, 5), ArgumentError);
}

TEST(Ica, RecoversTwoSourceMixture) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> g(0, 1);
  Eigen::MatrixXd S(2000, 2);
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    S(i, 0) = u(rng);
    S(i, 1) = std::fmod(0.013 * static_cast<double>(i), 1.0) * 2.0 - 1.0;
  }
  Eigen::MatrixXd A = Eigen::MatrixXd::NullaryExpr(2, 6, [&] { return g(rng); });
  Eigen::MatrixXd Y = S * A;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto fm = fit_feature_map(Technique::ica, Y, 2, seed);
    Eigen::MatrixXd R = project_dataset(fm, Y);
    const double straight = std::min(abs_corr(R.col(0), S.col(0)), abs_corr(R.col(1), S.col(1)));
    const double swapped = std::min(abs_corr(R.col(0), S.col(1)), abs_corr(R.col(1), S.col(0)));
    EXPECT_GE(std::max(straight, swapped), 0.95) << "seed " << seed;
  }
}

TEST(Ica, SameSeedSameMap) {
  auto X = correlated_sample(8, 300, 5);
  auto a = fit_feature_map(Technique::ica, X, 2, 42);
  auto b = fit_feature_map(Technique::ica, X, 2, 42);
  EXPECT_EQ(a.W, b.W);
  EXPECT_EQ(a.B, b.B);
}

TEST(FeatureIo, RoundTrip) {
  auto X = correlated_sample(9, 100, 5);
  for (auto tech : {Technique::pca, Technique::pca_scaled, Technique::ica}) {
    auto fm = fit_feature_map(tech, X, 2, 3, 4);
    auto back = parse_feature_map(serialize_feature_map(fm));
    EXPECT_EQ(back.layer, 4u);
    EXPECT_EQ(back.technique, tech);
    EXPECT_EQ(back.W, fm.W);
    EXPECT_EQ(back.B, fm.B);
    EXPECT_EQ(back.scale.has_value(), fm.scale.has_value());
    EXPECT_EQ(back.explained_variance_ratio, fm.explained_variance_ratio);
  }
}

// --- discretisation --------------------------------------------------------------

namespace {

std::vector<double> normal_values(std::uint64_t seed, std::size_t n, double sd = 2.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(1.0, sd);
  std::vector<double> v(n);
  for (auto &x : v)
    x = g(rng);
  return v;
}

void expect_total(const Partition &p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-30, 30);
  for (int i = 0; i < 20000; ++i) {
    const double x = u(rng);
    std::size_t idx = 0;
    ASSERT_EQ(oracle::containing_intervals(p, x, idx), 1u) << x;
    ASSERT_EQ(idx, interval_of(p, x));
  }
  for (double b : p.boundaries) {
    std::size_t idx = 0;
    ASSERT_EQ(oracle::containing_intervals(p, b, idx), 1u);
    ASSERT_EQ(idx, interval_of(p, b));
  }
}

} // namespace

TEST(Discretise, PartitionsAreTotalAndDisjoint) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto v = normal_values(seed, 60 + seed * 10);
    for (bool ext : {false, true}) {
      expect_total(discretise_kbins_uniform(v, 3, ext), seed);
      expect_total(discretise_kbins_quantile(v, 4, ext), seed);
    }
    expect_total(discretise_density(v), seed);
  }
}

TEST(Discretise, UniformBinWidths) {
  std::vector<double> v{0, 1, 2, 3, 4, 5, 6};
  auto p = discretise_kbins_uniform(v, 3, false);
  EXPECT_EQ(p.boundaries, (std::vector<double>{2, 4}));
  EXPECT_EQ(p.interval_count(), 3u);
  auto e = discretise_kbins_uniform(v, 3, true);
  EXPECT_EQ(e.boundaries, (std::vector<double>{0, 2, 4, 6}));
  EXPECT_EQ(e.interval_count(), 5u);
}

TEST(Discretise, QuantileBalance) {
  for (std::size_t n : {10u, 11u, 57u, 100u}) {
    auto v = normal_values(n, n);
    for (std::size_t k : {2u, 3u, 4u, 5u}) {
      auto p = discretise_kbins_quantile(v, k, false);
      std::vector<double> counts(p.interval_count(), 0);
      for (double x : v)
        ++counts[interval_of(p, x)];
      ASSERT_EQ(counts.size(), k);
      for (double c : counts)
        EXPECT_LE(std::abs(c - static_cast<double>(n) / static_cast<double>(k)), 1.0) << n << " " << k;
    }
  }
}

TEST(Discretise, ExtendedEndsHoldOnlyTheMaximum) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto v = normal_values(seed, 80);
    const double mx = *std::max_element(v.begin(), v.end());
    for (const auto &p : {discretise_kbins_uniform(v, 3, true), discretise_kbins_quantile(v, 3, true)}) {
      ASSERT_TRUE(p.extended);
      for (double x : v) {
        const auto k = interval_of(p, x);
        EXPECT_NE(k, 0u);
        if (k + 1 == p.interval_count())
          EXPECT_EQ(x, mx);
      }
    }
  }
}

TEST(Discretise, CollapsedQuantilesAreFlagged) {
  std::vector<double> v{1, 1, 1, 1, 1, 1, 2, 3};
  auto p = discretise_kbins_quantile(v, 4, false);
  EXPECT_TRUE(p.degenerate);
  EXPECT_LT(p.interval_count(), 4u);
  auto c = discretise_kbins_uniform(std::vector<double>{2, 2, 2}, 3, true);
  EXPECT_TRUE(c.degenerate);
  EXPECT_EQ(c.note, "constant component");
}

TEST(Discretise, DensityFindsTheValley) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> left(-4, 1), right(4, 1);
  std::vector<double> v;
  for (int i = 0; i < 1500; ++i) {
    v.push_back(left(rng));
    v.push_back(right(rng));
  }
  auto p = discretise_density(v);
  EXPECT_FALSE(p.degenerate);
  EXPECT_TRUE(std::any_of(p.boundaries.begin(), p.boundaries.end(), [](double b) { return std::abs(b) < 2; }));

  // shallow valley above the threshold: found as a prominent minimum
  std::normal_distribution<double> l2(-1.5, 1), r2(1.5, 1);
  std::vector<double> w;
  for (int i = 0; i < 3000; ++i) {
    w.push_back(l2(rng));
    w.push_back(r2(rng));
  }
  auto q = discretise_density(w);
  EXPECT_TRUE(std::any_of(q.boundaries.begin(), q.boundaries.end(), [](double b) { return std::abs(b) < 0.5; }));
}

TEST(Discretise, DensityOfConstantFallsBack) {
  auto p = discretise_density(std::vector<double>{3, 3, 3, 3});
  EXPECT_TRUE(p.degenerate);
  EXPECT_EQ(p.strategy, Strategy::kde);
}

TEST(Discretise, SilvermanBandwidth) {
  // sd and IQR/1.34 of 1..9 are 2.7386 and 2.9851; the rule takes the smaller
  std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9};
  EXPECT_NEAR(silverman_bandwidth(v), 0.9 * std::sqrt(7.5) * std::pow(9.0, -0.2), 1e-12);
}

TEST(Discretise, RejectsBadInput) {
  EXPECT_THROW(discretise_kbins_uniform(std::vector<double>{}, 3, false), ArgumentError);
  EXPECT_THROW(discretise_kbins_uniform(std::vector<double>{1, NAN}, 3, false), ArgumentError);
  EXPECT_THROW(discretise_kbins_quantile(std::vector<double>{1, 2}, 0, false), ArgumentError);
}
