#include "psr/refine.hpp"

#include <gtest/gtest.h>

using namespace psr;

namespace {

PsrModel random_model(const FeatureSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const Index d = spec.future_dim();
  auto draw = [&](Index r, Index c) {
    return Matrix(Matrix::NullaryExpr(r, c, [&](Index, Index) { return uniform01(rng); }));
  };
  std::vector<Matrix> ops;
  for (int i = 0; i < spec.alphabet_size; ++i) ops.push_back(draw(d, d));
  return PsrModel::create(spec, draw(d, 1).col(0), draw(d, 1).col(0), std::move(ops));
}

double one_step_loss(const PsrModel& m, const Matrix& b, const Vector& q, const Vector& psi) {
  const Vector raw = b * q;
  return 0.5 * (psi - raw / m.b_inf().dot(raw)).squaredNorm();
}

struct SmallData {
  FeatureSpec spec{3, 2, 2, true};
  std::vector<ObservationSequence> train;
  std::vector<ObservationSequence> test;
  PsrModel init;
};

SmallData small_data() {
  SmallData data;
  const HmmModel hmm = generate_ring_hmm(4, 3, 12);
  auto seqs = sample_sequences(hmm, 200, 8, 13);
  data.train.assign(seqs.begin(), seqs.begin() + 100);
  data.test.assign(seqs.begin() + 100, seqs.end());
  data.init = two_stage_regression(make_training_triples(data.train, data.spec), data.spec);
  return data;
}

}  // namespace

TEST(OneStepGradient, ZeroWhenPredictionIsExact) {
  const PsrModel m = random_model(FeatureSpec{2, 2, 1, true}, 2);
  const Vector target = filter(m, m.q1(), 1).state;
  EXPECT_TRUE(one_step_gradient(m, m.q1(), 1, target).isZero(1e-15));
  const ObservationSequence w{1, 0};
  EXPECT_TRUE(multi_step_gradient(m, m.q1(), w, propagate(m, m.q1(), w).state).isZero(1e-14));
}

TEST(OneStepGradient, MatchesFiniteDifferences) {
  const PsrModel m = random_model(FeatureSpec{2, 2, 1, true}, 3);
  const Vector q = m.q1();
  const Vector psi = IndicatorVector(6, {1, 3}).dense();
  const Matrix analytic = one_step_gradient(m, q, 0, psi);
  const Matrix numeric = finite_difference_gradient(
      [&](const Matrix& b) { return one_step_loss(m, b, q, psi); }, m.op(0), 1e-5);
  EXPECT_LT((analytic - numeric).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(OneStepGradient, RankOneFactors) {
  const PsrModel m = random_model(FeatureSpec{2, 2, 1, true}, 4);
  const Vector psi = IndicatorVector(6, {0, 2}).dense();
  const RankOneGradient g = one_step_gradient_factors(m, m.q1(), 1, psi);
  EXPECT_EQ(g.right, m.q1());
  EXPECT_NEAR(g.l1_norm(), g.dense().lpNorm<1>(), 1e-12);
  EXPECT_FALSE(g.clamped);
}

TEST(MultiStepGradient, HorizonOneIsOneStep) {
  const PsrModel m = random_model(FeatureSpec{3, 2, 1, true}, 5);
  const Vector psi = IndicatorVector(12, {2, 5}).dense();
  const ObservationSequence w{2};
  EXPECT_EQ(multi_step_gradient(m, m.q1(), w, psi), one_step_gradient(m, m.q1(), 2, psi));
}

TEST(MultiStepGradient, RepeatedSymbolPerturbsFirstPositionOnly) {
  const PsrModel m = random_model(FeatureSpec{2, 2, 1, true}, 6);
  const ObservationSequence w{1, 0, 1};
  const Vector psi = IndicatorVector(6, {1, 5}).dense();
  auto loss = [&](const Matrix& b) {
    Vector raw = b * m.q1();
    raw = m.op(0) * raw;
    raw = m.op(1) * raw;
    return 0.5 * (psi - raw / m.b_inf().dot(raw)).squaredNorm();
  };
  const Matrix numeric = finite_difference_gradient(loss, m.op(1), 1e-5);
  const Matrix analytic = multi_step_gradient(m, m.q1(), w, psi);
  EXPECT_LT((analytic - numeric).cwiseAbs().maxCoeff(), 1e-8 * std::max(1.0, analytic.cwiseAbs().maxCoeff()));
}

TEST(FiniteDifferences, SimpleLosses) {
  Rng rng(1);
  const Matrix b = Matrix::NullaryExpr(3, 4, [&](Index, Index) { return uniform01(rng); });
  const Matrix quad = finite_difference_gradient([](const Matrix& x) { return 0.5 * x.squaredNorm(); }, b, 1e-4);
  EXPECT_LT((quad - b).cwiseAbs().maxCoeff(), 1e-8);
  const Matrix lin = finite_difference_gradient([](const Matrix& x) { return x.sum(); }, b, 1e-4);
  EXPECT_LT((lin - Matrix::Ones(3, 4)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_THROW(finite_difference_gradient([](const Matrix& x) { return x.sum(); }, b, 0.0), InvalidArgument);
}

TEST(NormalizeGradient, L1) {
  Matrix g(2, 2);
  g << 1.0, -1.0, 0.5, -1.5;
  Matrix expected = g / 4.0;
  EXPECT_EQ(normalize_gradient_l1(g), expected);
  EXPECT_TRUE(normalize_gradient_l1(Matrix::Zero(2, 3)).isZero(0.0));
}

TEST(Refine, ZeroLearningRateLeavesModelUnchanged) {
  const SmallData data = small_data();
  RefineConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.iterations = 3;
  EXPECT_TRUE(refine_one_step(data.init, data.train, data.spec, cfg).model == data.init);
  cfg.horizon = 3;
  EXPECT_TRUE(refine_multi_step(data.init, data.train, data.spec, cfg).model == data.init);
}

TEST(Refine, ZeroIterationsLogsInitialization) {
  const SmallData data = small_data();
  RefineConfig cfg;
  cfg.iterations = 0;
  const RefineResult r = refine_one_step(data.init, data.train, data.spec, cfg, {{}, data.test});
  EXPECT_TRUE(r.model == data.init);
  ASSERT_EQ(r.logs.size(), 1u);
  EXPECT_EQ(*r.logs[0].test, evaluate(data.init, data.test, data.spec));
}

TEST(Refine, HorizonOneMultiStepEqualsOneStep) {
  const SmallData data = small_data();
  RefineConfig cfg;
  cfg.iterations = 2;
  cfg.seed = 4;
  const PsrModel a = refine_one_step(data.init, data.train, data.spec, cfg).model;
  const PsrModel b = refine_multi_step(data.init, data.train, data.spec, cfg).model;
  EXPECT_TRUE(a == b);
}

TEST(Refine, OnlyOperatorsChangeAndRunsAreReproducible) {
  const SmallData data = small_data();
  RefineConfig cfg;
  cfg.iterations = 2;
  cfg.horizon = 2;
  cfg.seed = 9;
  const RefineResult a = refine_multi_step(data.init, data.train, data.spec, cfg, {data.train, data.test});
  const RefineResult b = refine_multi_step(data.init, data.train, data.spec, cfg, {data.train, data.test});
  EXPECT_TRUE(a.model == b.model);
  EXPECT_FALSE(a.model == data.init);
  EXPECT_EQ(a.model.q1(), data.init.q1());
  EXPECT_EQ(a.model.b_inf(), data.init.b_inf());
  ASSERT_EQ(a.logs.size(), 3u);
  for (std::size_t i = 0; i < a.logs.size(); ++i) {
    EXPECT_EQ(a.logs[i].iteration, static_cast<int>(i));
    EXPECT_EQ(*a.logs[i].test, *b.logs[i].test);
    EXPECT_TRUE(a.logs[i].train.has_value());
  }
}

TEST(Refine, FirstUpdateMatchesManualStep) {
  const FeatureSpec spec{2, 2, 1, true};
  const PsrModel m = random_model(spec, 10);
  const std::vector<ObservationSequence> seqs{{1, 0, 1}};
  RefineConfig cfg;
  cfg.iterations = 1;
  cfg.learning_rate = 0.01;
  const PsrModel refined = refine_one_step(m, seqs, spec, cfg).model;

  PsrModel manual = m;
  Vector q = m.q1();
  for (std::size_t t = 0; t < 1; ++t) {
    const Matrix g = one_step_gradient(manual, q, seqs[0][t], future_features(seqs[0], t + 1, spec).dense());
    const Vector next = filter(manual, q, seqs[0][t]).state;
    manual.mutable_op(seqs[0][t]) -= cfg.learning_rate * normalize_gradient_l1(g);
    q = next;
  }
  EXPECT_LT((refined.op(1) - manual.op(1)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(refined.op(0), m.op(0));
}

TEST(Refine, DivergenceGuard) {
  const SmallData data = small_data();
  RefineConfig cfg;
  cfg.iterations = 1;
  cfg.learning_rate = 1e15;
  EXPECT_THROW(refine_one_step(data.init, data.train, data.spec, cfg), DivergenceError);
}

TEST(Refine, ConfigValidation) {
  const SmallData data = small_data();
  RefineConfig cfg;
  cfg.horizon = 2;
  EXPECT_THROW(refine_one_step(data.init, data.train, data.spec, cfg), InvalidArgument);
  cfg.horizon = 0;
  EXPECT_THROW(refine_multi_step(data.init, data.train, data.spec, cfg), InvalidArgument);
  cfg.horizon = 1;
  cfg.learning_rate = -1.0;
  EXPECT_THROW(refine_one_step(data.init, data.train, data.spec, cfg), InvalidArgument);
}

TEST(RandomInit, SeedsAndNormalizer) {
  const SmallData data = small_data();
  const PsrModel a = random_init(data.spec, data.train, 1), b = random_init(data.spec, data.train, 2);
  EXPECT_NE(a.op(0), b.op(0));
  EXPECT_TRUE(a == random_init(data.spec, data.train, 1));
  EXPECT_NEAR(a.b_inf().dot(a.q1()), 1.0, 1e-12);
  EXPECT_EQ(a.b_inf(), b.b_inf());
}

TEST(Psim, RequiresRandomInitAndMatchesIgFromRandomInit) {
  const SmallData data = small_data();
  RefineConfig cfg;
  cfg.iterations = 1;
  cfg.seed = 3;
  EXPECT_THROW(psim_baseline(data.train, data.spec, cfg), InvalidArgument);
  cfg.init = InitMode::random;
  const PsrModel psim = psim_baseline(data.train, data.spec, cfg).model;
  const PsrModel ig = refine_one_step(random_init(data.spec, data.train, 3), data.train, data.spec, cfg).model;
  EXPECT_TRUE(psim == ig);
}
