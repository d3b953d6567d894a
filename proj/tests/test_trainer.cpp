#include <algorithm>
#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "flatnce/trainer.hpp"

using namespace flatnce;

namespace {

TrainConfig small_config(EstimatorTag tag = EstimatorTag::infonce) {
  TrainConfig c;
  c.dataset = {DatasetKind::correlated_gaussian, 2, 0.8};
  c.critic = CriticKind::separable;
  c.embed_dim = 8;
  c.hidden = 16;
  c.estimator = {tag};
  c.batch_size = 32;
  c.steps = 40;
  c.eval_every = 10;
  c.k_eval = 256;
  return c;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST(Train, ZeroLearningRateKeepsInitialParameters) {
  auto c = small_config();
  c.steps = 1;
  c.optimizer = {OptimizerKind::sgd, 0.0};
  const auto rec = train(c);
  Rng init(c.seed, streams::init);
  const auto fresh = make_critic(c.critic, 2, 2, c.embed_dim, init, c.beta, c.normalize, c.hidden);
  EXPECT_EQ(rec.critic, fresh);
}

TEST(Train, RowsFollowCadence) {
  auto c = small_config();
  c.steps = 25;
  c.eval_every = 10;
  const auto rec = train(c);
  ASSERT_EQ(rec.rows.size(), 3u);
  EXPECT_EQ(rec.rows[0].step, 10);
  EXPECT_EQ(rec.rows[1].step, 20);
  EXPECT_EQ(rec.rows[2].step, 25);
  for (const auto& r : rec.rows) EXPECT_TRUE(r.eval_mi.has_value());

  c.log_every = 5;
  const auto dense = train(c);
  ASSERT_EQ(dense.rows.size(), 5u);
  EXPECT_FALSE(dense.rows[0].eval_mi.has_value());
  EXPECT_TRUE(dense.rows[1].eval_mi.has_value());
  EXPECT_TRUE(dense.rows[4].eval_mi.has_value());
  EXPECT_FALSE(dense.rows[2].eval_mi.has_value());
}

TEST(Train, HeaderMatchesOracleAndStepsIncrease) {
  const auto c = small_config(EstimatorTag::flatnce);
  const auto rec = train(c);
  EXPECT_EQ(rec.header.true_mi, true_mi(c.dataset));
  EXPECT_EQ(rec.header.log_k, std::log(32.0));
  EXPECT_EQ(rec.header.status, RunStatus::completed);
  for (std::size_t i = 1; i < rec.rows.size(); ++i) EXPECT_LT(rec.rows[i - 1].step, rec.rows[i].step);
  for (const auto& r : rec.rows) {
    EXPECT_NEAR(r.train_loss, 1.0, 1e-12);
    EXPECT_LE(*r.eval_mi, std::log(256.0));
    EXPECT_LE(r.batch_mi_estimate, std::log(32.0) + 1e-12);
  }
}

TEST(Train, EveryEstimatorRuns) {
  for (auto tag : {EstimatorTag::infonce, EstimatorTag::infonce_naive, EstimatorTag::flatnce, EstimatorTag::flatnce_plus,
                   EstimatorTag::holder_flatnce, EstimatorTag::dv, EstimatorTag::nwj, EstimatorTag::flo}) {
    auto c = small_config(tag);
    c.estimator.gamma = 2.0;
    const auto rec = train(c);
    EXPECT_EQ(rec.header.status, RunStatus::completed) << to_string(tag) << ": " << rec.header.message;
    EXPECT_EQ(rec.dual.has_value(), tag == EstimatorTag::flo);
  }
}

TEST(Train, EveryCriticAndPrecisionRuns) {
  for (auto critic : {CriticKind::bilinear, CriticKind::separable, CriticKind::joint}) {
    for (auto prec : {Precision::f64, Precision::f32}) {
      auto c = small_config(EstimatorTag::flatnce);
      c.critic = critic;
      c.precision = prec;
      c.steps = 20;
      const auto rec = train(c);
      EXPECT_EQ(rec.header.status, RunStatus::completed) << to_string(critic) << " " << to_string(prec);
    }
  }
}

TEST(Train, SchedulerMovesBeta) {
  auto c = small_config(EstimatorTag::flatnce);
  c.beta_policy = BetaPolicy::scheduler;
  c.scheduler.mode = SchedulerMode::negative_feedback;
  c.scheduler.target_start = c.scheduler.target_end = 0.05;
  c.scheduler.rate = 0.05;
  const auto rec = train(c);
  EXPECT_GT(rec.rows.back().beta, 1.0);
  EXPECT_EQ(rec.critic.beta, std::clamp(rec.critic.beta, kBetaFloor, kBetaCeiling));
}

TEST(Train, DeterministicRecords) {
  const auto c = small_config(EstimatorTag::flatnce);
  const auto a = train(c), b = train(c);
  EXPECT_EQ(to_jsonl(a), to_jsonl(b));
  EXPECT_EQ(a.critic, b.critic);
  auto d = c;
  d.seed = 1;
  d.dataset.seed = 1;
  EXPECT_NE(to_jsonl(train(d)), to_jsonl(a));
}

TEST(Train, EvalCadenceDoesNotPerturbTraining) {
  auto c = small_config();
  const auto a = train(c);
  c.eval_every = 40;
  const auto b = train(c);
  EXPECT_EQ(a.critic, b.critic);
}

TEST(Train, DivergenceIsRecorded) {
  auto c = small_config(EstimatorTag::dv);
  c.beta = 1000.0;
  c.optimizer = {OptimizerKind::sgd, 10.0};
  const auto rec = train(c);
  EXPECT_EQ(rec.header.status, RunStatus::diverged);
  ASSERT_TRUE(rec.header.failed_step.has_value());
  EXPECT_GE(*rec.header.failed_step, 1);
  EXPECT_FALSE(rec.header.message.empty());
}

TEST(Train, RejectsBadConfig) {
  auto c = small_config();
  c.batch_size = 1;
  EXPECT_THROW(train(c), std::invalid_argument);
  c = small_config();
  c.steps = 0;
  EXPECT_THROW(train(c), std::invalid_argument);
}

TEST(TrainEndToEnd, InfoNceRecoversLowMi) {
  TrainConfig c;
  c.dataset = {DatasetKind::correlated_gaussian, 1, 0.9};
  c.estimator = {EstimatorTag::infonce};
  c.batch_size = 128;
  c.steps = 3000;
  c.eval_every = 1000;
  c.k_eval = 4096;
  const auto rec = train(c);
  ASSERT_EQ(rec.header.status, RunStatus::completed);
  EXPECT_NEAR(*rec.rows.back().eval_mi, 0.8304, 0.1);
}

TEST(TrainProperty, BoundsHoldOnHeldOutBatches) {
  // A trained critic's infonce and nwj estimates do not exceed the true MI by more than
  // three standard errors.
  TrainConfig c;
  c.dataset = {DatasetKind::correlated_gaussian, 1, 0.8};
  c.estimator = {EstimatorTag::infonce};
  c.batch_size = 128;
  c.steps = 1500;
  c.eval_every = 1500;
  c.k_eval = 512;
  const auto rec = train(c);
  const ScoreFn score = [&](const Matrix<double>& x, const Matrix<double>& y) { return score_batch(rec.critic, x, y); };
  for (auto tag : {EstimatorTag::infonce, EstimatorTag::nwj}) {
    Rng rng(99, streams::eval);
    const auto s = estimate_batches(score, {tag}, c.dataset, 256, 100, rng);
    EXPECT_LE(s.mean, true_mi(c.dataset) + 3.0 * s.stderr_) << to_string(tag);
  }
}

TEST(TrainProperty, FlatNceGradientNormShrinks) {
  std::vector<double> first, last;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig c;
    c.dataset = {DatasetKind::correlated_gaussian, 1, 0.5, 1.0, seed};
    c.critic = CriticKind::bilinear;
    c.estimator = {EstimatorTag::flatnce};
    c.batch_size = 128;
    c.steps = 2000;
    c.eval_every = 2000;
    c.k_eval = 256;
    c.seed = seed;
    std::vector<double> norms;
    train(c, [&](const StepInfo& s) { norms.push_back(s.grad_norm); });
    const std::size_t tenth = norms.size() / 10;
    first.push_back(median({norms.begin(), norms.begin() + static_cast<std::ptrdiff_t>(tenth)}));
    last.push_back(median({norms.end() - static_cast<std::ptrdiff_t>(tenth), norms.end()}));
  }
  EXPECT_LT(median(last), median(first));
}

TEST(TrainProperty, FlatNceBatchGradientPointsAlongLargeBatchGradient) {
  // Bilinear critic s = X W Yᵀ: ∂L/∂W = Xᵀ G Y with G = ∂L/∂s. For flatnce,
  // G_ij = w_ij / K off the diagonal and −1/K on it.
  const DatasetSpec spec{DatasetKind::correlated_gaussian, 2, 0.7};
  Rng init(3);
  const auto critic = make_critic(CriticKind::bilinear, 2, 2, 2, init);
  auto grad_w = [&](const Batch& b) {
    const auto s = score_batch(critic, b.xs, b.ys);
    const std::size_t K = s.rows();
    const auto w = negative_weights(s);
    Matrix<double> G(K, K);
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0, c = 0; j < K; ++j) G(i, j) = (j == i ? -1.0 : w(i, c++)) / static_cast<double>(K);
    return matmul(matmul(transpose(b.xs), G), b.ys);
  };
  // Cross-check the closed form against the tape once.
  {
    Rng rng(4);
    const auto b = sample_batch(spec, 16, rng);
    Tape<double> t;
    auto bc = bind(t, critic);
    t.backward(flatnce::flatnce(score_batch(t, bc, b.xs, b.ys)).loss);
    EXPECT_LT(max_abs(sub(bc.grads(t)[0], grad_w(b))), 1e-12);
  }
  Rng rng(5);
  Matrix<double> avg(2, 2);
  for (int b = 0; b < 512; ++b) avg = add(avg, grad_w(sample_batch(spec, 128, rng)));
  const auto big = grad_w(sample_batch(spec, 4096, rng));
  EXPECT_GT(sum(mul(avg, big)).item(), 0.0);
}

TEST(Sweep, SingleConfigMatchesTrain) {
  const auto c = small_config();
  const auto s = sweep({c}, 1);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(to_jsonl(s[0]), to_jsonl(train(c)));
}

TEST(Sweep, DuplicateSeedsAreBitIdentical) {
  const auto c = small_config(EstimatorTag::flatnce);
  const auto s = sweep({c, c, c}, 3);
  EXPECT_EQ(to_jsonl(s[0]), to_jsonl(s[1]));
  EXPECT_EQ(to_jsonl(s[1]), to_jsonl(s[2]));
}

TEST(Sweep, FailedRunIsRecordedAndOthersContinue) {
  auto bad = small_config();
  bad.batch_size = 1;
  const auto s = sweep({small_config(), bad}, 2);
  EXPECT_EQ(s[0].header.status, RunStatus::completed);
  EXPECT_EQ(s[1].header.status, RunStatus::failed);
  EXPECT_THROW(sweep({}), std::invalid_argument);
}

TEST(Sweep, FlatNceAtLeastInfoNceAcrossBatchSizes) {
  std::vector<TrainConfig> grid;
  for (std::size_t K : {16, 64, 256}) {
    for (auto tag : {EstimatorTag::flatnce, EstimatorTag::infonce}) {
      TrainConfig c;
      c.dataset = {DatasetKind::correlated_gaussian, 20, rho_for_mi(6.0, 20)};
      c.estimator = {tag};
      c.batch_size = K;
      c.steps = 2000;
      c.eval_every = 2000;
      c.k_eval = 4096;
      grid.push_back(c);
    }
  }
  const auto recs = sweep(grid, 1);
  for (std::size_t i = 0; i < recs.size(); i += 2) {
    const double flat = recs[i].rows.back().eval_mi.value_or(-1e300);
    const double info = recs[i + 1].rows.back().eval_mi.value_or(-1e300);
    EXPECT_GE(flat, info) << "K=" << grid[i].batch_size;
  }
}

TEST(Records, JsonlRoundTrip) {
  auto c = small_config(EstimatorTag::flo);
  c.record_timing = true;
  const auto rec = train(c);
  std::istringstream in(to_jsonl(rec));
  const auto back = parse_jsonl(in);
  EXPECT_EQ(back.header, rec.header);
  EXPECT_EQ(back.rows, rec.rows);
}

TEST(Records, CsvHasOneLinePerRow) {
  const auto rec = train(small_config());
  const auto csv = to_csv(rec);
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), rec.rows.size() + 1);
  EXPECT_EQ(csv.rfind(std::string(kCsvHeader), 0), 0u);
}

TEST(Records, MalformedLineReportsLineNumber) {
  const auto rec = train(small_config());
  std::string text = to_jsonl(rec);
  text += "{not json\n";
  std::istringstream in(text);
  try {
    parse_jsonl(in);
    FAIL();
  } catch (const RecordParseError& e) {
    EXPECT_EQ(e.line_number, rec.rows.size() + 2);
  }
  std::istringstream empty("");
  EXPECT_THROW(parse_jsonl(empty), RecordParseError);
}

TEST(Records, ConfigHashDependsOnConfig) {
  auto a = small_config(), b = small_config();
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.optimizer.lr *= 2;
  EXPECT_NE(config_hash(a), config_hash(b));
}
