#include <gtest/gtest.h>

#include "flatnce/config.hpp"

using namespace flatnce;

TEST(Config, EmptyTextGivesDefaults) {
  EXPECT_EQ(parse_config(""), ExperimentConfig{});
}

TEST(Config, MinimalConfig) {
  const auto c = parse_config(R"(# five lines are enough
dataset: correlated_gaussian
dim: 20
true_mi: 6
estimator: flatnce
k: 32
)");
  EXPECT_EQ(c.train.dataset.dim, 20u);
  EXPECT_NEAR(true_mi(c.train.dataset), 6.0, 1e-12);
  EXPECT_EQ(c.train.estimator.tag, EstimatorTag::flatnce);
  EXPECT_EQ(c.train.batch_size, 32u);
}

TEST(Config, HolderGammaInlineAndSeparate) {
  EXPECT_EQ(parse_config("estimator: holder_flatnce:2.5").train.estimator.gamma, 2.5);
  EXPECT_EQ(parse_config("estimator: holder_flatnce\nholder_gamma: -2").train.estimator.gamma, -2.0);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("bogus_key: 1"), ConfigError);
  EXPECT_THROW(parse_config("estimator: bogus"), ConfigError);
  EXPECT_THROW(parse_config("k: [1, 2]"), ConfigError);
  EXPECT_THROW(parse_config("rho: 0.5\ntrue_mi: 1"), ConfigError);
  EXPECT_THROW(parse_config("k: 1"), ConfigError);
  EXPECT_THROW(parse_config("k: many"), ConfigError);
  EXPECT_THROW(parse_config("- a\n- b"), ConfigError);
  EXPECT_THROW(parse_config("dim: [unclosed"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/flatnce.yaml"), ConfigError);
}

TEST(ConfigProperty, SaveLoadRoundTrip) {
  Rng rng(1);
  const char* estimators[] = {"infonce", "flatnce", "holder_flatnce:0.3", "dv", "nwj", "flo", "flatnce_plus"};
  for (int trial = 0; trial < 200; ++trial) {
    ExperimentConfig c;
    auto& t = c.train;
    t.dataset.kind = static_cast<DatasetKind>(rng.next_u64() % 3);
    t.dataset.dim = 1 + rng.next_u64() % 30;
    t.dataset.rho = rng.uniform(-0.99, 0.99);
    t.dataset.sigma = rng.uniform(0.1, 3.0);
    t.critic = static_cast<CriticKind>(rng.next_u64() % 3);
    t.embed_dim = 1 + rng.next_u64() % 64;
    t.normalize = rng.uniform() < 0.5;
    t.estimator = *parse_estimator(estimators[rng.next_u64() % 7]);
    t.batch_size = 2 + rng.next_u64() % 500;
    t.optimizer.kind = rng.uniform() < 0.5 ? OptimizerKind::sgd : OptimizerKind::adam;
    t.optimizer.lr = rng.uniform(1e-6, 1e-1);
    t.optimizer.momentum = rng.uniform(0.0, 0.99);
    t.steps = 1 + static_cast<long>(rng.next_u64() % 100000);
    t.eval_every = 1 + static_cast<long>(rng.next_u64() % 1000);
    t.log_every = static_cast<long>(rng.next_u64() % 100);
    t.k_eval = 2 + rng.next_u64() % 8192;
    t.beta_policy = rng.uniform() < 0.5 ? BetaPolicy::fixed : BetaPolicy::scheduler;
    t.beta = rng.uniform(0.01, 100.0);
    t.scheduler.target_start = rng.uniform(0.05, 1.0);
    t.scheduler.target_end = rng.uniform(0.05, 1.0);
    t.scheduler.rate = rng.uniform(0.001, 0.5);
    t.scheduler.mode = rng.uniform() < 0.5 ? SchedulerMode::alg_s1_verbatim : SchedulerMode::negative_feedback;
    t.seed = rng.next_u64();
    t.dataset.seed = t.seed;
    t.precision = rng.uniform() < 0.5 ? Precision::f64 : Precision::f32;
    t.record_timing = rng.uniform() < 0.5;
    c.out_dir = "runs/trial " + std::to_string(trial);
    const auto text = save_config(c);
    const auto back = parse_config(text);
    EXPECT_EQ(back, c) << text;
    EXPECT_EQ(save_config(back), text);
  }
}
