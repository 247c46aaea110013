#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "fgl/trainer.hpp"
#include "support.hpp"

using namespace fgl;
using fgl::testing::TempDir;

namespace {

struct Toy {
  std::vector<ScenePair> pairs;
  RatioDensityModel prior;
  TrainingData data;
};

const Toy& toy() {
  static const Toy t = [] {
    Toy out;
    SceneConfig c;
    c.num_correspondences = 64;
    c.outlier_ratio_min = 0.5;
    c.outlier_ratio_max = 0.9;
    c.seed = 5;
    out.pairs = generate_dataset(c, 64);
    std::vector<double> r;
    std::vector<std::uint8_t> l;
    for (const auto& p : out.pairs) {
      r.insert(r.end(), p.lowe_ratios.begin(), p.lowe_ratios.end());
      l.insert(l.end(), p.labels.begin(), p.labels.end());
    }
    out.prior = fit_ratio_densities(r, l);
    out.data = prepare_training_data(out.pairs, out.prior, 8);
    return out;
  }();
  return t;
}

RunConfig toy_config(std::size_t iterations = 200) {
  RunConfig rc;
  rc.train.iterations = iterations;
  rc.train.batch_size = 8;
  rc.train.validation_interval = 50;
  rc.train.validation_pairs = 8;
  rc.train.seed = 3;
  rc.model.trunk_depth = 2;
  rc.model.refine_depth = 1;
  rc.model.channels = 8;
  rc.model.groups = 2;
  rc.model.reduction = 2;
  rc.model.eta3_warmup = 100;
  return rc;
}

std::string dump_log(const std::vector<LogRecord>& log) {
  std::string s;
  for (const auto& r : log) s += to_json(r).dump() + "\n";
  return s;
}

std::vector<LogRecord> run(const RunConfig& rc) {
  auto st = initial_state(rc);
  return train(st, rc, toy().data);
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  diff::ParameterSet ps;
  ps.add("w", diff::Array::row({1.0, -2.0}));
  auto st = AdamState::zeros(ps);
  adam_step(ps, diff::zero_gradients(ps), st, 1e-3);
  EXPECT_EQ(ps.value(0), diff::Array::row({1.0, -2.0}));
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  diff::ParameterSet ps;
  ps.add("w", diff::Array::row({0.5, 0.5}));
  auto st = AdamState::zeros(ps);
  adam_step(ps, {diff::Array::row({1.0, -1.0})}, st, 1e-3);
  EXPECT_NEAR(ps.value(0)[0], 0.5 - 1e-3, 1e-10);
  EXPECT_NEAR(ps.value(0)[1], 0.5 + 1e-3, 1e-10);
}

TEST(Adam, Deterministic) {
  diff::ParameterSet a, b;
  a.add("w", diff::Array::row({0.1, 0.2, 0.3}));
  b.add("w", diff::Array::row({0.1, 0.2, 0.3}));
  auto sa = AdamState::zeros(a), sb = AdamState::zeros(b);
  for (int k = 0; k < 5; ++k) {
    const diff::Gradients g{diff::Array::row({0.3 * k, -0.1, 2.0})};
    adam_step(a, g, sa, 1e-2);
    adam_step(b, g, sb, 1e-2);
  }
  EXPECT_EQ(a.value(0), b.value(0));
  EXPECT_EQ(sa.m, sb.m);
  EXPECT_EQ(sa.v, sb.v);
}

TEST(Adam, NonFiniteGradientRejected) {
  diff::ParameterSet ps;
  ps.add("w", diff::Array::row({1.0}));
  auto st = AdamState::zeros(ps);
  EXPECT_THROW(adam_step(ps, {diff::Array::row({std::nan("")})}, st, 1e-3), NumericError);
  EXPECT_THROW(adam_step(ps, {diff::Array::row({1.0, 2.0})}, st, 1e-3), ShapeError);
}

TEST(GradientClip, ScalesToMaximumNorm) {
  diff::Gradients g{diff::Array::row({12.0, 16.0})};
  EXPECT_DOUBLE_EQ(clip_by_global_norm(g, 10.0), 20.0);
  EXPECT_DOUBLE_EQ(g[0][0], 6.0);
  EXPECT_DOUBLE_EQ(g[0][1], 8.0);
  diff::Gradients small{diff::Array::row({0.3, 0.4})};
  clip_by_global_norm(small, 10.0);
  EXPECT_EQ(small[0], diff::Array::row({0.3, 0.4}));
}

TEST(RunConfigText, ParsesKeys) {
  const auto rc = parse_run_config(
      "# toy\n"
      "learning_rate = 0.002\n"
      "batch_size = 4   # small\n"
      "total_iterations = 300\n"
      "eta3_warmup_iterations = 30\n"
      "seed = 11\n"
      "channels = 16\n"
      "trunk_depth = 4\n"
      "refine_depth = 1\n"
      "stage_guidance = 4, 3, 1.5\n"
      "loss = ib_ce\n"
      "cascaded = false\n");
  EXPECT_DOUBLE_EQ(rc.train.learning_rate, 0.002);
  EXPECT_EQ(rc.train.batch_size, 4u);
  EXPECT_EQ(rc.train.iterations, 300u);
  EXPECT_EQ(rc.train.seed, 11u);
  EXPECT_EQ(rc.model.eta3_warmup, 30u);
  EXPECT_EQ(rc.model.channels, 16u);
  EXPECT_EQ(rc.model.trunk_depth, 4u);
  EXPECT_EQ(rc.model.stage_guidance, (std::vector<double>{4.0, 3.0, 1.5}));
  EXPECT_EQ(rc.model.loss, LossKind::ib_ce);
  EXPECT_FALSE(rc.model.cascaded);
}

TEST(RunConfigText, RejectsBadInput) {
  EXPECT_THROW(parse_run_config("trunk_blocks = 3\n"), UsageError);
  EXPECT_THROW(parse_run_config("learning_rate = fast\n"), UsageError);
  EXPECT_THROW(parse_run_config("learning_rate = -1\n"), UsageError);
  EXPECT_THROW(parse_run_config("batch_size = 0\n"), UsageError);
  EXPECT_THROW(parse_run_config("just words\n"), UsageError);
  EXPECT_THROW(parse_run_config("loss = focal\n"), UsageError);
  EXPECT_THROW(read_run_config("/nonexistent/run.cfg"), DataError);
}

TEST(BatchSampling, DeterministicPerIteration) {
  const auto a = sample_batch(7, 12, 16, 100);
  EXPECT_EQ(a, sample_batch(7, 12, 16, 100));
  EXPECT_NE(a, sample_batch(7, 13, 16, 100));
  EXPECT_NE(a, sample_batch(8, 12, 16, 100));
  for (auto i : a) EXPECT_LT(i, 100u);
}

TEST(TrainingDataSplit, HoldsOutTailAndDropsUnusablePairs) {
  auto pairs = toy().pairs;
  std::fill(pairs[3].labels.begin(), pairs[3].labels.end(), std::uint8_t{1});
  const auto d = prepare_training_data(pairs, toy().prior, 10);
  EXPECT_EQ(d.validation.size(), 10u);
  EXPECT_EQ(d.train.size(), 53u);
  EXPECT_EQ(d.validation.back(), pairs.back());
  EXPECT_EQ(d.validation.front(), pairs[54]);
  EXPECT_EQ(d.train_prior.size(), d.train.size());
  EXPECT_EQ(d.train_prior[0].size(), d.train[0].size());
}

TEST(LogFormat, RecordKeys) {
  LogRecord r;
  r.iteration = 4;
  r.loss = 0.5;
  r.lambda = {0.2, std::nullopt, 0.7};
  const auto j = to_json(r);
  for (const char* k : {"iteration", "loss", "lambda_stage1", "lambda_stage2", "lambda_stage3", "val_precision",
                        "val_recall", "val_f2"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_TRUE(j["lambda_stage2"].is_null());
  EXPECT_TRUE(j["val_f2"].is_null());
}

TEST(Training, SmokeRunReducesLoss) {
  const auto log = run(toy_config());
  ASSERT_EQ(log.size(), 200u);
  double first = 0, last = 0;
  for (std::size_t k = 0; k < 20; ++k) {
    first += log[k].loss / 20;
    last += log[180 + k].loss / 20;
  }
  EXPECT_LT(last, first);
  std::size_t validations = 0;
  for (const auto& r : log) validations += r.validation ? 1 : 0;
  EXPECT_EQ(validations, 4u);
  for (const auto& r : log) {
    for (const auto& l : r.lambda) {
      ASSERT_TRUE(l.has_value());
      EXPECT_GT(*l, 0.0);
      EXPECT_LT(*l, 1.0);
    }
  }
}

TEST(Training, PerPairWeightsInsideUnitIntervalUnlessFallback) {
  const auto rc = toy_config();
  const auto st = initial_state(rc);
  const auto& d = toy().data;
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const auto step = pair_step(st.model, d.train[i], d.train_prior[i], 0);
    for (const auto& w : step.weights) {
      if (w.fallback) {
        EXPECT_EQ(w.lambda, 0.5);
      } else {
        EXPECT_GT(w.lambda, 0.0);
        EXPECT_LT(w.lambda, 1.0);
      }
      EXPECT_DOUBLE_EQ(w.lambda + w.mu, 1.0);
    }
  }
}

TEST(Training, GuidedLambdaMovesAndFixedStaysAtHalf) {
  auto rc = toy_config();
  const auto guided = run(rc);
  std::set<double> seen;
  for (const auto& r : guided) seen.insert(*r.lambda[2]);
  EXPECT_GT(seen.size(), 10u);

  rc.model.loss = LossKind::ib_ce;
  for (const auto& r : run(rc)) {
    for (const auto& l : r.lambda) EXPECT_EQ(*l, 0.5);
  }
}

TEST(Training, DeterministicLogAndCheckpoint) {
  TempDir dir("train_det");
  const auto rc = toy_config(60);
  auto a = initial_state(rc);
  auto b = initial_state(rc);
  const auto la = train(a, rc, toy().data);
  const auto lb = train(b, rc, toy().data);
  EXPECT_EQ(dump_log(la), dump_log(lb));
  save_training_checkpoint(dir.path() / "a.bin", a, rc, toy().prior);
  save_training_checkpoint(dir.path() / "b.bin", b, rc, toy().prior);
  EXPECT_EQ(detail::read_file(dir.path() / "a.bin"), detail::read_file(dir.path() / "b.bin"));
}

TEST(Training, ThreadCountDoesNotChangeResults) {
  auto rc = toy_config(30);
  const auto one = dump_log(run(rc));
  rc.train.threads = 3;
  EXPECT_EQ(dump_log(run(rc)), one);
}

TEST(Training, ResumeIsBitIdentical) {
  TempDir dir("train_resume");
  const auto rc = toy_config(120);
  auto full = initial_state(rc);
  const auto full_log = train(full, rc, toy().data);

  auto first = rc;
  first.train.iterations = 70;
  auto part = initial_state(first);
  train(part, first, toy().data);
  save_training_checkpoint(dir.path() / "ckpt.bin", part, first, toy().prior);

  auto loaded = load_training_checkpoint(dir.path() / "ckpt.bin");
  EXPECT_EQ(loaded.state.next_iteration, 70u);
  EXPECT_EQ(loaded.prior, toy().prior);
  auto resumed_rc = loaded.config;
  resumed_rc.train.iterations = 120;
  const auto rest = train(loaded.state, resumed_rc, toy().data);
  ASSERT_EQ(rest.size(), 50u);
  EXPECT_EQ(dump_log(rest), dump_log(std::vector<LogRecord>(full_log.begin() + 70, full_log.end())));
  for (std::size_t p = 0; p < full.model.params.size(); ++p) {
    EXPECT_EQ(loaded.state.model.params.value(p), full.model.params.value(p));
  }
  EXPECT_EQ(loaded.state.model.running, full.model.running);
  EXPECT_EQ(loaded.state.adam.step, full.adam.step);
}

TEST(Training, MissingCheckpointIsDataError) {
  EXPECT_THROW(load_training_checkpoint("/nonexistent/ckpt.bin"), DataError);
}

TEST(Training, RegressionTermEntersAtWarmup) {
  auto rc = toy_config();
  rc.model.eta3 = 0.1;
  rc.model.eta3_warmup = 40;
  auto st = initial_state(rc);
  // Train a little so enough final weights are positive for the solve.
  rc.train.iterations = 40;
  train(st, rc, toy().data);
  const auto& d = toy().data;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const auto before = pair_step(st.model, d.train[i], d.train_prior[i], 39);
    const auto after = pair_step(st.model, d.train[i], d.train_prior[i], 40);
    diff::Graph g(&st.model.params);
    const auto out = forward_cascade(st.model, g, d.train[i].correspondences, d.train_prior[i]);
    if (!out.essential_row) {
      EXPECT_EQ(after.loss, before.loss);
      continue;
    }
    const double reg = essential_regression_loss(essential_from_row(out.essential_row->value()), d.train[i].gt_essential);
    EXPECT_NEAR(after.loss - before.loss, 0.1 * reg, 1e-12);
    ++checked;
  }
  EXPECT_GT(checked, 0u);
}
