#include <gtest/gtest.h>

#include <cmath>

#include "test_helpers.hpp"

using namespace sotalign;
namespace tk = sotalign::testkit;

namespace {

PairedDataset pairs(const Matrix& a, const Matrix& b) { return PairedDataset(EmbeddingMatrix(a), EmbeddingMatrix(b)); }

UnpairedPool pool_of(const Matrix& x, const Matrix& y) { return UnpairedPool{EmbeddingMatrix(x), EmbeddingMatrix(y)}; }

bool same_aligner(const Aligner& a, const Aligner& b) {
  return a.w_f == b.w_f && a.w_g == b.w_g && a.siglip.scale == b.siglip.scale && a.siglip.bias == b.siglip.bias;
}

/// Small synthetic problem shared by the training tests.
struct Problem {
  SynthData data;
  PairedDataset paired;
  UnpairedPool pool;

  explicit Problem(std::uint64_t seed, double shift = 0.0)
      : data(make_synthetic(SynthConfig{8, 12, 10, 40, 200, 50, 0.2, false, shift, seed})),
        paired(pairs(data.paired_x, data.paired_y)),
        pool(pool_of(data.unpaired_x, data.unpaired_y)) {}
};

}  // namespace

TEST(Lion, SignUpdateSubtractsLearningRate) {
  Rng rng(1);
  Matrix p = rng.normal_matrix(3, 4);
  const Matrix p0 = p;
  Matrix m = Matrix::Zero(3, 4);
  const Matrix g = rng.normal_matrix(3, 4).cwiseAbs().array() + 0.1;
  lion_step(p, g, m, LionHyper{1e-3, 0.9, 0.99, 0.0});
  EXPECT_LT(((p0 - p).array() - 1e-3).abs().maxCoeff(), 1e-15);
  EXPECT_LT((m - 0.01 * g).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Lion, UpdateInvariantToGradientScale) {
  Rng rng(2);
  const Matrix p0 = rng.normal_matrix(4, 4);
  const Matrix g = rng.normal_matrix(4, 4);
  Matrix p1 = p0, p2 = p0, m1 = Matrix::Zero(4, 4), m2 = Matrix::Zero(4, 4);
  lion_step(p1, g, m1, LionHyper{1e-2, 0.9, 0.99, 0.0});
  lion_step(p2, 100.0 * g, m2, LionHyper{1e-2, 0.9, 0.99, 0.0});
  EXPECT_TRUE(p1 == p2);
}

TEST(Lion, PureDecayAndZeroSign) {
  Rng rng(3);
  Matrix p = rng.normal_matrix(2, 5);
  const Matrix p0 = p;
  Matrix m = Matrix::Zero(2, 5);
  lion_step(p, Matrix::Zero(2, 5), m, LionHyper{1e-4, 0.9, 0.99, 1e-5});
  EXPECT_LT((p - p0 * (1.0 - 1e-9)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(detail::sign(0.0), 0.0);
  EXPECT_EQ(detail::sign(-3.0), -1.0);

  double s = 2.0, ms = 0.0;
  lion_step(s, 0.0, ms, LionHyper{0.1, 0.9, 0.99, 0.0});
  EXPECT_EQ(s, 2.0);
  EXPECT_THROW(lion_step(p, Matrix::Zero(3, 5), m, LionHyper{}), DimensionError);
}

TEST(CosineLr, ScheduleValues) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-4), 1e-4);
  EXPECT_NEAR(cosine_lr(100, 100, 1e-4), 0.0, 1e-20);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-4), 5e-5, 1e-18);
  EXPECT_THROW(cosine_lr(101, 100, 1e-4), ParameterError);
  EXPECT_THROW(cosine_lr(-1, 100, 1e-4), ParameterError);
}

TEST(AlignerGradient, MatchesFiniteDifferencesForEveryParameter) {
  Rng rng(4);
  const Matrix a = detail::normalize_rows(rng.normal_matrix(3, 3));
  const Matrix b = detail::normalize_rows(rng.normal_matrix(3, 4));
  const Matrix x = detail::normalize_rows(rng.normal_matrix(4, 3));
  const Matrix y = detail::normalize_rows(rng.normal_matrix(4, 4));
  const Matrix k_star = tk::random_affinity(4, rng);
  Aligner al;
  al.w_f = rng.normal_matrix(2, 3);
  al.w_g = rng.normal_matrix(2, 4);
  al.siglip = {5.0, -2.0};

  for (auto kind : {DivergenceKind::klot, DivergenceKind::infonce, DivergenceKind::cka}) {
    TrainConfig cfg;
    cfg.alpha = 0.7;
    cfg.div.kind = kind;
    cfg.div.epsilon = 0.5;
    cfg.div.epsilon_star = 0.1;
    cfg.div.sinkhorn = SinkhornOptions{1e-13, 100000};
    const AlignerGradient g = aligner_gradient(al, a, b, x, y, k_star, cfg);
    auto total_with = [&](const Aligner& p) { return aligner_gradient(p, a, b, x, y, k_star, cfg).loss.total; };

    const Matrix fd_f = fd_gradient(
        [&](const Matrix& w) {
          Aligner p = al;
          p.w_f = w;
          return total_with(p);
        },
        al.w_f, 1e-5);
    const Matrix fd_g = fd_gradient(
        [&](const Matrix& w) {
          Aligner p = al;
          p.w_g = w;
          return total_with(p);
        },
        al.w_g, 1e-5);
    EXPECT_LT(tk::rel_error(g.w_f, fd_f), 1e-3) << to_string(kind);
    EXPECT_LT(tk::rel_error(g.w_g, fd_g), 1e-3) << to_string(kind);

    const double h = 1e-6;
    Aligner up = al, down = al;
    up.siglip.scale += h;
    down.siglip.scale -= h;
    EXPECT_NEAR(g.scale, (total_with(up) - total_with(down)) / (2 * h), 1e-3 * std::max(1.0, std::abs(g.scale)));
    up = al, down = al;
    up.siglip.bias += h;
    down.siglip.bias -= h;
    EXPECT_NEAR(g.bias, (total_with(up) - total_with(down)) / (2 * h), 1e-3 * std::max(1.0, std::abs(g.bias)));
    EXPECT_EQ(g.loss.total, g.loss.supervised + cfg.alpha * g.loss.regularizer);
  }
}

TEST(TrainStep, AlphaZeroIgnoresUnpairedBatch) {
  const Problem pr(5);
  const LinearTeacher teacher = fit_procrustes(pr.paired, 8);
  TrainConfig cfg;
  cfg.alpha = 0.0;
  cfg.d = 6;
  cfg.n_steps = 10;
  cfg.lr_max = 1e-2;
  const Aligner al = init_aligner(pr.paired, teacher, cfg);
  const OptimizerState st = OptimizerState::zeros_like(al);
  const Batch b1 = sample_batch(pr.paired, pr.pool, 40, 16, 16, 1);
  const Batch b2 = sample_batch(pr.paired, pr.pool, 40, 16, 16, 2);
  ASSERT_NE(b1.unpaired_x_idx, b2.unpaired_x_idx);
  Batch b2_same_pairs = b2;
  b2_same_pairs.paired_idx = b1.paired_idx;
  const StepResult r1 = train_step(al, b1, TrainData{pr.paired, pr.pool}, teacher, cfg, st, 0);
  const StepResult r2 = train_step(al, b2_same_pairs, TrainData{pr.paired, pr.pool}, teacher, cfg, st, 0);
  EXPECT_TRUE(same_aligner(r1.aligner, r2.aligner));
  EXPECT_EQ(r1.loss.regularizer, 0.0);
}

TEST(TrainStep, TotalIsSupervisedPlusWeightedRegularizer) {
  const Problem pr(6);
  const LinearTeacher teacher = fit_procrustes(pr.paired, 8);
  TrainConfig cfg;
  cfg.alpha = 0.3;
  cfg.d = 6;
  cfg.n_steps = 10;
  const Aligner al = init_aligner(pr.paired, teacher, cfg);
  const Batch batch = sample_batch(pr.paired, pr.pool, 40, 16, 16, 3);
  const StepResult r =
      train_step(al, batch, TrainData{pr.paired, pr.pool}, teacher, cfg, OptimizerState::zeros_like(al), 0);
  EXPECT_EQ(r.loss.total, r.loss.supervised + cfg.alpha * r.loss.regularizer);
  EXPECT_GT(r.loss.regularizer, 0.0);

  TrainConfig doubled = cfg;
  doubled.alpha = 2.0 * cfg.alpha;
  const StepResult r2 =
      train_step(al, batch, TrainData{pr.paired, pr.pool}, teacher, doubled, OptimizerState::zeros_like(al), 0);
  EXPECT_EQ(r2.loss.total - r2.loss.supervised, 2.0 * (r.loss.total - r.loss.supervised));
  EXPECT_EQ(doubled.alpha * r2.loss.regularizer, 2.0 * (cfg.alpha * r.loss.regularizer));
}

TEST(TrainStep, RejectsMismatchedAligner) {
  const Problem pr(7);
  const LinearTeacher teacher = fit_procrustes(pr.paired, 8);
  TrainConfig cfg;
  cfg.d = 4;
  Aligner al = init_aligner(pr.paired, teacher, cfg);
  al.w_f = Matrix::Zero(4, 5);
  const Batch batch = sample_batch(pr.paired, pr.pool, 10, 4, 4, 0);
  EXPECT_THROW(
      train_step(al, batch, TrainData{pr.paired, pr.pool}, teacher, cfg, OptimizerState::zeros_like(al), 0),
      DimensionError);
}

TEST(TrainSotalign, SingleStepIsDeterministic) {
  const Problem pr(8);
  TrainConfig cfg;
  cfg.n_steps = 1;
  cfg.d = 16;
  cfg.batch_unpaired_x = cfg.batch_unpaired_y = 32;
  cfg.seed = 11;
  const TrainReport r1 = train_sotalign(pr.paired, pr.pool, TeacherKind::procrustes, cfg);
  const TrainReport r2 = train_sotalign(pr.paired, pr.pool, TeacherKind::procrustes, cfg);
  ASSERT_EQ(r1.steps.size(), 1u);
  EXPECT_EQ(r1.steps[0].loss.total, r2.steps[0].loss.total);
  EXPECT_EQ(r1.steps[0].loss.regularizer, r2.steps[0].loss.regularizer);
  EXPECT_TRUE(same_aligner(r1.aligner, r2.aligner));
  EXPECT_EQ(r1.seed, 11u);
}

TEST(TrainSotalign, AlphaZeroIsIndependentOfPool) {
  const Problem pr(9);
  const Problem other(10, 0.8);
  TrainConfig cfg;
  cfg.alpha = 0.0;
  cfg.n_steps = 20;
  cfg.d = 16;
  cfg.batch_paired = 16;
  const TrainReport r1 = train_sotalign(pr.paired, pr.pool, TeacherKind::procrustes, cfg);
  const TrainReport r2 = train_sotalign(pr.paired, other.pool, TeacherKind::procrustes, cfg);
  EXPECT_TRUE(same_aligner(r1.aligner, r2.aligner));
  for (std::size_t i = 0; i < r1.steps.size(); ++i) EXPECT_EQ(r1.steps[i].loss.total, r2.steps[i].loss.total);
}

TEST(TrainSotalign, InitialSupervisedTermIsAboutTenPerPositive) {
  const Problem pr(11);
  TrainConfig cfg;
  cfg.alpha = 0.0;
  cfg.n_steps = 1;
  cfg.d = 1024;
  const TrainReport r = train_sotalign(pr.paired, pr.pool, TeacherKind::procrustes, cfg);
  EXPECT_NEAR(r.steps[0].loss.supervised, 10.0, 0.5);
}

TEST(TrainSotalign, LossesFiniteAndDecreasing) {
  const Problem pr(12);
  TrainConfig cfg;
  cfg.alpha = 1.0;
  cfg.n_steps = 100;
  cfg.d = 32;
  cfg.lr_max = 3e-3;
  cfg.batch_unpaired_x = cfg.batch_unpaired_y = 64;
  for (auto kind : {DivergenceKind::klot, DivergenceKind::infonce, DivergenceKind::cka}) {
    cfg.div.kind = kind;
    const TrainReport r = train_sotalign(pr.paired, pr.pool, TeacherKind::procrustes, cfg);
    for (const StepRecord& s : r.steps) {
      ASSERT_TRUE(std::isfinite(s.loss.total)) << to_string(kind) << " step " << s.step;
      ASSERT_TRUE(std::isfinite(s.loss.regularizer));
    }
    EXPECT_LT(r.steps.back().loss.supervised, r.steps.front().loss.supervised) << to_string(kind);
    EXPECT_TRUE(r.aligner.w_f.allFinite());
  }
}

TEST(TrainSotalign, TeacherInitAndValidation) {
  const Problem pr(13);
  TrainConfig cfg;
  cfg.d = 8;
  cfg.init_from_teacher = true;
  const LinearTeacher teacher = fit_procrustes(pr.paired, 8);
  const Aligner al = init_aligner(pr.paired, teacher, cfg);
  EXPECT_TRUE(al.w_f == teacher.w_x);
  cfg.alpha = -1.0;
  EXPECT_THROW(train_with_teacher(pr.paired, pr.pool, teacher, cfg), ParameterError);
  cfg.alpha = 1.0;
  cfg.n_steps = 0;
  EXPECT_THROW(train_with_teacher(pr.paired, pr.pool, teacher, cfg), ParameterError);
  cfg.n_steps = 1;
  cfg.batch_unpaired_x = 10;
  cfg.batch_unpaired_y = 12;
  EXPECT_THROW(train_with_teacher(pr.paired, pr.pool, teacher, cfg), ParameterError);
}

TEST(Serialization, AlignerRoundTripIsBitExact) {
  const Problem pr(14);
  TrainConfig cfg;
  cfg.d = 5;
  Aligner al = init_aligner(pr.paired, fit_procrustes(pr.paired, 8), cfg);
  al.siglip = {19.875, -10.125};
  const auto dir = tk::scratch_dir("aligner");
  save_aligner(dir / "a.sotc", al);
  const Aligner back = load_aligner(dir / "a.sotc");
  EXPECT_TRUE(same_aligner(al, back));
  EXPECT_TRUE(back.pre_x.mean == al.pre_x.mean);
  EXPECT_TRUE(back.pre_y.mean == al.pre_y.mean);
  EXPECT_THROW(load_teacher(dir / "a.sotc"), FormatError);
}

TEST(Synth, NoiselessIdentityMapsGiveIdenticalPairs) {
  SynthConfig cfg;
  cfg.latent_dim = cfg.d_x = cfg.d_y = 6;
  cfg.identity_maps = true;
  cfg.noise_std = 0.0;
  cfg.n_pairs = 30;
  cfg.n_unpaired = 20;
  cfg.n_heldout = 10;
  const SynthData d = make_synthetic(cfg);
  EXPECT_TRUE(d.paired_x == d.paired_y);
  EXPECT_TRUE(d.heldout_x == d.heldout_y);
  EXPECT_FALSE(d.unpaired_x == d.unpaired_y);
}

TEST(Synth, SeedDeterminismAndValidation) {
  SynthConfig cfg;
  cfg.n_unpaired = 100;
  cfg.seed = 3;
  const SynthData a = make_synthetic(cfg), b = make_synthetic(cfg);
  EXPECT_TRUE(a.paired_x == b.paired_x && a.unpaired_y == b.unpaired_y && a.heldout_x == b.heldout_x);
  cfg.seed = 4;
  EXPECT_FALSE(make_synthetic(cfg).paired_x == a.paired_x);
  cfg.pool_shift = 1.5;
  EXPECT_THROW(make_synthetic(cfg), ParameterError);
  cfg.pool_shift = 0.0;
  cfg.identity_maps = true;
  EXPECT_THROW(make_synthetic(cfg), ParameterError);
}

TEST(Synth, PoolShiftMovesOnlyTheUnpairedLatents) {
  SynthConfig cfg;
  cfg.n_unpaired = 2000;
  cfg.seed = 5;
  const SynthData base = make_synthetic(cfg);
  cfg.pool_shift = 1.0;
  const SynthData shifted = make_synthetic(cfg);
  EXPECT_TRUE(base.paired_x == shifted.paired_x);
  EXPECT_TRUE(base.heldout_y == shifted.heldout_y);
  const double moved = (shifted.unpaired_x.colwise().mean() - base.unpaired_x.colwise().mean()).norm();
  EXPECT_GT(moved, 1.0);
}
