#include "sagd/attacks.hpp"

#include "sagd/geometry.hpp"
#include "sagd/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace sagd;

namespace {

// Linear softmax classifier with exact input gradients; scoring embedding is
// the L2-normalized raw input.
class LinearModel : public DifferentiableModel {
 public:
  LinearModel(Mat w, Vec b) : w_(std::move(w)), b_(std::move(b)) {}

  Mat logits(const Mat& x) override {
    return (x * w_.transpose()).rowwise() + b_.transpose();
  }
  Mat logits_input_grad(const Mat& grad_logits) override { return grad_logits * w_; }

  Mat scoring_embedding(const Mat& x) override {
    last_x_ = x;
    Mat z(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      z.row(i) = sphere_project_raw(x.row(i).transpose()).transpose();
    return z;
  }
  Mat scoring_input_grad(const Mat& grad_z) override {
    Mat g(last_x_.rows(), last_x_.cols());
    for (Eigen::Index i = 0; i < last_x_.rows(); ++i)
      g.row(i) = sphere_project_backward(last_x_.row(i).transpose(),
                                         grad_z.row(i).transpose())
                     .transpose();
    return g;
  }

 private:
  Mat w_;
  Vec b_;
  Mat last_x_;
};

class LogitsOnlyModel : public DifferentiableModel {
 public:
  Mat logits(const Mat& x) override { return Mat::Zero(x.rows(), 2); }
};

// Two separated blobs; W rows at the class means give a confident classifier.
struct BlobProblem {
  Mat x;
  std::vector<int> y;
  LinearModel model;
};

BlobProblem make_blobs(int n_per_class, double sep, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat x(2 * n_per_class, 2);
  std::vector<int> y;
  for (int i = 0; i < n_per_class; ++i) {
    x(i, 0) = sep + 0.3 * gauss(rng);
    x(i, 1) = 0.3 * gauss(rng);
    y.push_back(0);
  }
  for (int i = 0; i < n_per_class; ++i) {
    x(n_per_class + i, 0) = -sep + 0.3 * gauss(rng);
    x(n_per_class + i, 1) = 0.3 * gauss(rng);
    y.push_back(1);
  }
  Mat w(2, 2);
  w << sep, 0.0, -sep, 0.0;
  return {x, y, LinearModel(w, Vec::Zero(2))};
}

AttackConfig wide_range_cfg() {
  AttackConfig cfg;
  cfg.input_range = {-100.0, 100.0};
  return cfg;
}

double accuracy(DifferentiableModel& model, const Mat& x, const std::vector<int>& y) {
  const Mat h = model.logits(x);
  int correct = 0;
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    Eigen::Index pred = 0;
    h.row(i).maxCoeff(&pred);
    if (static_cast<int>(pred) == y[static_cast<size_t>(i)]) ++correct;
  }
  return double(correct) / double(h.rows());
}

void expect_ball_and_range(const AdversarialBatch& b, const AttackConfig& cfg) {
  EXPECT_LE((b.perturbed - b.clean).lpNorm<Eigen::Infinity>(), cfg.epsilon + 1e-6);
  EXPECT_GE(b.perturbed.minCoeff(), cfg.input_range[0] - 1e-12);
  EXPECT_LE(b.perturbed.maxCoeff(), cfg.input_range[1] + 1e-12);
}

}  // namespace

TEST(RescaleSoftmax, EqualLogitsAreUniform) {
  for (double t : {0.5, -3.0, 100.0}) {
    const Vec out = rescale_softmax(Vec::Constant(4, t), 10.0);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(out(i), 0.25, 1e-12);
  }
  // Zero logits hit the 1e-12 guard and stay uniform.
  const Vec zero_out = rescale_softmax(Vec::Zero(3), 10.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(zero_out(i), 1.0 / 3.0, 1e-12);
}

TEST(RescaleSoftmax, HandValueAlphaTen) {
  Vec h(2);
  h << 1.0, 0.0;
  const Vec out = rescale_softmax(h, 10.0);
  EXPECT_NEAR(out(0), 1.0 / (1.0 + std::exp(-10.0)), 1e-9);
  EXPECT_NEAR(out(1), std::exp(-10.0) / (1.0 + std::exp(-10.0)), 1e-12);
  EXPECT_NEAR(out.sum(), 1.0, 1e-9);
}

TEST(RescaleSoftmax, PositiveScaleInvariant) {
  Rng rng(3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.1, 50.0);
  for (int t = 0; t < 200; ++t) {
    Vec h(5);
    for (int i = 0; i < 5; ++i) h(i) = gauss(rng);
    const Vec a = rescale_softmax(h, 10.0);
    const Vec b = rescale_softmax(Vec(scale(rng) * h), 10.0);
    EXPECT_LT((a - b).lpNorm<Eigen::Infinity>(), 1e-9);
  }
  EXPECT_THROW(rescale_softmax(Vec::Constant(2, std::nan("")), 10.0),
               ContractViolation);
}

TEST(RescaleSoftmax, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double h = 1e-7;
  for (int t = 0; t < 30; ++t) {
    Vec logits(4), cot(4);
    for (int i = 0; i < 4; ++i) {
      logits(i) = gauss(rng);
      cot(i) = gauss(rng);
    }
    const Vec grad = rescale_softmax_backward(logits, 10.0, cot);
    for (int i = 0; i < 4; ++i) {
      Vec lp = logits, lm = logits;
      lp(i) += h;
      lm(i) -= h;
      // Skip finite differences across the max-|h| subgradient boundary.
      Eigen::Index mp, mm;
      lp.cwiseAbs().maxCoeff(&mp);
      lm.cwiseAbs().maxCoeff(&mm);
      if (mp != mm) continue;
      const double fd =
          cot.dot(rescale_softmax(lp, 10.0) - rescale_softmax(lm, 10.0)) / (2 * h);
      EXPECT_NEAR(grad(i), fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(JitterLoss, PerfectMatchIsZero) {
  // Saturated rescale (alpha = 800) makes hat_h exactly one-hot.
  Vec h(2), y(2);
  h << 5.0, 0.0;
  y << 1.0, 0.0;
  EXPECT_DOUBLE_EQ(jitter_loss(h, y, 800.0, 0.0, 2.0, false, Vec::Zero(2)), 0.0);
}

TEST(JitterLoss, BetaBranchArithmetic) {
  // Choose alpha so ||hat_h - y||_2 = 0.5 for a two-class one-hot target.
  const double p = 1.0 - 0.5 / std::sqrt(2.0);
  const double alpha = std::log(p / (1.0 - p));
  Vec h(2), y(2);
  h << 1.0, 0.0;
  y << 1.0, 0.0;
  const double plain = jitter_loss(h, y, alpha, 0.0, 2.0, false, Vec::Zero(2));
  EXPECT_NEAR(plain, 0.5, 1e-12);
  const double scaled = jitter_loss(h, y, alpha, 0.0, 2.0, true, Vec::Zero(2));
  EXPECT_NEAR(scaled, 0.25, 1e-12);
}

TEST(JitterLoss, AlphaTenHandValue) {
  Vec h(2), y(2);
  h << 1.0, 0.0;
  y << 1.0, 0.0;
  const double value = jitter_loss(h, y, 10.0, 0.0, 2.0, false, Vec::Zero(2));
  const double q = std::exp(-10.0) / (1.0 + std::exp(-10.0));
  EXPECT_NEAR(value, std::sqrt(2.0) * q, 1e-12);
  EXPECT_NEAR(value, 6.42e-5, 1e-7);
}

TEST(JitterLoss, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double h = 1e-7;
  for (bool correct : {false, true}) {
    Vec logits(3), noise(3), y = Vec::Zero(3);
    for (int i = 0; i < 3; ++i) {
      logits(i) = gauss(rng);
      noise(i) = gauss(rng);
    }
    y(1) = 1.0;
    const auto [value, grad] =
        jitter_loss_with_grad(logits, y, 10.0, 0.3, 2.0, correct, noise);
    EXPECT_GE(value, 0.0);
    for (int i = 0; i < 3; ++i) {
      Vec lp = logits, lm = logits;
      lp(i) += h;
      lm(i) -= h;
      Eigen::Index mp, mm;
      lp.cwiseAbs().maxCoeff(&mp);
      lm.cwiseAbs().maxCoeff(&mm);
      if (mp != mm) continue;
      const double fd = (jitter_loss(lp, y, 10.0, 0.3, 2.0, correct, noise) -
                         jitter_loss(lm, y, 10.0, 0.3, 2.0, correct, noise)) /
                        (2 * h);
      EXPECT_NEAR(grad(i), fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(GenerateJitter, EmptyBudgetReturnsClean) {
  Rng rng(11);
  BlobProblem blobs = make_blobs(10, 4.0, rng);
  AttackConfig cfg = wide_range_cfg();
  cfg.epsilon = 0.0;
  cfg.step_size = 0.0;
  cfg.num_steps = 3;
  Rng attack_rng(1);
  const AdversarialBatch batch =
      generate_jitter(blobs.x, blobs.y, blobs.model, cfg, attack_rng);
  EXPECT_EQ(batch.perturbed, batch.clean);
}

TEST(GenerateJitter, SingleStepHasStepSizeInfNorm) {
  Rng rng(13);
  BlobProblem blobs = make_blobs(10, 4.0, rng);
  AttackConfig cfg = wide_range_cfg();
  cfg.epsilon = 0.5;
  cfg.step_size = 0.125;
  cfg.num_steps = 1;
  cfg.jitter_sigma = 0.0;
  Rng attack_rng(1);
  const AdversarialBatch batch =
      generate_jitter(blobs.x, blobs.y, blobs.model, cfg, attack_rng);
  const Mat gamma = batch.perturbed - batch.clean;
  EXPECT_NEAR(gamma.lpNorm<Eigen::Infinity>(), cfg.step_size, 1e-12);
  for (Eigen::Index i = 0; i < gamma.rows(); ++i)
    for (Eigen::Index j = 0; j < gamma.cols(); ++j) {
      const double g = std::abs(gamma(i, j));
      EXPECT_TRUE(g < 1e-12 || std::abs(g - cfg.step_size) < 1e-12);
    }
  expect_ball_and_range(batch, cfg);
}

TEST(GenerateJitter, DeterministicUnderFixedSeed) {
  Rng rng(17);
  BlobProblem blobs = make_blobs(12, 4.0, rng);
  AttackConfig cfg = wide_range_cfg();
  cfg.epsilon = 1.0;
  cfg.step_size = 0.25;
  cfg.num_steps = 5;
  Rng a(42), b(42);
  const AdversarialBatch first = generate_jitter(blobs.x, blobs.y, blobs.model, cfg, a);
  const AdversarialBatch second = generate_jitter(blobs.x, blobs.y, blobs.model, cfg, b);
  EXPECT_EQ(first.perturbed, second.perturbed);
  EXPECT_EQ(first.success_mask, second.success_mask);
}

TEST(GenerateJitter, SigmaZeroBetaOneEqualsBranchlessAscent) {
  Rng rng(19);
  BlobProblem blobs = make_blobs(8, 3.0, rng);
  AttackConfig cfg = wide_range_cfg();
  cfg.epsilon = 0.8;
  cfg.step_size = 0.2;
  cfg.num_steps = 6;
  cfg.jitter_sigma = 0.0;
  cfg.jitter_beta = 1.0 + 1e-12;  // beta must exceed 1; this is branch-neutral
  Rng attack_rng(3);
  const AdversarialBatch batch =
      generate_jitter(blobs.x, blobs.y, blobs.model, cfg, attack_rng);

  // Reference: plain iterative ascent on ||hat_h - y||_2, no branch at all.
  Mat adv = blobs.x;
  for (int step = 0; step < cfg.num_steps; ++step) {
    const Mat h = blobs.model.logits(adv);
    Mat grad_logits(h.rows(), h.cols());
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      Vec y = Vec::Zero(h.cols());
      y(blobs.y[static_cast<size_t>(i)]) = 1.0;
      const Vec hat = rescale_softmax(h.row(i).transpose(), cfg.jitter_alpha);
      const Vec resid = hat - y;
      const double l2 = resid.norm();
      grad_logits.row(i) =
          l2 < 1e-12
              ? Vec::Zero(h.cols()).transpose().eval()
              : rescale_softmax_backward(h.row(i).transpose(), cfg.jitter_alpha,
                                         Vec(resid / l2))
                    .transpose()
                    .eval();
    }
    const Mat gx = blobs.model.logits_input_grad(grad_logits);
    adv += cfg.step_size * gx.unaryExpr([](double v) {
      return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
    });
    Mat delta = (adv - blobs.x).cwiseMax(-cfg.epsilon).cwiseMin(cfg.epsilon);
    adv = (blobs.x + delta).cwiseMax(cfg.input_range[0]).cwiseMin(cfg.input_range[1]);
  }
  // beta = 1 + 1e-12 divides the loss by ~1, which never flips a sign.
  EXPECT_EQ(batch.perturbed, adv);
}

TEST(GeneratePgd, EmptyBudgetIsIdentity) {
  Rng rng(23);
  BlobProblem blobs = make_blobs(10, 4.0, rng);
  AttackConfig cfg = wide_range_cfg();
  cfg.epsilon = 0.0;
  cfg.step_size = 0.0;
  Rng attack_rng(1);
  const AdversarialBatch batch =
      generate_pgd(blobs.x, blobs.y, blobs.model, cfg, attack_rng);
  EXPECT_EQ(batch.perturbed, batch.clean);
}

TEST(GeneratePgd, AscentDoesNotDecreaseLoss) {
  Rng rng(29);
  BlobProblem blobs = make_blobs(40, 3.0, rng);
  AttackConfig cfg = wide_range_cfg();
  cfg.epsilon = 1.0;
  cfg.step_size = 0.25;
  cfg.num_steps = 10;
  Rng attack_rng(5);
  const AdversarialBatch batch =
      generate_pgd(blobs.x, blobs.y, blobs.model, cfg, attack_rng);
  expect_ball_and_range(batch, cfg);

  const double clean_loss = cross_entropy(blobs.model.logits(blobs.x), blobs.y);
  const double adv_loss = cross_entropy(blobs.model.logits(batch.perturbed), blobs.y);
  EXPECT_GE(adv_loss, clean_loss);
}

TEST(GenerateFgsm, ZeroGradientLeavesInputUnchanged) {
  LogitsOnlyModel zero_model;
  // A zero-logit model has zero input gradients through the default
  // (unimplemented) gradient path, so FGSM must fail loudly...
  Mat x = Mat::Zero(3, 2);
  std::vector<int> y = {0, 1, 0};
  AttackConfig cfg = wide_range_cfg();
  cfg.epsilon = 0.1;
  cfg.step_size = 0.1;
  EXPECT_THROW(generate_fgsm(x, y, zero_model, cfg), CapabilityError);

  // ...while a real model with an exactly flat objective stays put.
  LinearModel flat(Mat::Zero(2, 2), Vec::Zero(2));
  const AdversarialBatch batch = generate_fgsm(x, y, flat, cfg);
  EXPECT_EQ(batch.perturbed, batch.clean);
}

TEST(GenerateFgsm, CoordinatesMoveByEpsilonOrStay) {
  Rng rng(31);
  BlobProblem blobs = make_blobs(15, 3.0, rng);
  AttackConfig cfg = wide_range_cfg();
  cfg.epsilon = 8.0 / 255.0;
  cfg.step_size = 8.0 / 255.0;
  const AdversarialBatch batch = generate_fgsm(blobs.x, blobs.y, blobs.model, cfg);
  const Mat gamma = batch.perturbed - batch.clean;
  for (Eigen::Index i = 0; i < gamma.rows(); ++i)
    for (Eigen::Index j = 0; j < gamma.cols(); ++j) {
      const double g = std::abs(gamma(i, j));
      EXPECT_TRUE(g < 1e-15 || std::abs(g - cfg.epsilon) < 1e-15);
    }
  expect_ball_and_range(batch, cfg);
}

TEST(GenerateFgsm, BitwiseEqualsSingleStepPgd) {
  Rng rng(37);
  BlobProblem blobs = make_blobs(20, 3.0, rng);
  AttackConfig fgsm_cfg = wide_range_cfg();
  fgsm_cfg.epsilon = 0.3;
  fgsm_cfg.step_size = 0.3;

  AttackConfig pgd_cfg = fgsm_cfg;
  pgd_cfg.num_steps = 1;
  pgd_cfg.step_size = pgd_cfg.epsilon;
  pgd_cfg.pgd_random_start = false;

  Rng attack_rng(1);
  const AdversarialBatch fgsm = generate_fgsm(blobs.x, blobs.y, blobs.model, fgsm_cfg);
  const AdversarialBatch pgd =
      generate_pgd(blobs.x, blobs.y, blobs.model, pgd_cfg, attack_rng);
  EXPECT_EQ(fgsm.perturbed, pgd.perturbed);
  EXPECT_EQ(fgsm.success_mask, pgd.success_mask);
}

TEST(AttackForEval, PolicyNoneReturnsCleanPair) {
  Rng rng(41);
  BlobProblem blobs = make_blobs(10, 4.0, rng);
  Mat ood = blobs.x.array() + 10.0;
  EmbeddingBank bank;
  bank.embeddings = blobs.model.scoring_embedding(blobs.x);
  bank.labels = blobs.y;
  KnnScorer scorer(bank, 1);

  AttackConfig cfg = wide_range_cfg();
  cfg.name = "pgd";
  cfg.epsilon = 0.5;
  cfg.step_size = 0.125;
  Rng attack_rng(2);
  const auto [id_batch, ood_batch] = attack_for_eval(
      blobs.x, blobs.y, ood, blobs.model, scorer, cfg, "none", attack_rng);
  EXPECT_EQ(id_batch.perturbed, blobs.x);
  EXPECT_EQ(ood_batch.perturbed, ood);

  EXPECT_THROW(attack_for_eval(blobs.x, blobs.y, ood, blobs.model, scorer, cfg,
                               "sideways", attack_rng),
               ConfigError);
}

TEST(AttackForEval, OodScoresDescendAndIdAccuracyDrops) {
  Rng rng(43);
  BlobProblem blobs = make_blobs(30, 3.0, rng);
  Mat ood(20, 2);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    ood(i, 0) = 0.5 * gauss(rng);
    ood(i, 1) = 12.0 + 0.5 * gauss(rng);
  }
  EmbeddingBank bank;
  bank.embeddings = blobs.model.scoring_embedding(blobs.x);
  bank.labels = blobs.y;
  KnnScorer scorer(bank, 2);

  AttackConfig cfg = wide_range_cfg();
  cfg.name = "pgd";
  cfg.epsilon = 2.0;
  cfg.step_size = 0.5;
  cfg.num_steps = 10;
  Rng attack_rng(7);
  const auto [id_batch, ood_batch] = attack_for_eval(
      blobs.x, blobs.y, ood, blobs.model, scorer, cfg, "both", attack_rng);
  expect_ball_and_range(id_batch, cfg);
  expect_ball_and_range(ood_batch, cfg);

  auto mean_score = [&](const Mat& x) {
    const Mat z = blobs.model.scoring_embedding(x);
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i)
      total += scorer.score(z.row(i).transpose());
    return total / double(z.rows());
  };
  EXPECT_LE(mean_score(ood_batch.perturbed), mean_score(ood_batch.clean));

  EXPECT_LE(accuracy(blobs.model, id_batch.perturbed, blobs.y),
            accuracy(blobs.model, id_batch.clean, blobs.y));
}

TEST(AttackConfigValidation, RejectsBadSettings) {
  AttackConfig cfg = wide_range_cfg();
  cfg.name = "warp";
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = wide_range_cfg();
  cfg.epsilon = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = wide_range_cfg();
  cfg.step_size = cfg.epsilon * 2.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = wide_range_cfg();
  cfg.jitter_beta = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = wide_range_cfg();
  cfg.name = "none";
  EXPECT_NO_THROW(cfg.validate());  // budget fields ignored for "none"
}
