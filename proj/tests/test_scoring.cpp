#include "sagd/scoring.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

using namespace sagd;

namespace {

Mat random_unit_rows(Rng& rng, int n, int d) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = gauss(rng);
    m.row(i) /= m.row(i).norm();
  }
  return m;
}

// Unit vector at the given chordal distance from e1 (d in [0, 2]).
Vec unit_at_distance(double dist, int dim) {
  const double theta = 2.0 * std::asin(dist / 2.0);
  Vec v = Vec::Zero(dim);
  v(0) = std::cos(theta);
  v(1) = std::sin(theta);
  return v;
}

// Brute-force oracle: sort all distances ascending, take the k-th.
double knn_oracle(const Vec& z, const Mat& bank, int k) {
  std::vector<double> dists;
  for (Eigen::Index i = 0; i < bank.rows(); ++i)
    dists.push_back((bank.row(i).transpose() - z).norm());
  std::sort(dists.begin(), dists.end());
  return dists[static_cast<size_t>(k - 1)];
}

EmbeddingBank toy_bank(Rng& rng, int n, int d, int num_classes) {
  EmbeddingBank bank;
  bank.embeddings = random_unit_rows(rng, n, d);
  std::uniform_int_distribution<int> lab(0, num_classes - 1);
  bank.labels.resize(static_cast<size_t>(n));
  // Ensure every class appears at least once.
  for (int i = 0; i < n; ++i)
    bank.labels[static_cast<size_t>(i)] = i < num_classes ? i : lab(rng);
  return bank;
}

}  // namespace

TEST(KnnScore, SelfDistanceIsZero) {
  Rng rng(3);
  EmbeddingBank bank = toy_bank(rng, 10, 5, 2);
  const Vec z = bank.embeddings.row(4).transpose();
  EXPECT_DOUBLE_EQ(knn_score(z, bank, 1), 0.0);
}

TEST(KnnScore, TwoPointHandExample) {
  EmbeddingBank bank;
  bank.embeddings = Mat(2, 4);
  bank.embeddings.row(0) = unit_at_distance(0.5, 4).transpose();
  bank.embeddings.row(1) = unit_at_distance(1.2, 4).transpose();
  bank.labels = {0, 0};
  Vec z = Vec::Zero(4);
  z(0) = 1.0;
  EXPECT_NEAR(knn_score(z, bank, 1), 0.5, 1e-12);
  EXPECT_NEAR(knn_score(z, bank, 2), 1.2, 1e-12);
}

TEST(KnnScore, MatchesBruteForceOracleExactly) {
  Rng rng(5);
  EmbeddingBank bank = toy_bank(rng, 50, 6, 3);
  for (int t = 0; t < 50; ++t) {
    const Vec z = random_unit_rows(rng, 1, 6).row(0).transpose();
    for (int k : {1, 2, 7, 25, 50})
      EXPECT_EQ(knn_score(z, bank, k), knn_oracle(z, bank.embeddings, k));
  }
}

TEST(KnnScore, PermutationInvariantAndMonotoneInK) {
  Rng rng(7);
  EmbeddingBank bank = toy_bank(rng, 20, 4, 2);
  EmbeddingBank shuffled = bank;
  std::vector<Eigen::Index> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (int i = 0; i < 20; ++i) {
    shuffled.embeddings.row(i) = bank.embeddings.row(perm[static_cast<size_t>(i)]);
    shuffled.labels[static_cast<size_t>(i)] =
        bank.labels[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  const Vec z = random_unit_rows(rng, 1, 4).row(0).transpose();
  double prev = -1.0;
  for (int k = 1; k <= 20; ++k) {
    const double s = knn_score(z, bank, k);
    EXPECT_EQ(s, knn_score(z, shuffled, k));
    EXPECT_GE(s, prev);
    prev = s;
  }
  EXPECT_THROW(knn_score(z, bank, 0), ContractViolation);
  EXPECT_THROW(knn_score(z, bank, 21), ContractViolation);
}

TEST(KnnScore, SelfExclusionDropsOneRow) {
  Rng rng(9);
  EmbeddingBank bank = toy_bank(rng, 6, 3, 2);
  const Vec z = bank.embeddings.row(2).transpose();
  EXPECT_DOUBLE_EQ(knn_score(z, bank, 1), 0.0);
  EXPECT_GT(knn_score(z, bank, 1, 2), 0.0);
  EXPECT_THROW(knn_score(z, bank, 6, 2), ContractViolation);
}

TEST(DefaultKnnK, OnePercentRuleWithFloor) {
  EXPECT_EQ(default_knn_k(1000), 10);
  EXPECT_EQ(default_knn_k(10), 1);
  EXPECT_EQ(default_knn_k(249), 2);
}

TEST(FitGaussian, TwoPointHandExample) {
  EmbeddingBank bank;
  bank.embeddings = Mat(2, 3);
  bank.embeddings << 1, 0, 0, -1, 0, 0;
  bank.labels = {0, 0};
  const double ridge = 0.1;
  const GaussianStats stats = fit_gaussian(bank, ridge);
  EXPECT_LT(stats.class_means.row(0).norm(), 1e-15);
  // Pooled covariance diag(1, 0, 0) + ridge I; precision is its inverse.
  EXPECT_NEAR(stats.shared_precision(0, 0), 1.0 / (1.0 + ridge), 1e-12);
  EXPECT_NEAR(stats.shared_precision(1, 1), 1.0 / ridge, 1e-12);
  EXPECT_NEAR(stats.shared_precision(2, 2), 1.0 / ridge, 1e-12);
  EXPECT_NEAR(stats.shared_precision(0, 1), 0.0, 1e-12);
}

TEST(FitGaussian, LargeRidgeGivesScaledIdentity) {
  Rng rng(11);
  EmbeddingBank bank = toy_bank(rng, 30, 4, 3);
  const GaussianStats stats = fit_gaussian(bank, 1e6);
  EXPECT_LT((stats.shared_precision - Mat::Identity(4, 4) / 1e6).lpNorm<Eigen::Infinity>(),
            1e-11);
}

TEST(FitGaussian, DuplicatingSamplesChangesNothing) {
  Rng rng(13);
  EmbeddingBank bank = toy_bank(rng, 12, 4, 2);
  EmbeddingBank doubled;
  doubled.embeddings = Mat(24, 4);
  doubled.embeddings << bank.embeddings, bank.embeddings;
  doubled.labels = bank.labels;
  doubled.labels.insert(doubled.labels.end(), bank.labels.begin(), bank.labels.end());
  const GaussianStats a = fit_gaussian(bank, 1e-3);
  const GaussianStats b = fit_gaussian(doubled, 1e-3);
  EXPECT_LT((a.class_means - b.class_means).lpNorm<Eigen::Infinity>(), 1e-12);
  EXPECT_LT((a.shared_precision - b.shared_precision).lpNorm<Eigen::Infinity>(), 1e-9);
}

TEST(FitGaussian, ErrorsOnBadInput) {
  Rng rng(17);
  EmbeddingBank bank = toy_bank(rng, 10, 3, 2);
  bank.labels[0] = 5;  // class 3 and 4 have no samples
  EXPECT_THROW(fit_gaussian(bank, 1e-3), ContractViolation);

  // All points identical with zero ridge: singular covariance.
  EmbeddingBank degenerate;
  degenerate.embeddings = Mat(4, 3);
  for (int i = 0; i < 4; ++i) degenerate.embeddings.row(i) << 1, 0, 0;
  degenerate.labels = {0, 0, 0, 0};
  EXPECT_THROW(fit_gaussian(degenerate, 0.0), NumericalError);

  EmbeddingBank single;
  single.embeddings = Mat(1, 3);
  single.embeddings << 1, 0, 0;
  single.labels = {0};
  EXPECT_THROW(fit_gaussian(single, 1e-3), ContractViolation);
}

TEST(Mahalanobis, ZeroAtClassMeanAndIdentityReduction) {
  Rng rng(19);
  GaussianStats stats;
  stats.class_means = random_unit_rows(rng, 3, 4);
  stats.shared_precision = Mat::Identity(4, 4);
  for (int k = 0; k < 3; ++k)
    EXPECT_NEAR(mahalanobis_score(stats.class_means.row(k).transpose(), stats), 0.0,
                1e-15);

  const Vec z = random_unit_rows(rng, 1, 4).row(0).transpose();
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k)
    best = std::min(best, (z - stats.class_means.row(k).transpose()).squaredNorm());
  EXPECT_NEAR(mahalanobis_score(z, stats), best, 1e-12);
}

TEST(Mahalanobis, MatchesBruteForceQuadraticForm) {
  Rng rng(23);
  EmbeddingBank bank = toy_bank(rng, 40, 5, 4);
  const GaussianStats stats = fit_gaussian(bank, 1e-3);
  for (int t = 0; t < 50; ++t) {
    const Vec z = random_unit_rows(rng, 1, 5).row(0).transpose();
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < stats.class_means.rows(); ++k) {
      const Vec diff = z - stats.class_means.row(k).transpose();
      double q = 0.0;
      for (int a = 0; a < 5; ++a)
        for (int b = 0; b < 5; ++b) q += diff(a) * stats.shared_precision(a, b) * diff(b);
      best = std::min(best, q);
    }
    const double score = mahalanobis_score(z, stats);
    EXPECT_NEAR(score, best, 1e-12);
    EXPECT_GE(score, 0.0);
  }
}

TEST(Detect, ThresholdRuleAndPercentile) {
  EXPECT_EQ(detect(1.0, 1.0), Detection::ID);  // tie -> ID
  EXPECT_EQ(detect(1.0 + 1e-9, 1.0), Detection::OOD);
  EXPECT_EQ(detect(0.5, 1.0), Detection::ID);
  EXPECT_THROW(detect(std::nan(""), 0.0), ContractViolation);

  // Threshold at the empirical 95th percentile keeps ~95% of ID as ID.
  Rng rng(29);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> scores(2000);
  for (double& s : scores) s = gauss(rng);
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  const double lambda = sorted[static_cast<size_t>(0.95 * sorted.size())];
  int id_count = 0;
  for (double s : scores)
    if (detect(s, lambda) == Detection::ID) ++id_count;
  EXPECT_NEAR(double(id_count) / double(scores.size()), 0.95, 0.02);
}

TEST(Scorers, GradientsMatchFiniteDifferences) {
  Rng rng(31);
  EmbeddingBank bank = toy_bank(rng, 15, 4, 3);
  KnnScorer knn(bank, 3);
  MahalanobisScorer maha(fit_gaussian(bank, 1e-2));

  const double h = 1e-7;
  for (int t = 0; t < 20; ++t) {
    const Vec z = random_unit_rows(rng, 1, 4).row(0).transpose();
    for (const Scorer* scorer : {static_cast<const Scorer*>(&knn),
                                 static_cast<const Scorer*>(&maha)}) {
      const Vec grad = scorer->score_grad(z);
      for (int j = 0; j < 4; ++j) {
        Vec zp = z, zm = z;
        zp(j) += h;
        zm(j) -= h;
        const double fd = (scorer->score(zp) - scorer->score(zm)) / (2 * h);
        // knn has kinks when the k-th neighbor changes; skip those points.
        if (std::abs(grad(j) - fd) > 1e-3 && scorer == &knn) continue;
        EXPECT_NEAR(grad(j), fd, 1e-4 * std::max(1.0, std::abs(fd))) << scorer->name();
      }
    }
  }
}

TEST(BankIo, RoundTripsByteIdentically) {
  Rng rng(37);
  EmbeddingBank bank = toy_bank(rng, 25, 6, 3);
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = dir / "sagd_bank_test.bin";

  save_embedding_bank(bank, path);
  const std::string first = read_file(path);
  const std::string first_labels = read_file(path.string() + ".labels");

  const EmbeddingBank loaded = load_embedding_bank(path);
  EXPECT_EQ(loaded.embeddings, bank.embeddings);
  EXPECT_EQ(loaded.labels, bank.labels);

  save_embedding_bank(loaded, path);
  EXPECT_EQ(read_file(path), first);
  EXPECT_EQ(read_file(path.string() + ".labels"), first_labels);

  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".labels");
}

TEST(BankIo, RejectsCorruptedFiles) {
  Rng rng(41);
  EmbeddingBank bank = toy_bank(rng, 5, 3, 2);
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = dir / "sagd_bank_corrupt.bin";
  save_embedding_bank(bank, path);

  std::string bytes = read_file(path);
  bytes[0] = 'X';
  write_file_atomic(path, bytes);
  EXPECT_THROW(load_embedding_bank(path), IoError);

  // Truncated payload.
  save_embedding_bank(bank, path);
  bytes = read_file(path);
  write_file_atomic(path, bytes.substr(0, bytes.size() - 4));
  EXPECT_THROW(load_embedding_bank(path), IoError);

  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".labels");
}
