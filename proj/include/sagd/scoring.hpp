#pragma once

// OOD scoring over L2-normalized embeddings: k-th nearest-neighbor distance
// and Mahalanobis distance (class means + pooled ridge-regularized
// covariance), threshold detection, and the persisted embedding-bank binary
// format. Score polarity is fixed module-wide: higher = more OOD.

#include "sagd/common.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

namespace sagd {

struct EmbeddingBank {
  Mat embeddings;  // N x d, unit rows
  std::vector<int> labels;

  Eigen::Index size() const { return embeddings.rows(); }
  Eigen::Index dim() const { return embeddings.cols(); }

  void validate() const {
    if (embeddings.rows() < 1) throw ContractViolation("EmbeddingBank: empty bank");
    if (static_cast<Eigen::Index>(labels.size()) != embeddings.rows())
      throw ContractViolation("EmbeddingBank: labels/embeddings size mismatch");
    for (Eigen::Index i = 0; i < embeddings.rows(); ++i)
      if (std::abs(embeddings.row(i).norm() - 1.0) > 1e-6)
        throw ContractViolation("EmbeddingBank: row " + std::to_string(i) +
                                " is not unit norm");
  }
};

// Paper-family default: 1% of the bank size, at least 1.
inline int default_knn_k(Eigen::Index bank_size) {
  return std::max(1, static_cast<int>(std::lround(0.01 * double(bank_size))));
}

// L2 distance from z to its k-th nearest bank row (1-indexed).
// exclude_row >= 0 drops that bank row first (self-exclusion diagnostics).
inline double knn_score(const Vec& z, const EmbeddingBank& bank, int k,
                        int exclude_row = -1) {
  const Eigen::Index n = bank.size();
  const Eigen::Index effective = exclude_row >= 0 ? n - 1 : n;
  if (k < 1 || k > effective)
    throw ContractViolation("knn_score: k out of range [1, " +
                            std::to_string(effective) + "]");
  if (z.size() != bank.dim()) throw ContractViolation("knn_score: dimension mismatch");
  std::vector<double> dists;
  dists.reserve(static_cast<size_t>(effective));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (i == exclude_row) continue;
    dists.push_back((bank.embeddings.row(i).transpose() - z).norm());
  }
  std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
  return dists[static_cast<size_t>(k - 1)];
}

struct GaussianStats {
  Mat class_means;       // K x d
  Mat shared_precision;  // d x d symmetric positive-definite
};

// Per-class means plus a single pooled covariance with ridge * I added
// before inversion. Covariance uses the 1/N normalization, so duplicating
// every sample leaves the statistics unchanged.
inline GaussianStats fit_gaussian(const EmbeddingBank& bank, double ridge) {
  bank.validate();
  const Eigen::Index n = bank.size();
  const Eigen::Index d = bank.dim();
  if (n < 2) throw ContractViolation("fit_gaussian: need at least 2 samples");
  if (ridge < 0.0) throw ContractViolation("fit_gaussian: ridge must be >= 0");

  int num_classes = 0;
  for (int y : bank.labels) {
    if (y < 0) throw ContractViolation("fit_gaussian: negative label");
    num_classes = std::max(num_classes, y + 1);
  }
  std::vector<int> counts(static_cast<size_t>(num_classes), 0);
  Mat means = Mat::Zero(num_classes, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    means.row(bank.labels[static_cast<size_t>(i)]) += bank.embeddings.row(i);
    counts[static_cast<size_t>(bank.labels[static_cast<size_t>(i)])]++;
  }
  for (int k = 0; k < num_classes; ++k) {
    if (counts[static_cast<size_t>(k)] == 0)
      throw ContractViolation("fit_gaussian: class " + std::to_string(k) +
                              " has no samples");
    means.row(k) /= double(counts[static_cast<size_t>(k)]);
  }

  Mat cov = Mat::Zero(d, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vec centered =
        (bank.embeddings.row(i) - means.row(bank.labels[static_cast<size_t>(i)]))
            .transpose();
    cov += centered * centered.transpose();
  }
  cov /= double(n);
  cov += ridge * Mat::Identity(d, d);

  Eigen::LDLT<Mat> ldlt(cov);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw NumericalError(
        "fit_gaussian: covariance not positive-definite despite ridge " +
        format_double(ridge));
  Mat precision = ldlt.solve(Mat::Identity(d, d));
  precision = ((precision + precision.transpose()) / 2.0).eval();
  if (!precision.allFinite())
    throw NumericalError("fit_gaussian: singular covariance despite ridge " +
                         format_double(ridge));

  Eigen::SelfAdjointEigenSolver<Mat> es(precision, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() <= 0.0)
    throw NumericalError("fit_gaussian: precision lost positive-definiteness "
                         "(min eigenvalue " +
                         format_double(es.eigenvalues().minCoeff()) + ")");

  GaussianStats stats;
  stats.class_means = std::move(means);
  stats.shared_precision = std::move(precision);
  return stats;
}

// min_k (z - mu_k)^T P (z - mu_k); higher = more OOD.
inline double mahalanobis_score(const Vec& z, const GaussianStats& stats) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < stats.class_means.rows(); ++k) {
    Vec diff = z - stats.class_means.row(k).transpose();
    best = std::min(best, diff.dot(stats.shared_precision * diff));
  }
  return best;
}

enum class Detection { ID, OOD };

// OOD iff score > lambda; ties classify as ID.
inline Detection detect(double score, double lambda) {
  if (!std::isfinite(score) || !std::isfinite(lambda))
    throw ContractViolation("detect: non-finite inputs");
  return score > lambda ? Detection::OOD : Detection::ID;
}

// ---------------------------------------------------------------------------
// Differentiable scorer interface used by evaluation-time attacks on OOD
// samples (score descent needs d score / d embedding).
// ---------------------------------------------------------------------------

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::string name() const = 0;
  virtual double score(const Vec& z) const = 0;
  virtual Vec score_grad(const Vec& z) const = 0;
};

class KnnScorer : public Scorer {
 public:
  KnnScorer(EmbeddingBank bank, int k) : bank_(std::move(bank)), k_(k) {
    bank_.validate();
    if (k_ < 1 || k_ > bank_.size()) throw ContractViolation("KnnScorer: k out of range");
  }

  std::string name() const override { return "knn"; }
  double score(const Vec& z) const override { return knn_score(z, bank_, k_); }

  // Subgradient through the k-th neighbor held fixed at the current z.
  Vec score_grad(const Vec& z) const override {
    const Eigen::Index n = bank_.size();
    std::vector<std::pair<double, Eigen::Index>> dists;
    dists.reserve(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
      dists.emplace_back((bank_.embeddings.row(i).transpose() - z).norm(), i);
    std::nth_element(dists.begin(), dists.begin() + (k_ - 1), dists.end());
    const auto& [dist, idx] = dists[static_cast<size_t>(k_ - 1)];
    if (dist < 1e-12) return Vec::Zero(z.size());
    return (z - bank_.embeddings.row(idx).transpose()) / dist;
  }

  const EmbeddingBank& bank() const { return bank_; }
  int k() const { return k_; }

 private:
  EmbeddingBank bank_;
  int k_;
};

class MahalanobisScorer : public Scorer {
 public:
  explicit MahalanobisScorer(GaussianStats stats) : stats_(std::move(stats)) {}

  std::string name() const override { return "maha"; }
  double score(const Vec& z) const override { return mahalanobis_score(z, stats_); }

  Vec score_grad(const Vec& z) const override {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index best_k = 0;
    for (Eigen::Index k = 0; k < stats_.class_means.rows(); ++k) {
      Vec diff = z - stats_.class_means.row(k).transpose();
      const double v = diff.dot(stats_.shared_precision * diff);
      if (v < best) {
        best = v;
        best_k = k;
      }
    }
    Vec diff = z - stats_.class_means.row(best_k).transpose();
    return 2.0 * (stats_.shared_precision * diff);
  }

 private:
  GaussianStats stats_;
};

// ---------------------------------------------------------------------------
// Embedding-bank persistence. Byte layout (all little-endian):
//   bank file:   magic "SAGDBANK" (8 bytes), u32 version = 1, u32 dtype = 1
//                (float64), u64 count, u64 dim, then count*dim doubles
//                row-major.
//   label file:  <bank path> + ".labels": magic "SAGDLBLS" (8 bytes),
//                u32 version = 1, u64 count, then count int32 labels.
// ---------------------------------------------------------------------------

inline constexpr char kBankMagic[9] = "SAGDBANK";
inline constexpr char kLabelMagic[9] = "SAGDLBLS";

inline void save_embedding_bank(const EmbeddingBank& bank,
                                const std::filesystem::path& path) {
  bank.validate();
  std::string out;
  out.append(kBankMagic, 8);
  detail::append_le<std::uint32_t>(out, 1);  // version
  detail::append_le<std::uint32_t>(out, 1);  // dtype: float64
  detail::append_le<std::uint64_t>(out, static_cast<std::uint64_t>(bank.size()));
  detail::append_le<std::uint64_t>(out, static_cast<std::uint64_t>(bank.dim()));
  for (Eigen::Index i = 0; i < bank.size(); ++i)
    for (Eigen::Index j = 0; j < bank.dim(); ++j)
      detail::append_le<double>(out, bank.embeddings(i, j));
  write_file_atomic(path, out);

  std::string lbl;
  lbl.append(kLabelMagic, 8);
  detail::append_le<std::uint32_t>(lbl, 1);
  detail::append_le<std::uint64_t>(lbl, static_cast<std::uint64_t>(bank.size()));
  for (int y : bank.labels) detail::append_le<std::int32_t>(lbl, y);
  std::filesystem::path lpath = path;
  lpath += ".labels";
  write_file_atomic(lpath, lbl);
}

inline EmbeddingBank load_embedding_bank(const std::filesystem::path& path) {
  const std::string s = read_file(path);
  size_t off = 0;
  if (s.size() < 8 || std::memcmp(s.data(), kBankMagic, 8) != 0)
    throw IoError("embedding bank: bad magic in " + path.string());
  off = 8;
  const auto version = detail::read_le<std::uint32_t>(s, off, "version");
  if (version != 1)
    throw IoError("embedding bank: unsupported version " + std::to_string(version));
  const auto dtype = detail::read_le<std::uint32_t>(s, off, "dtype");
  if (dtype != 1) throw IoError("embedding bank: unsupported dtype");
  const auto count = detail::read_le<std::uint64_t>(s, off, "count");
  const auto dim = detail::read_le<std::uint64_t>(s, off, "dim");
  EmbeddingBank bank;
  bank.embeddings = Mat(count, dim);
  for (std::uint64_t i = 0; i < count; ++i)
    for (std::uint64_t j = 0; j < dim; ++j)
      bank.embeddings(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          detail::read_le<double>(s, off, "embedding data");

  std::filesystem::path lpath = path;
  lpath += ".labels";
  const std::string l = read_file(lpath);
  if (l.size() < 8 || std::memcmp(l.data(), kLabelMagic, 8) != 0)
    throw IoError("embedding bank: bad label magic in " + lpath.string());
  size_t loff = 8;
  const auto lversion = detail::read_le<std::uint32_t>(l, loff, "label version");
  if (lversion != 1) throw IoError("embedding bank: unsupported label version");
  const auto lcount = detail::read_le<std::uint64_t>(l, loff, "label count");
  if (lcount != count)
    throw IoError("embedding bank: label count mismatch in " + lpath.string());
  bank.labels.resize(static_cast<size_t>(lcount));
  for (auto& y : bank.labels) y = detail::read_le<std::int32_t>(l, loff, "label data");
  bank.validate();
  return bank;
}

}  // namespace sagd
