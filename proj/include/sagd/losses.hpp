#pragma once

// Multi-geometry loss stack: vMF-based hypersphere compactness + prototype
// disparity, supervised hyperbolic contrastive loss over Poincare-ball
// embeddings, cross-entropy, and their weighted sum. Each loss comes in a
// value-only and a value+gradient form; analytic gradients are validated
// against central finite differences in the tests.

#include "sagd/common.hpp"
#include "sagd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

namespace sagd {

// K unit-norm class prototypes with the shared vMF temperature. Rows are
// maintained by EMA (update_prototypes), not by backprop.
struct PrototypeBank {
  Mat prototypes;           // K x d, unit rows
  double temperature = 0.1; // tau
  double ema_factor = 0.95;

  int num_classes() const { return static_cast<int>(prototypes.rows()); }
  int dim() const { return static_cast<int>(prototypes.cols()); }

  void validate() const {
    if (prototypes.rows() < 1) throw ContractViolation("PrototypeBank: K must be >= 1");
    if (!(temperature > 0.0)) throw ContractViolation("PrototypeBank: temperature must be > 0");
    if (!(ema_factor >= 0.0 && ema_factor <= 1.0))
      throw ContractViolation("PrototypeBank: ema_factor must be in [0, 1]");
    for (Eigen::Index k = 0; k < prototypes.rows(); ++k)
      if (std::abs(prototypes.row(k).norm() - 1.0) > 1e-6)
        throw ContractViolation("PrototypeBank: row " + std::to_string(k) +
                                " is not unit norm");
  }

  // Normalized random Gaussian rows; seeded so runs are reproducible.
  static PrototypeBank random_init(int num_classes, int dim, double temperature,
                                   double ema_factor, Rng& rng) {
    if (num_classes < 1 || dim < 1)
      throw ContractViolation("PrototypeBank: need K >= 1 and dim >= 1");
    std::normal_distribution<double> gauss(0.0, 1.0);
    Mat proto(num_classes, dim);
    for (int k = 0; k < num_classes; ++k) {
      for (int j = 0; j < dim; ++j) proto(k, j) = gauss(rng);
      const double n = proto.row(k).norm();
      proto.row(k) /= (n > 1e-12 ? n : 1.0);
    }
    PrototypeBank bank;
    bank.prototypes = std::move(proto);
    bank.temperature = temperature;
    bank.ema_factor = ema_factor;
    return bank;
  }
};

namespace detail {

inline double logsumexp(const Vec& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

inline void check_labels(const std::vector<int>& labels, int num_classes,
                         Eigen::Index n_rows, const char* what) {
  if (static_cast<Eigen::Index>(labels.size()) != n_rows)
    throw ContractViolation(std::string(what) + ": labels/batch size mismatch");
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw ContractViolation(std::string(what) + ": label out of range");
}

}  // namespace detail

// Softmax over prototype similarities mu_k . z / tau for one embedding.
inline Vec vmf_class_probabilities(const Vec& z, const PrototypeBank& bank) {
  if (z.size() != bank.dim())
    throw ContractViolation("vmf_class_probability: dimension mismatch");
  Vec logits = bank.prototypes * z / bank.temperature;
  const double lse = detail::logsumexp(logits);
  return (logits.array() - lse).exp();
}

inline double vmf_class_probability(const UnitVector& z, const PrototypeBank& bank,
                                    int k) {
  if (std::abs(z.coords().norm() - 1.0) > 1e-6)
    throw ContractViolation("vmf_class_probability: embedding is not unit norm");
  if (k < 0 || k >= bank.num_classes())
    throw ContractViolation("vmf_class_probability: class index out of range");
  return vmf_class_probabilities(z.coords(), bank)(k);
}

// Mean negative log-likelihood of each embedding under its own class's vMF
// softmax. Z rows are unit sphere embeddings.
struct CompactnessResult {
  double value = 0.0;
  Mat grad_embeddings;  // N x d
  Mat grad_prototypes;  // K x d (EMA maintenance ignores this; kept for checks)
};

inline CompactnessResult compactness_loss_with_grad(const Mat& Z,
                                                    const std::vector<int>& labels,
                                                    const PrototypeBank& bank) {
  const Eigen::Index n = Z.rows();
  if (n < 1) throw ContractViolation("compactness_loss: empty batch");
  if (Z.cols() != bank.dim())
    throw ContractViolation("compactness_loss: embedding dimension mismatch");
  detail::check_labels(labels, bank.num_classes(), n, "compactness_loss");

  const double tau = bank.temperature;
  CompactnessResult res;
  res.grad_embeddings = Mat::Zero(n, Z.cols());
  res.grad_prototypes = Mat::Zero(bank.num_classes(), bank.dim());

  const double inv_ntau = 1.0 / (static_cast<double>(n) * tau);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vec logits = bank.prototypes * Z.row(i).transpose() / tau;
    const double lse = detail::logsumexp(logits);
    res.value += (lse - logits(labels[i])) / static_cast<double>(n);
    Vec q = (logits.array() - lse).exp();
    q(labels[i]) -= 1.0;
    res.grad_embeddings.row(i) = inv_ntau * (q.transpose() * bank.prototypes);
    res.grad_prototypes += inv_ntau * q * Z.row(i);
  }
  return res;
}

inline double compactness_loss(const Mat& Z, const std::vector<int>& labels,
                               const PrototypeBank& bank) {
  return compactness_loss_with_grad(Z, labels, bank).value;
}

// (1/K) sum_i log[ (1/(K-1)) sum_{j != i} exp(mu_i . mu_j / tau) ].
// Minimizing this pushes prototypes apart.
inline double disparity_loss(const PrototypeBank& bank) {
  const int K = bank.num_classes();
  if (K < 2) throw ContractViolation("disparity_loss: needs K >= 2");
  const double tau = bank.temperature;
  const Mat sims = bank.prototypes * bank.prototypes.transpose() / tau;
  double total = 0.0;
  for (int i = 0; i < K; ++i) {
    Vec cross(K - 1);
    int idx = 0;
    for (int j = 0; j < K; ++j)
      if (j != i) cross(idx++) = sims(i, j);
    total += detail::logsumexp(cross) - std::log(static_cast<double>(K - 1));
  }
  return total / static_cast<double>(K);
}

// d disparity / d prototypes, K x d.
inline Mat disparity_loss_grad(const PrototypeBank& bank) {
  const int K = bank.num_classes();
  if (K < 2) throw ContractViolation("disparity_loss: needs K >= 2");
  const double tau = bank.temperature;
  const Mat sims = bank.prototypes * bank.prototypes.transpose() / tau;

  // w(i,j) = exp(sims_ij) / sum_{j' != i} exp(sims_ij'), row-stable.
  Mat w = Mat::Zero(K, K);
  for (int i = 0; i < K; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < K; ++j)
      if (j != i) m = std::max(m, sims(i, j));
    double denom = 0.0;
    for (int j = 0; j < K; ++j)
      if (j != i) denom += std::exp(sims(i, j) - m);
    for (int j = 0; j < K; ++j)
      if (j != i) w(i, j) = std::exp(sims(i, j) - m) / denom;
  }

  Mat grad = Mat::Zero(K, bank.dim());
  const double scale = 1.0 / (static_cast<double>(K) * tau);
  for (int a = 0; a < K; ++a)
    for (int b = 0; b < K; ++b)
      if (b != a) grad.row(a) += scale * (w(a, b) + w(b, a)) * bank.prototypes.row(b);
  return grad;
}

// Full set I = A (augmented views) U X with the anchor->positives map and the
// candidate set A used as the contrastive denominator.
struct ContrastiveBatch {
  Mat embeddings;  // |I| x d, rows strictly inside the ball
  std::vector<std::pair<int, std::vector<int>>> positives;  // anchor i -> P(i)
  std::vector<int> candidates;  // index set A

  void validate(const BallConfig& cfg) const {
    const int n = static_cast<int>(embeddings.rows());
    if (positives.empty())
      throw ContractViolation("ContrastiveBatch: no anchors");
    for (const auto& [i, ps] : positives) {
      if (i < 0 || i >= n)
        throw ContractViolation("ContrastiveBatch: anchor index out of range");
      if (ps.empty())
        throw ContractViolation("ContrastiveBatch: empty positive set for anchor " +
                                std::to_string(i));
      for (int p : ps) {
        if (p < 0 || p >= n)
          throw ContractViolation("ContrastiveBatch: positive index out of range");
        if (p == i)
          throw ContractViolation("ContrastiveBatch: anchor contained in its own P(i)");
      }
    }
    for (int a : candidates)
      if (a < 0 || a >= n)
        throw ContractViolation("ContrastiveBatch: candidate index out of range");
    for (int i = 0; i < n; ++i)
      if (cfg.curvature * embeddings.row(i).squaredNorm() >= 1.0)
        throw ContractViolation("ContrastiveBatch: embedding outside the ball");
  }
};

struct HyperbolicLossResult {
  double value = 0.0;
  Mat grad_embeddings;  // |I| x d
};

// Supervised hyperbolic contrastive loss
//   sum_i (1/|P(i)|) sum_{p in P(i)} [ D(z_i,z_p)/tau + log sum_{a in A\{i}}
//   exp(-D(z_i,z_a)/tau) ]
// (equivalently the negative log-softmax form). The candidate set excludes
// the anchor itself; set average_anchors to divide by the anchor count.
inline HyperbolicLossResult hyperbolic_contrastive_loss_with_grad(
    const ContrastiveBatch& batch, double tau, const BallConfig& cfg,
    bool average_anchors = false) {
  if (!(tau > 0.0))
    throw ContractViolation("hyperbolic_contrastive_loss: tau must be > 0");
  batch.validate(cfg);

  const int n = static_cast<int>(batch.embeddings.rows());
  // Symmetric geodesic distance matrix over the full set.
  Mat D = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double d = geodesic_distance_raw(batch.embeddings.row(i).transpose(),
                                             batch.embeddings.row(j).transpose(), cfg);
      D(i, j) = d;
      D(j, i) = d;
    }

  const double anchor_scale =
      average_anchors ? 1.0 / static_cast<double>(batch.positives.size()) : 1.0;

  // dL/dD accumulated per ordered (anchor, other) pair.
  Mat coeff = Mat::Zero(n, n);
  double loss = 0.0;
  for (const auto& [i, ps] : batch.positives) {
    std::vector<int> cands;
    cands.reserve(batch.candidates.size());
    for (int a : batch.candidates)
      if (a != i) cands.push_back(a);
    if (cands.empty())
      throw ContractViolation("hyperbolic_contrastive_loss: empty candidate set for anchor " +
                              std::to_string(i));

    Vec logits(static_cast<Eigen::Index>(cands.size()));
    for (size_t t = 0; t < cands.size(); ++t) logits(t) = -D(i, cands[t]) / tau;
    const double lse = detail::logsumexp(logits);

    const double inv_p = 1.0 / static_cast<double>(ps.size());
    double mean_pos = 0.0;
    for (int p : ps) {
      mean_pos += inv_p * D(i, p);
      coeff(i, p) += anchor_scale * inv_p / tau;
    }
    loss += anchor_scale * (mean_pos / tau + lse);
    // The 1/|P(i)|-averaged log-denominator appears once per anchor.
    for (size_t t = 0; t < cands.size(); ++t) {
      const double w = std::exp(logits(t) - lse);
      coeff(i, cands[t]) -= anchor_scale * w / tau;
    }
  }

  HyperbolicLossResult res;
  res.value = loss;
  res.grad_embeddings = Mat::Zero(n, batch.embeddings.cols());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double c_ij = coeff(i, j) + coeff(j, i);
      if (c_ij == 0.0) continue;
      Vec gi = Vec::Zero(batch.embeddings.cols());
      Vec gj = Vec::Zero(batch.embeddings.cols());
      geodesic_distance_backward(batch.embeddings.row(i).transpose(),
                                 batch.embeddings.row(j).transpose(), cfg, c_ij, gi, gj);
      res.grad_embeddings.row(i) += gi.transpose();
      res.grad_embeddings.row(j) += gj.transpose();
    }
  return res;
}

inline double hyperbolic_contrastive_loss(const ContrastiveBatch& batch, double tau,
                                          const BallConfig& cfg,
                                          bool average_anchors = false) {
  return hyperbolic_contrastive_loss_with_grad(batch, tau, cfg, average_anchors).value;
}

// EMA prototype maintenance: classes present in the batch move toward their
// batch mean, rows re-normalized; absent classes untouched.
inline PrototypeBank update_prototypes(const PrototypeBank& bank, const Mat& Z,
                                       const std::vector<int>& labels) {
  detail::check_labels(labels, bank.num_classes(), Z.rows(), "update_prototypes");
  const int K = bank.num_classes();
  Mat sums = Mat::Zero(K, bank.dim());
  std::vector<int> counts(K, 0);
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    sums.row(labels[i]) += Z.row(i);
    counts[labels[i]]++;
  }
  PrototypeBank out = bank;
  const double m = bank.ema_factor;
  if (m == 1.0) return out;  // degenerate EMA: bank unchanged bit-for-bit
  for (int k = 0; k < K; ++k) {
    if (counts[k] == 0) continue;
    Vec blended = m * bank.prototypes.row(k).transpose() +
                  (1.0 - m) * (sums.row(k).transpose() / counts[k]);
    const double n = blended.norm();
    if (n < 1e-12) continue;  // degenerate cancellation: keep the old row
    out.prototypes.row(k) = blended.transpose() / n;
  }
  return out;
}

// Standard mean softmax cross-entropy over logits rows.
struct CrossEntropyResult {
  double value = 0.0;
  Mat grad_logits;
};

inline CrossEntropyResult cross_entropy_with_grad(const Mat& logits,
                                                  const std::vector<int>& labels) {
  const Eigen::Index n = logits.rows();
  if (n < 1) throw ContractViolation("cross_entropy: empty batch");
  detail::check_labels(labels, static_cast<int>(logits.cols()), n, "cross_entropy");
  CrossEntropyResult res;
  res.grad_logits = Mat::Zero(n, logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    Vec row = logits.row(i).transpose();
    const double lse = detail::logsumexp(row);
    res.value += (lse - row(labels[i])) / static_cast<double>(n);
    Vec p = (row.array() - lse).exp();
    p(labels[i]) -= 1.0;
    res.grad_logits.row(i) = p.transpose() / static_cast<double>(n);
  }
  return res;
}

inline double cross_entropy(const Mat& logits, const std::vector<int>& labels) {
  return cross_entropy_with_grad(logits, labels).value;
}

// Term weights for the summed objective; all 1 reproduces the plain sum.
struct LossWeights {
  double sphere = 1.0;
  double hyperbolic = 1.0;
  double cross_entropy = 1.0;
  double hyperbolic_tau = 0.5;
  bool average_anchors = false;  // sum over anchors by default
};

// Weighted contributions of each term. The additivity identities hold by
// construction: hypersphere = compactness + disparity,
// total = hypersphere + hyperbolic + cross_entropy.
struct LossBreakdown {
  double compactness = 0.0;
  double disparity = 0.0;
  double hypersphere = 0.0;
  double hyperbolic = 0.0;
  double cross_entropy = 0.0;
  double total = 0.0;
};

struct TotalLossResult {
  LossBreakdown breakdown;
  Mat grad_logits;      // N x K
  Mat grad_sphere;      // N x d_embed (sphere head adjoint)
  Mat grad_ball;        // N x d_embed (ball head adjoint)
  Mat grad_prototypes;  // K x d_embed (diagnostics; prototypes are EMA-updated)
};

// Joint objective over one batch: logits / sphere rows / ball rows must all
// describe the same |I| samples (originals plus views), labels included.
// Disparity needs K >= 2 and contributes 0 for a single class.
inline TotalLossResult total_loss(const Mat& logits, const Mat& sphere_embeddings,
                                  const ContrastiveBatch& cbatch,
                                  const std::vector<int>& labels,
                                  const PrototypeBank& bank, const BallConfig& cfg,
                                  const LossWeights& weights = {}) {
  const Eigen::Index n = logits.rows();
  if (sphere_embeddings.rows() != n || cbatch.embeddings.rows() != n)
    throw ContractViolation("total_loss: head batch sizes disagree");

  auto com = compactness_loss_with_grad(sphere_embeddings, labels, bank);
  const double dis = bank.num_classes() >= 2 ? disparity_loss(bank) : 0.0;
  auto hyp = hyperbolic_contrastive_loss_with_grad(cbatch, weights.hyperbolic_tau, cfg,
                                                   weights.average_anchors);
  auto ce = cross_entropy_with_grad(logits, labels);

  TotalLossResult res;
  res.breakdown.compactness = weights.sphere * com.value;
  res.breakdown.disparity = weights.sphere * dis;
  res.breakdown.hypersphere = res.breakdown.compactness + res.breakdown.disparity;
  res.breakdown.hyperbolic = weights.hyperbolic * hyp.value;
  res.breakdown.cross_entropy = weights.cross_entropy * ce.value;
  res.breakdown.total = res.breakdown.hypersphere + res.breakdown.hyperbolic +
                        res.breakdown.cross_entropy;

  res.grad_logits = weights.cross_entropy * ce.grad_logits;
  res.grad_sphere = weights.sphere * com.grad_embeddings;
  res.grad_ball = weights.hyperbolic * hyp.grad_embeddings;
  res.grad_prototypes = weights.sphere * com.grad_prototypes;
  if (bank.num_classes() >= 2)
    res.grad_prototypes += weights.sphere * disparity_loss_grad(bank);
  return res;
}

}  // namespace sagd
