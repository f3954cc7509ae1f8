#pragma once

// Adversarial example generation behind one interface: the Jitter attack
// (rescaled-softmax L2 objective with noise injection and success-conditional
// downscaling) used for adversarial training, plus PGD and FGSM for
// evaluation. Evaluation-time policies attack inliers through the
// classification objective and outliers through OOD-score descent.
//
// All attacks are l-infinity: signed-gradient steps, projection onto the
// epsilon-ball around the clean input, then clamping to the valid data range.

#include "sagd/common.hpp"
#include "sagd/scoring.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace sagd {

struct AttackConfig {
  std::string name = "jitter";  // none | jitter | pgd | fgsm
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int num_steps = 10;
  double jitter_alpha = 10.0;
  double jitter_sigma = 0.1;
  double jitter_beta = 2.0;
  bool pgd_random_start = true;
  std::array<double, 2> input_range{0.0, 1.0};
  std::string eval_policy = "both";  // none | id_only | ood_only | both

  void validate() const {
    if (name != "none" && name != "jitter" && name != "pgd" && name != "fgsm")
      throw ConfigError("AttackConfig: unknown attack '" + name + "'");
    if (eval_policy != "none" && eval_policy != "id_only" &&
        eval_policy != "ood_only" && eval_policy != "both")
      throw ConfigError("AttackConfig: unknown eval_policy '" + eval_policy + "'");
    if (name == "none") return;
    if (!(epsilon > 0.0)) throw ConfigError("AttackConfig: epsilon must be > 0");
    if (!(step_size > 0.0 && step_size <= epsilon))
      throw ConfigError("AttackConfig: need 0 < step_size <= epsilon");
    if (num_steps < 1) throw ConfigError("AttackConfig: num_steps must be >= 1");
    if (!(jitter_beta > 1.0)) throw ConfigError("AttackConfig: jitter_beta must be > 1");
    if (!(jitter_sigma >= 0.0)) throw ConfigError("AttackConfig: jitter_sigma must be >= 0");
    if (!(input_range[0] < input_range[1]))
      throw ConfigError("AttackConfig: empty input_range");
  }
};

struct AdversarialBatch {
  Mat clean;
  Mat perturbed;
  std::vector<int> labels;
  // Per sample: does the model still predict the (pseudo-)label after the
  // attack? For OOD batches the pseudo-label is the clean-input prediction.
  std::vector<bool> success_mask;
};

// Gradient-capable model surface the attacks drive. logits()/
// scoring_embedding() cache the batch; the matching *_input_grad() call must
// follow on the same batch.
class DifferentiableModel {
 public:
  virtual ~DifferentiableModel() = default;
  virtual Mat logits(const Mat& x) = 0;
  virtual Mat logits_input_grad(const Mat& grad_logits) {
    throw CapabilityError("model does not provide logits input gradients");
  }
  virtual Mat scoring_embedding(const Mat& x) {
    throw CapabilityError("model does not provide a scoring embedding");
  }
  virtual Mat scoring_input_grad(const Mat& grad_embedding) {
    throw CapabilityError("model does not provide scoring input gradients");
  }
};

// hat_h = softmax(alpha * h / (||h||_inf + 1e-12)).
inline Vec rescale_softmax(const Vec& logits, double alpha) {
  if (!logits.allFinite())
    throw ContractViolation("rescale_softmax: non-finite logits");
  const double max_abs = logits.cwiseAbs().maxCoeff();
  Vec scaled = alpha * logits / (max_abs + 1e-12);
  const double m = scaled.maxCoeff();
  Vec e = (scaled.array() - m).exp();
  return e / e.sum();
}

// Adjoint of rescale_softmax, including the ||h||_inf dependence through the
// first max-magnitude coordinate (subgradient choice: lowest index).
inline Vec rescale_softmax_backward(const Vec& logits, double alpha,
                                    const Vec& grad_out) {
  const Vec hat = rescale_softmax(logits, alpha);
  // Softmax adjoint into the scaled logits u.
  Vec gu = hat.cwiseProduct(grad_out - Vec::Constant(hat.size(), grad_out.dot(hat)));
  const double max_abs = logits.cwiseAbs().maxCoeff();
  const double denom = max_abs + 1e-12;
  Vec gh = alpha * gu / denom;
  Eigen::Index m = 0;
  logits.cwiseAbs().maxCoeff(&m);
  const double sign_m = logits(m) > 0.0 ? 1.0 : (logits(m) < 0.0 ? -1.0 : 0.0);
  gh(m) += -alpha * sign_m * gu.dot(logits) / (denom * denom);
  return gh;
}

// || rescale_softmax(h) + sigma*noise - y ||_2, divided by beta while the
// model still classifies the sample correctly. noise holds standard-normal
// draws (injected for determinism) that are scaled by sigma here.
inline double jitter_loss(const Vec& logits, const Vec& one_hot, double alpha,
                          double sigma, double beta, bool is_correct,
                          const Vec& noise) {
  const Vec hat = rescale_softmax(logits, alpha);
  const double l2 = (hat + sigma * noise - one_hot).norm();
  return is_correct ? l2 / beta : l2;
}

// Value + d loss / d logits.
inline std::pair<double, Vec> jitter_loss_with_grad(const Vec& logits,
                                                    const Vec& one_hot, double alpha,
                                                    double sigma, double beta,
                                                    bool is_correct, const Vec& noise) {
  const Vec hat = rescale_softmax(logits, alpha);
  const Vec resid = hat + sigma * noise - one_hot;
  const double l2 = resid.norm();
  const double scale = is_correct ? 1.0 / beta : 1.0;
  if (l2 < 1e-12) return {scale * l2, Vec::Zero(logits.size())};
  Vec ghat = (scale / l2) * resid;
  return {scale * l2, rescale_softmax_backward(logits, alpha, ghat)};
}

namespace detail {

inline Mat signum(const Mat& g) {
  return g.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// Step, project onto the epsilon-ball around clean, clamp to the data range.
inline void ascend_step(Mat& adv, const Mat& clean, const Mat& grad, double step,
                        double epsilon, const std::array<double, 2>& range) {
  adv += step * signum(grad);
  Mat delta = (adv - clean).cwiseMax(-epsilon).cwiseMin(epsilon);
  adv = (clean + delta).cwiseMax(range[0]).cwiseMin(range[1]);
}

inline Mat one_hot_rows(const std::vector<int>& labels, Eigen::Index num_classes) {
  Mat y = Mat::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ContractViolation("attack: label out of range");
    y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return y;
}

inline std::vector<int> argmax_rows(const Mat& m) {
  std::vector<int> out(static_cast<size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index j = 0;
    m.row(i).maxCoeff(&j);
    out[static_cast<size_t>(i)] = static_cast<int>(j);
  }
  return out;
}

inline void check_clean_batch(const Mat& x, const std::vector<int>& y,
                              const AttackConfig& cfg) {
  if (static_cast<Eigen::Index>(y.size()) != x.rows())
    throw ContractViolation("attack: labels/batch size mismatch");
  if (x.minCoeff() < cfg.input_range[0] - 1e-9 ||
      x.maxCoeff() > cfg.input_range[1] + 1e-9)
    throw ContractViolation("attack: clean batch outside input_range");
}

inline std::vector<bool> correctness(DifferentiableModel& model, const Mat& x,
                                     const std::vector<int>& y) {
  const std::vector<int> pred = argmax_rows(model.logits(x));
  std::vector<bool> ok(y.size());
  for (size_t i = 0; i < y.size(); ++i) ok[i] = pred[i] == y[i];
  return ok;
}

// d/dlogits of the summed per-sample cross-entropy: softmax(row) - one_hot.
inline Mat ce_grad_logits(const Mat& h, const std::vector<int>& labels) {
  const Mat y = one_hot_rows(labels, h.cols());
  Mat grad(h.rows(), h.cols());
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    Vec row = h.row(i).transpose();
    const double m = row.maxCoeff();
    Vec p = (row.array() - m).exp();
    p /= p.sum();
    grad.row(i) = (p - y.row(i).transpose()).transpose();
  }
  return grad;
}

}  // namespace detail

// Iterative Jitter ascent: per sample, per step, the rescaled-softmax L2
// objective with fresh noise, the beta branch tested against the current
// perturbed prediction, then a signed-gradient step.
inline AdversarialBatch generate_jitter(const Mat& x, const std::vector<int>& labels,
                                        DifferentiableModel& model,
                                        const AttackConfig& cfg, Rng& rng) {
  detail::check_clean_batch(x, labels, cfg);
  AdversarialBatch batch;
  batch.clean = x;
  batch.perturbed = x;
  batch.labels = labels;

  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int step = 0; step < cfg.num_steps; ++step) {
    const Mat h = model.logits(batch.perturbed);
    const Eigen::Index k = h.cols();
    const Mat y = detail::one_hot_rows(labels, k);
    Mat grad_logits(h.rows(), k);
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      Vec noise(k);
      for (Eigen::Index j = 0; j < k; ++j) noise(j) = gauss(rng);
      Eigen::Index pred = 0;
      h.row(i).maxCoeff(&pred);
      const bool is_correct = static_cast<int>(pred) == labels[i];
      auto [value, grad] = jitter_loss_with_grad(
          h.row(i).transpose(), y.row(i).transpose(), cfg.jitter_alpha,
          cfg.jitter_sigma, cfg.jitter_beta, is_correct, noise);
      (void)value;
      grad_logits.row(i) = grad.transpose();
    }
    const Mat gx = model.logits_input_grad(grad_logits);
    detail::ascend_step(batch.perturbed, batch.clean, gx, cfg.step_size, cfg.epsilon,
                        cfg.input_range);
  }
  batch.success_mask = detail::correctness(model, batch.perturbed, labels);
  return batch;
}

// l-infinity PGD with the cross-entropy ascent objective and optional uniform
// random start inside the epsilon-ball.
inline AdversarialBatch generate_pgd(const Mat& x, const std::vector<int>& labels,
                                     DifferentiableModel& model, const AttackConfig& cfg,
                                     Rng& rng) {
  detail::check_clean_batch(x, labels, cfg);
  AdversarialBatch batch;
  batch.clean = x;
  batch.perturbed = x;
  batch.labels = labels;

  if (cfg.pgd_random_start && cfg.epsilon > 0.0) {
    std::uniform_real_distribution<double> uni(-cfg.epsilon, cfg.epsilon);
    Mat start = x;
    for (Eigen::Index i = 0; i < start.rows(); ++i)
      for (Eigen::Index j = 0; j < start.cols(); ++j) start(i, j) += uni(rng);
    batch.perturbed = start.cwiseMax(cfg.input_range[0]).cwiseMin(cfg.input_range[1]);
  }

  for (int step = 0; step < cfg.num_steps; ++step) {
    const Mat h = model.logits(batch.perturbed);
    const Mat gx = model.logits_input_grad(detail::ce_grad_logits(h, labels));
    detail::ascend_step(batch.perturbed, batch.clean, gx, cfg.step_size, cfg.epsilon,
                        cfg.input_range);
  }
  batch.success_mask = detail::correctness(model, batch.perturbed, labels);
  return batch;
}

// Single signed cross-entropy-gradient step of magnitude epsilon, no random
// start.
inline AdversarialBatch generate_fgsm(const Mat& x, const std::vector<int>& labels,
                                      DifferentiableModel& model,
                                      const AttackConfig& cfg) {
  detail::check_clean_batch(x, labels, cfg);
  AdversarialBatch batch;
  batch.clean = x;
  batch.perturbed = x;
  batch.labels = labels;
  const Mat h = model.logits(batch.perturbed);
  const Mat gx = model.logits_input_grad(detail::ce_grad_logits(h, labels));
  detail::ascend_step(batch.perturbed, batch.clean, gx, cfg.epsilon, cfg.epsilon,
                      cfg.input_range);
  batch.success_mask = detail::correctness(model, batch.perturbed, labels);
  return batch;
}

// Dispatch by cfg.name; "none" returns the clean batch (trivially successful).
inline AdversarialBatch generate_attack(const Mat& x, const std::vector<int>& labels,
                                        DifferentiableModel& model,
                                        const AttackConfig& cfg, Rng& rng) {
  if (cfg.name == "none") {
    AdversarialBatch batch;
    batch.clean = x;
    batch.perturbed = x;
    batch.labels = labels;
    batch.success_mask = detail::correctness(model, x, labels);
    return batch;
  }
  if (cfg.name == "jitter") return generate_jitter(x, labels, model, cfg, rng);
  if (cfg.name == "pgd") return generate_pgd(x, labels, model, cfg, rng);
  if (cfg.name == "fgsm") return generate_fgsm(x, labels, model, cfg);
  throw ConfigError("generate_attack: unknown attack '" + cfg.name + "'");
}

// Score-descent attack on outliers: push the OOD score of each sample down
// within the epsilon-ball, using the same step schedule as the ID attack.
// Labels become the clean-input predictions (no ground truth for OOD).
inline AdversarialBatch attack_ood_score_descent(const Mat& x,
                                                 DifferentiableModel& model,
                                                 const Scorer& scorer,
                                                 const AttackConfig& cfg) {
  AdversarialBatch batch;
  batch.clean = x;
  batch.perturbed = x;
  batch.labels = detail::argmax_rows(model.logits(x));

  const int steps = cfg.name == "fgsm" ? 1 : cfg.num_steps;
  const double step = cfg.name == "fgsm" ? cfg.epsilon : cfg.step_size;
  for (int s = 0; s < steps; ++s) {
    const Mat z = model.scoring_embedding(batch.perturbed);
    Mat gz(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i)
      gz.row(i) = scorer.score_grad(z.row(i).transpose()).transpose();
    const Mat gx = model.scoring_input_grad(gz);
    // Descend on the score: negate the ascent step.
    detail::ascend_step(batch.perturbed, batch.clean, Mat(-gx), step, cfg.epsilon,
                        cfg.input_range);
  }
  batch.success_mask = detail::correctness(model, batch.perturbed, batch.labels);
  return batch;
}

// Evaluation-time attack pair for (ID, OOD) test sets under the given policy:
//   none     -> both returned unperturbed
//   id_only  -> inliers attacked through the classification objective
//   ood_only -> outliers attacked through OOD-score descent
//   both     -> both sides attacked
inline std::pair<AdversarialBatch, AdversarialBatch> attack_for_eval(
    const Mat& id_x, const std::vector<int>& id_labels, const Mat& ood_x,
    DifferentiableModel& model, const Scorer& scorer, const AttackConfig& cfg,
    const std::string& policy, Rng& rng) {
  if (policy != "none" && policy != "id_only" && policy != "ood_only" &&
      policy != "both")
    throw ConfigError("attack_for_eval: unknown policy '" + policy + "'");

  const bool attack_id = (policy == "id_only" || policy == "both") && cfg.name != "none";
  const bool attack_ood = (policy == "ood_only" || policy == "both") && cfg.name != "none";

  AdversarialBatch id_batch;
  if (attack_id) {
    id_batch = generate_attack(id_x, id_labels, model, cfg, rng);
  } else {
    id_batch.clean = id_x;
    id_batch.perturbed = id_x;
    id_batch.labels = id_labels;
    id_batch.success_mask = detail::correctness(model, id_x, id_labels);
  }

  AdversarialBatch ood_batch;
  if (attack_ood) {
    ood_batch = attack_ood_score_descent(ood_x, model, scorer, cfg);
  } else {
    ood_batch.clean = ood_x;
    ood_batch.perturbed = ood_x;
    ood_batch.labels = detail::argmax_rows(model.logits(ood_x));
    ood_batch.success_mask.assign(static_cast<size_t>(ood_x.rows()), true);
  }
  return {std::move(id_batch), std::move(ood_batch)};
}

}  // namespace sagd
