#pragma once

// Riemannian sharpness-aware minimization: a two-pass perturb-then-descend
// optimizer over tagged parameter groups (euclidean / sphere / poincare),
// plus a loss-landscape sharpness probe. The perturbation pass climbs to
// theta* = R_theta(rho * grad / ||grad||_theta); the descent pass applies the
// theta*-gradient at theta through the same retraction, with momentum and
// weight decay on the descent only.

#include "sagd/common.hpp"
#include "sagd/geometry.hpp"
#include "sagd/model.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace sagd {

enum class ManifoldKind { euclidean, sphere, poincare };

struct ManifoldTag {
  ManifoldKind kind = ManifoldKind::euclidean;
  double curvature = 0.01;  // poincare only

  BallConfig ball() const {
    BallConfig b;
    b.curvature = curvature;
    return b;
  }
};

inline std::string to_string(ManifoldKind k) {
  switch (k) {
    case ManifoldKind::euclidean: return "euclidean";
    case ManifoldKind::sphere: return "sphere";
    case ManifoldKind::poincare: return "poincare";
  }
  return "?";
}

struct RSAMConfig {
  double rho = 0.05;         // 0 degrades to the base optimizer
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_norm_eps = 1e-12;
  std::string radius_mode = "per_group";  // per_group | global

  void validate() const {
    if (!(rho >= 0.0)) throw ConfigError("RSAMConfig: rho must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("RSAMConfig: lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw ConfigError("RSAMConfig: momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("RSAMConfig: weight_decay must be >= 0");
    if (radius_mode != "per_group" && radius_mode != "global")
      throw ConfigError("RSAMConfig: radius_mode must be per_group or global");
  }
};

// Euclidean gradient -> Riemannian gradient at theta for the tagged manifold.
inline Vec riemannian_gradient(const Vec& euclidean_grad, const Vec& theta,
                               const ManifoldTag& tag) {
  if (euclidean_grad.size() != theta.size())
    throw ContractViolation("riemannian_gradient: shape mismatch");
  switch (tag.kind) {
    case ManifoldKind::euclidean:
      return euclidean_grad;
    case ManifoldKind::sphere: {
      // Tangent projection at unit theta.
      return euclidean_grad - euclidean_grad.dot(theta) * theta;
    }
    case ManifoldKind::poincare: {
      const double lam = conformal_factor_raw(theta, tag.ball());
      return euclidean_grad / (lam * lam);
    }
  }
  throw ContractViolation("riemannian_gradient: bad tag");
}

// Norm of a tangent vector in the tag's metric at theta.
inline double tangent_norm(const Vec& v, const Vec& theta, const ManifoldTag& tag) {
  if (tag.kind == ManifoldKind::poincare)
    return conformal_factor_raw(theta, tag.ball()) * v.norm();
  return v.norm();
}

// delta* = rho * riem_grad / ||riem_grad||_theta, or zero under the guard.
inline Vec compute_perturbation(const Vec& riem_grad, double rho, const ManifoldTag& tag,
                                const Vec& theta, double grad_norm_eps = 1e-12) {
  if (rho == 0.0) return Vec::Zero(riem_grad.size());
  const double n = tangent_norm(riem_grad, theta, tag);
  if (n < grad_norm_eps) return Vec::Zero(riem_grad.size());
  return (rho / n) * riem_grad;
}

// Retraction onto the manifold; exact identity at delta = 0.
inline Vec retraction(const Vec& theta, const Vec& delta, const ManifoldTag& tag) {
  if (delta.size() != theta.size())
    throw ContractViolation("retraction: shape mismatch");
  if (delta.isZero(0.0)) return theta;
  switch (tag.kind) {
    case ManifoldKind::euclidean:
      return theta + delta;
    case ManifoldKind::sphere: {
      Vec sum = theta + delta;
      const double n = sum.norm();
      if (n < 1e-15) return theta;  // antipodal degenerate step: stay put
      return sum / n;
    }
    case ManifoldKind::poincare: {
      const BallConfig ball = tag.ball();
      const double lam = conformal_factor_raw(theta, ball);
      const double s = std::sqrt(ball.curvature);
      const double n = delta.norm();
      // exp_theta(delta) = theta (+)_c tanh(s*lam*n/2) * delta / (s*n)
      const Vec inner = std::tanh(s * lam * n / 2.0) / (s * n) * delta;
      return mobius_add_raw(theta, inner, ball);
    }
  }
  throw ContractViolation("retraction: bad tag");
}

// One tagged parameter group the optimizer owns during a step.
struct ParamGroup {
  TensorRef ref;
  ManifoldTag tag;
};

struct StepReport {
  double loss_at_theta = 0.0;
  double loss_at_perturbed = 0.0;
  double grad_norm = 0.0;            // joint metric norm of the pass-1 gradient
  double perturbed_grad_norm = 0.0;  // joint metric norm of the pass-2 gradient
};

// The base optimizer RSAM degrades to at rho = 0: Riemannian momentum-SGD.
// Descent direction d = riem_grad + weight_decay * theta, momentum buffer
// buf = momentum * buf + d, update theta <- R_theta(-lr * buf).
class RsamOptimizer {
 public:
  RsamOptimizer(std::vector<ParamGroup> groups, RSAMConfig cfg)
      : groups_(std::move(groups)), cfg_(std::move(cfg)) {
    cfg_.validate();
    momentum_.reserve(groups_.size());
    for (const auto& g : groups_) momentum_.push_back(Vec::Zero(g.ref.size));
  }

  const RSAMConfig& config() const { return cfg_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

  // Schedulers adjust the learning rate between steps.
  void set_lr(double lr) {
    if (!(lr > 0.0)) throw ConfigError("set_lr: lr must be > 0");
    cfg_.lr = lr;
  }

  // loss_closure recomputes the loss AND fills every group's gradient buffer
  // for the current parameter values; it must be deterministic so the two
  // passes see the same batch.
  StepReport step(const std::function<double()>& loss_closure) {
    StepReport report;
    report.loss_at_theta = evaluate(loss_closure);

    // Pass 1: Riemannian gradients and the sharpness perturbation.
    std::vector<Vec> theta0(groups_.size());
    std::vector<Vec> riem(groups_.size());
    for (size_t i = 0; i < groups_.size(); ++i) {
      theta0[i] = groups_[i].ref.value_map();
      riem[i] = riemannian_gradient(groups_[i].ref.grad_map(), theta0[i], groups_[i].tag);
    }
    report.grad_norm = joint_norm(riem, theta0);

    std::vector<Vec> delta(groups_.size());
    if (cfg_.radius_mode == "per_group") {
      for (size_t i = 0; i < groups_.size(); ++i)
        delta[i] = compute_perturbation(riem[i], cfg_.rho, groups_[i].tag, theta0[i],
                                        cfg_.grad_norm_eps);
    } else {
      const double joint = report.grad_norm;
      for (size_t i = 0; i < groups_.size(); ++i)
        delta[i] = (cfg_.rho == 0.0 || joint < cfg_.grad_norm_eps)
                       ? Vec::Zero(riem[i].size())
                       : Vec((cfg_.rho / joint) * riem[i]);
    }

    // Pass 2: gradients at theta* = R_theta(delta*).
    for (size_t i = 0; i < groups_.size(); ++i)
      groups_[i].ref.value_map() = retraction(theta0[i], delta[i], groups_[i].tag);
    report.loss_at_perturbed = evaluate(loss_closure);

    std::vector<Vec> riem_star(groups_.size());
    for (size_t i = 0; i < groups_.size(); ++i) {
      // Gradient taken at theta*, applied at theta (tangent space of theta).
      riem_star[i] =
          riemannian_gradient(groups_[i].ref.grad_map(), theta0[i], groups_[i].tag);
      groups_[i].ref.value_map() = theta0[i];  // exact restore
    }
    report.perturbed_grad_norm = joint_norm(riem_star, theta0);

    descend(riem_star, theta0);
    return report;
  }

 private:
  double evaluate(const std::function<double()>& loss_closure) {
    const double loss = loss_closure();
    if (!std::isfinite(loss))
      throw DivergenceError("rsam_step: non-finite loss " + format_double(loss));
    return loss;
  }

  double joint_norm(const std::vector<Vec>& vs, const std::vector<Vec>& thetas) const {
    double sq = 0.0;
    for (size_t i = 0; i < vs.size(); ++i) {
      const double n = tangent_norm(vs[i], thetas[i], groups_[i].tag);
      sq += n * n;
    }
    return std::sqrt(sq);
  }

  void descend(const std::vector<Vec>& riem, const std::vector<Vec>& theta0) {
    for (size_t i = 0; i < groups_.size(); ++i) {
      Vec d = riem[i] + cfg_.weight_decay * theta0[i];
      momentum_[i] = cfg_.momentum * momentum_[i] + d;
      groups_[i].ref.value_map() =
          retraction(theta0[i], Vec(-cfg_.lr * momentum_[i]), groups_[i].tag);
    }
  }

  std::vector<ParamGroup> groups_;
  RSAMConfig cfg_;
  std::vector<Vec> momentum_;
};

// Reference single-pass optimizer (the rho = 0 baseline). Kept separate so
// the degeneracy test can compare two independent code paths bitwise.
class BaseSgd {
 public:
  BaseSgd(std::vector<ParamGroup> groups, RSAMConfig cfg)
      : groups_(std::move(groups)), cfg_(std::move(cfg)) {
    for (const auto& g : groups_) momentum_.push_back(Vec::Zero(g.ref.size));
  }

  double step(const std::function<double()>& loss_closure) {
    const double loss = loss_closure();
    if (!std::isfinite(loss))
      throw DivergenceError("sgd_step: non-finite loss " + format_double(loss));
    for (size_t i = 0; i < groups_.size(); ++i) {
      const Vec theta = groups_[i].ref.value_map();
      Vec riem = riemannian_gradient(groups_[i].ref.grad_map(), theta, groups_[i].tag);
      Vec d = riem + cfg_.weight_decay * theta;
      momentum_[i] = cfg_.momentum * momentum_[i] + d;
      groups_[i].ref.value_map() =
          retraction(theta, Vec(-cfg_.lr * momentum_[i]), groups_[i].tag);
    }
    return loss;
  }

 private:
  std::vector<ParamGroup> groups_;
  RSAMConfig cfg_;
  std::vector<Vec> momentum_;
};

// L(R_theta(delta)) - L(theta) with delta the gradient-ascent direction of
// joint metric norm rho; with trials > 1, also the max over trials-1 random
// tangent directions of the same norm. Parameters are restored bit-exactly.
inline double sharpness_probe(const std::vector<ParamGroup>& groups,
                              const std::function<double()>& loss_closure, double rho,
                              int trials = 1, Rng* rng = nullptr,
                              double grad_norm_eps = 1e-12) {
  if (trials < 1) throw ContractViolation("sharpness_probe: trials must be >= 1");
  if (trials > 1 && rng == nullptr)
    throw ContractViolation("sharpness_probe: random trials need an rng");

  const double base = loss_closure();
  if (!std::isfinite(base)) throw DivergenceError("sharpness_probe: non-finite loss");

  std::vector<Vec> theta0(groups.size());
  std::vector<Vec> riem(groups.size());
  for (size_t i = 0; i < groups.size(); ++i) {
    theta0[i] = groups[i].ref.value_map();
    riem[i] = riemannian_gradient(groups[i].ref.grad_map(), theta0[i], groups[i].tag);
  }

  auto evaluate_direction = [&](const std::vector<Vec>& dir) {
    double sq = 0.0;
    for (size_t i = 0; i < groups.size(); ++i) {
      const double n = tangent_norm(dir[i], theta0[i], groups[i].tag);
      sq += n * n;
    }
    const double joint = std::sqrt(sq);
    if (joint < grad_norm_eps) return 0.0;
    for (size_t i = 0; i < groups.size(); ++i)
      groups[i].ref.value_map() =
          retraction(theta0[i], Vec((rho / joint) * dir[i]), groups[i].tag);
    const double perturbed = loss_closure();
    for (size_t i = 0; i < groups.size(); ++i)
      groups[i].ref.value_map() = theta0[i];
    if (!std::isfinite(perturbed))
      throw DivergenceError("sharpness_probe: non-finite perturbed loss");
    return perturbed - base;
  };

  double best = evaluate_direction(riem);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int t = 1; t < trials; ++t) {
    std::vector<Vec> dir(groups.size());
    for (size_t i = 0; i < groups.size(); ++i) {
      Vec v(groups[i].ref.size);
      for (Eigen::Index j = 0; j < v.size(); ++j) v(j) = gauss(*rng);
      if (groups[i].tag.kind == ManifoldKind::sphere)
        v -= v.dot(theta0[i]) * theta0[i];  // tangent at unit theta
      dir[i] = v;
    }
    best = std::max(best, evaluate_direction(dir));
  }
  return best;
}

}  // namespace sagd
