#pragma once

// Hypersphere and Poincare-ball primitives: Mobius gyrovector arithmetic,
// conformal factor, geodesic distance, exponential/log maps at the origin,
// feature clipping and unit-sphere projection. Everything is a pure function;
// the reverse-mode helpers (suffix _backward / _grad) return the exact
// adjoints used by the loss stack and are checked against finite differences
// in the test suite.

#include "sagd/common.hpp"

#include <cmath>
#include <limits>

namespace sagd {

struct BallConfig {
  double curvature = 0.01;   // c > 0
  double clip_radius = 2.0;  // effective radius r for feature clipping
  double boundary_eps = 1e-5;

  void validate() const {
    if (!(curvature > 0.0)) throw ConfigError("BallConfig: curvature must be > 0");
    if (!(clip_radius > 0.0)) throw ConfigError("BallConfig: clip_radius must be > 0");
    if (!(boundary_eps > 0.0 && boundary_eps <= 1e-3))
      throw ConfigError("BallConfig: boundary_eps must be in (0, 1e-3]");
  }

  // Largest admissible squared norm: c*||u||^2 <= 1 - boundary_eps.
  double max_sq_norm() const { return (1.0 - boundary_eps) / curvature; }
};

namespace detail {

inline void check_same_dim(const Vec& u, const Vec& v, const char* what) {
  if (u.size() != v.size())
    throw ContractViolation(std::string(what) + ": dimension mismatch (" +
                            std::to_string(u.size()) + " vs " +
                            std::to_string(v.size()) + ")");
}

// Radially rescale x onto the 1 - boundary_eps shell if it escaped the
// open ball. Keeps arctanh away from its pole during training.
inline Vec clamp_to_ball(Vec x, const BallConfig& cfg) {
  const double sq = x.squaredNorm();
  const double max_sq = cfg.max_sq_norm();
  if (sq > max_sq) x *= std::sqrt(max_sq / sq);
  return x;
}

}  // namespace detail

// Point strictly inside the curvature-c Poincare ball. Construction clamps
// or checks; coords() is then safe for every ball operation below.
class PoincarePoint {
 public:
  PoincarePoint() = default;

  // Validating constructor: rejects points on or outside the boundary,
  // then clamps to the boundary_eps shell.
  static PoincarePoint checked(Vec coords, const BallConfig& cfg) {
    if (!coords.allFinite())
      throw ContractViolation("PoincarePoint: non-finite coordinates");
    if (cfg.curvature * coords.squaredNorm() >= 1.0)
      throw DegenerateInput("PoincarePoint: point not strictly inside the ball");
    return PoincarePoint(detail::clamp_to_ball(std::move(coords), cfg));
  }

  // Clamping constructor: any finite vector is pulled inside the shell.
  static PoincarePoint clamped(Vec coords, const BallConfig& cfg) {
    if (!coords.allFinite())
      throw ContractViolation("PoincarePoint: non-finite coordinates");
    return PoincarePoint(detail::clamp_to_ball(std::move(coords), cfg));
  }

  // Trusts the caller. For internal hot paths and for tests that need to
  // probe the guards with out-of-contract coordinates.
  static PoincarePoint unchecked(Vec coords) {
    return PoincarePoint(std::move(coords));
  }

  static PoincarePoint origin(Eigen::Index dim) {
    return PoincarePoint(Vec::Zero(dim));
  }

  const Vec& coords() const { return coords_; }
  Eigen::Index dim() const { return coords_.size(); }

 private:
  explicit PoincarePoint(Vec coords) : coords_(std::move(coords)) {}
  Vec coords_;
};

// Unit-norm vector on the hypersphere (tolerance 1e-6).
class UnitVector {
 public:
  UnitVector() = default;

  static UnitVector checked(Vec coords) {
    if (std::abs(coords.norm() - 1.0) > 1e-6)
      throw ContractViolation("UnitVector: norm deviates from 1 by more than 1e-6");
    return UnitVector(std::move(coords));
  }

  static UnitVector unchecked(Vec coords) { return UnitVector(std::move(coords)); }

  const Vec& coords() const { return coords_; }
  Eigen::Index dim() const { return coords_.size(); }

 private:
  explicit UnitVector(Vec coords) : coords_(std::move(coords)) {}
  Vec coords_;
};

// ---------------------------------------------------------------------------
// Raw-vector kernels. Preconditions are the ball invariants; the wrapper
// overloads below enforce them.
// ---------------------------------------------------------------------------

// Mobius addition u (+)_c v on the gyrovector space:
//   ((1 + 2c<u,v> + c|v|^2) u + (1 - c|u|^2) v) / (1 + 2c<u,v> + c^2|u|^2|v|^2)
inline Vec mobius_add_raw(const Vec& u, const Vec& v, const BallConfig& cfg) {
  detail::check_same_dim(u, v, "mobius_add");
  const double c = cfg.curvature;
  const double uv = u.dot(v);
  const double u2 = u.squaredNorm();
  const double v2 = v.squaredNorm();
  const double den = 1.0 + 2.0 * c * uv + c * c * u2 * v2;
  if (den < 1e-12)
    throw DegenerateInput("mobius_add: denominator below 1e-12");
  return detail::clamp_to_ball(
      ((1.0 + 2.0 * c * uv + c * v2) * u + (1.0 - c * u2) * v) / den, cfg);
}

inline PoincarePoint mobius_add(const PoincarePoint& u, const PoincarePoint& v,
                                const BallConfig& cfg) {
  return PoincarePoint::unchecked(mobius_add_raw(u.coords(), v.coords(), cfg));
}

// Adjoint of w = mobius_add_raw(u, v): given dL/dw, accumulate dL/du, dL/dv.
// The boundary clamp is treated as inactive (it never fires on the training
// path because inputs are kept inside the shell).
inline void mobius_add_backward(const Vec& u, const Vec& v, const BallConfig& cfg,
                                const Vec& grad_w, Vec& grad_u, Vec& grad_v) {
  const double c = cfg.curvature;
  const double uv = u.dot(v);
  const double u2 = u.squaredNorm();
  const double v2 = v.squaredNorm();
  const double a = 1.0 + 2.0 * c * uv + c * v2;   // coefficient of u
  const double b = 1.0 - c * u2;                  // coefficient of v
  const double den = 1.0 + 2.0 * c * uv + c * c * u2 * v2;
  const Vec w = (a * u + b * v) / den;

  const double gu_dot = grad_w.dot(u);
  const double gv_dot = grad_w.dot(v);
  const double gw_dot = grad_w.dot(w);

  // d num / du contributions, then the quotient-rule denominator term.
  grad_u += (a * grad_w + 2.0 * c * gu_dot * v - 2.0 * c * gv_dot * u) / den -
            (gw_dot / den) * (2.0 * c * v + 2.0 * c * c * v2 * u);
  grad_v += (2.0 * c * gu_dot * (u + v) + b * grad_w) / den -
            (gw_dot / den) * (2.0 * c * u + 2.0 * c * c * u2 * v);
}

// Mobius scalar multiplication r (x)_c u.
inline Vec mobius_scalar_raw(double r, const Vec& u, const BallConfig& cfg) {
  const double s = std::sqrt(cfg.curvature);
  const double n = u.norm();
  if (n < 1e-15) return Vec::Zero(u.size());
  const double scaled = std::tanh(r * std::atanh(s * n)) / (s * n);
  return detail::clamp_to_ball(scaled * u, cfg);
}

inline PoincarePoint mobius_scalar(double r, const PoincarePoint& u,
                                   const BallConfig& cfg) {
  return PoincarePoint::unchecked(mobius_scalar_raw(r, u.coords(), cfg));
}

// lambda_u = 2 / (1 - c|u|^2), the conformal factor of the ball metric.
inline double conformal_factor_raw(const Vec& u, const BallConfig& cfg) {
  const double t = 1.0 - cfg.curvature * u.squaredNorm();
  if (t <= 0.0)
    throw DegenerateInput("conformal_factor: point on or outside the ball boundary");
  return 2.0 / t;
}

inline double conformal_factor(const PoincarePoint& u, const BallConfig& cfg) {
  return conformal_factor_raw(u.coords(), cfg);
}

// Geodesic distance D(u, v) = (2/sqrt(c)) atanh(sqrt(c) | -u (+)_c v |).
inline double geodesic_distance_raw(const Vec& u, const Vec& v,
                                    const BallConfig& cfg) {
  const Vec w = mobius_add_raw(-u, v, cfg);
  const double s = std::sqrt(cfg.curvature);
  const double arg = std::min(s * w.norm(), 1.0 - 1e-15);
  return 2.0 / s * std::atanh(arg);
}

inline double geodesic_distance(const PoincarePoint& u, const PoincarePoint& v,
                                const BallConfig& cfg) {
  return geodesic_distance_raw(u.coords(), v.coords(), cfg);
}

// Accumulates dL/du and dL/dv for D = geodesic_distance_raw(u, v) given the
// scalar adjoint dL/dD. Zero-distance pairs get a zero subgradient.
inline void geodesic_distance_backward(const Vec& u, const Vec& v,
                                       const BallConfig& cfg, double grad_d,
                                       Vec& grad_u, Vec& grad_v) {
  const Vec mu = -u;
  const Vec w = mobius_add_raw(mu, v, cfg);
  const double c = cfg.curvature;
  const double wn = w.norm();
  if (wn < 1e-12 || grad_d == 0.0) return;
  // dD/dw = 2 w / ((1 - c|w|^2) |w|)
  const double denom = (1.0 - c * wn * wn) * wn;
  const Vec grad_w = (2.0 * grad_d / denom) * w;
  Vec grad_mu = Vec::Zero(u.size());
  mobius_add_backward(mu, v, cfg, grad_w, grad_mu, grad_v);
  grad_u -= grad_mu;
}

// exp_0(v) = tanh(sqrt(c)|v|) * v / (sqrt(c)|v|); maps any tangent vector at
// the origin into the open ball.
inline Vec exp_map_origin_raw(const Vec& v, const BallConfig& cfg) {
  if (!v.allFinite()) throw ContractViolation("exp_map_origin: non-finite input");
  const double s = std::sqrt(cfg.curvature);
  const double n = v.norm();
  const double sn = s * n;
  double f;  // tanh(sn)/(sn), extended by continuity at 0
  if (sn < 1e-4) {
    f = 1.0 - sn * sn / 3.0 + 2.0 * std::pow(sn, 4) / 15.0;
  } else {
    f = std::tanh(sn) / sn;
  }
  return detail::clamp_to_ball(f * v, cfg);
}

inline PoincarePoint exp_map_origin(const Vec& v, const BallConfig& cfg) {
  return PoincarePoint::unchecked(exp_map_origin_raw(v, cfg));
}

// Adjoint of u = exp_map_origin_raw(v). Assumes the boundary clamp did not
// fire (guaranteed when |v| is feature-clipped first).
inline Vec exp_map_origin_backward(const Vec& v, const BallConfig& cfg,
                                   const Vec& grad_u) {
  const double s = std::sqrt(cfg.curvature);
  const double n = v.norm();
  const double sn = s * n;
  double f, fp_over_n;  // f(n) = tanh(sn)/(sn), fp_over_n = f'(n)/n
  if (sn < 1e-4) {
    f = 1.0 - sn * sn / 3.0 + 2.0 * std::pow(sn, 4) / 15.0;
    fp_over_n = s * s * (-2.0 / 3.0 + 8.0 * sn * sn / 15.0);
  } else {
    const double th = std::tanh(sn);
    const double sech2 = 1.0 - th * th;
    f = th / sn;
    fp_over_n = sech2 / (n * n) - th / (s * n * n * n);
  }
  return f * grad_u + grad_u.dot(v) * fp_over_n * v;
}

// log_0(u) = atanh(sqrt(c)|u|) * u / (sqrt(c)|u|); inverse of exp_map_origin.
inline Vec log_map_origin_raw(const Vec& u, const BallConfig& cfg) {
  const double s = std::sqrt(cfg.curvature);
  const double n = u.norm();
  const double sn = s * n;
  if (sn >= 1.0)
    throw DegenerateInput("log_map_origin: point on or outside the ball boundary");
  double f;
  if (sn < 1e-4) {
    f = 1.0 + sn * sn / 3.0 + std::pow(sn, 4) / 5.0;
  } else {
    f = std::atanh(sn) / sn;
  }
  return f * u;
}

inline Vec log_map_origin(const PoincarePoint& u, const BallConfig& cfg) {
  return log_map_origin_raw(u.coords(), cfg);
}

// x' = min(1, r/|x|) x: radial truncation to norm r, direction preserved.
inline Vec feature_clip(const Vec& x, double r) {
  if (!x.allFinite()) throw ContractViolation("feature_clip: non-finite input");
  const double n = x.norm();
  if (n <= r || n == 0.0) return x;
  return (r / n) * x;
}

// Adjoint of y = feature_clip(x).
inline Vec feature_clip_backward(const Vec& x, double r, const Vec& grad_y) {
  const double n = x.norm();
  if (n <= r || n == 0.0) return grad_y;
  const Vec dir = x / n;
  return (r / n) * (grad_y - grad_y.dot(dir) * dir);
}

// x / |x| with a degenerate-input guard.
inline Vec sphere_project_raw(const Vec& x) {
  const double n = x.norm();
  if (n <= 1e-12)
    throw DegenerateInput("sphere_project: input norm below 1e-12");
  return x / n;
}

inline UnitVector sphere_project(const Vec& x) {
  return UnitVector::unchecked(sphere_project_raw(x));
}

// Adjoint of y = x/|x|: (g - <g,y> y) / |x|.
inline Vec sphere_project_backward(const Vec& x, const Vec& grad_y) {
  const double n = x.norm();
  const Vec y = x / n;
  return (grad_y - grad_y.dot(y) * y) / n;
}

}  // namespace sagd
