#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tdmargin/cosim.hpp"
#include "tdmargin/netmodel.hpp"
#include "tdmargin/tpf.hpp"

namespace tdmargin {

struct PvPoint {
  double lambda = 0.0;
  /// Voltage magnitude per monitored bus, aligned with PvCurve::bus_labels.
  std::vector<double> v_mag;
  /// Total ZIP active power consumed at this point, pu.
  double delivered = 0.0;
};

struct PvCurve {
  std::vector<std::string> bus_labels;
  std::vector<PvPoint> points;
  std::size_t nose_index = 0;
  double s_base_mva = 100.0;
  /// Set when tracing stopped early; `warning` says why.
  bool truncated = false;
  std::string warning;

  [[nodiscard]] const PvPoint& nose() const { return points.at(nose_index); }
  [[nodiscard]] std::optional<std::size_t> bus_column(const std::string& label) const {
    for (std::size_t i = 0; i < bus_labels.size(); ++i)
      if (bus_labels[i] == label) return i;
    return std::nullopt;
  }
  void update_nose() {
    nose_index = 0;
    for (std::size_t i = 1; i < points.size(); ++i)
      if (points[i].lambda > points[nose_index].lambda) nose_index = i;
  }
};

/// Voltage stability margin in MW: delivered ZIP power at the nose minus that at `base_index`.
inline double compute_vsm(const PvCurve& curve, std::size_t base_index, double s_base_mva) {
  if (curve.points.empty()) throw InputError("compute_vsm: empty curve");
  return (curve.nose().delivered - curve.points.at(base_index).delivered) * s_base_mva;
}

/// Margin from the load parameter alone: (lambda_nose - lambda_base) * sum of base P, MW.
inline double compute_lambda_vsm(const PvCurve& curve, std::size_t base_index, double total_p0,
                                 double s_base_mva) {
  return (curve.nose().lambda - curve.points.at(base_index).lambda) * total_p0 * s_base_mva;
}

// ---------------------------------------------------------------------------
// Continuation power flow on a monolithic network.
// Unknowns y = [angles(pv, pq); magnitudes(pq); lambda].

struct ContinuationState {
  double lambda = 1.0;
  PowerFlowSolution state;
  Eigen::VectorXd tangent;
  /// Index into y that is pinned by the corrector.
  Eigen::Index continuation_index = 0;
  double step = 0.0;
};

struct CpfOptions {
  double lambda_start = 1.0;
  double step_initial = 0.05;
  double step_min = 1e-4;
  double step_max = 0.1;
  std::size_t max_points = 5000;
  /// Stop on the lower branch once lambda falls to this fraction of the nose value.
  double lower_branch_stop = 0.5;
  /// Corrector Newton iterations before the step is halved.
  int corrector_max_iterations = 10;
  double tolerance = 1e-8;
  /// Golden-section tolerance on the pinned voltage when refining the nose.
  double nose_tolerance = 1e-9;
};

inline Eigen::VectorXd augmented_vector(const PowerFlowProblem& pf, const PowerFlowSolution& s, double lambda) {
  const Eigen::VectorXd x = pf.pack(s);
  Eigen::VectorXd y(x.size() + 1);
  y << x, lambda;
  return y;
}

/// [J  dF/dlambda; e_k^T] at the given point.
inline Eigen::MatrixXd augmented_jacobian(const PowerFlowProblem& pf, const PowerFlowSolution& s, double lambda,
                                          Eigen::Index continuation_index) {
  const auto n = static_cast<Eigen::Index>(pf.layout().size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + 1, n + 1);
  a.topLeftCorner(n, n) = pf.jacobian(s, lambda);
  a.topRightCorner(n, 1) = pf.lambda_derivative(s);
  a(n, continuation_index) = 1.0;
  return a;
}

/// Tangent along the solution curve with its continuation component fixed to
/// `sign` before normalisation. Returns nullopt when the augmented system is singular.
inline std::optional<Eigen::VectorXd> predictor_tangent(const Eigen::MatrixXd& augmented, double sign) {
  const auto n = augmented.rows();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  rhs(n - 1) = sign;
  auto t = detail::solve_dense(augmented, rhs);
  if (!t) return std::nullopt;
  return Eigen::VectorXd(*t / t->norm());
}

struct CorrectorResult {
  ContinuationState state;
  bool converged = false;
  int iterations = 0;
};

/// Newton solve of [F(y); y_k - target] = 0 starting from the predicted point.
inline CorrectorResult corrector_step(const PowerFlowProblem& pf, const ContinuationState& predicted,
                                      const CpfOptions& opt = {}) {
  CorrectorResult out{predicted, false, 0};
  auto& st = out.state;
  const auto n = static_cast<Eigen::Index>(pf.layout().size());
  const Eigen::Index k = predicted.continuation_index;
  const double target = augmented_vector(pf, predicted.state, predicted.lambda)(k);
  for (int it = 0;; ++it) {
    out.iterations = it;
    const Eigen::VectorXd f = pf.mismatch(st.state, st.lambda);
    const double err = f.size() ? f.lpNorm<Eigen::Infinity>() : 0.0;
    if (!std::isfinite(err)) return out;
    if (err <= opt.tolerance) {
      st.state.converged = true;
      st.state.max_mismatch = err;
      st.state.iterations = it;
      st.state.cause.clear();
      out.converged = true;
      return out;
    }
    if (it >= opt.corrector_max_iterations) return out;
    Eigen::VectorXd g(n + 1);
    g << f, augmented_vector(pf, st.state, st.lambda)(k) - target;
    const auto dy = detail::solve_dense(augmented_jacobian(pf, st.state, st.lambda, k), -g);
    if (!dy) return out;
    const Eigen::VectorXd y = augmented_vector(pf, st.state, st.lambda) + *dy;
    pf.unpack(y.head(n), st.state);
    st.lambda = y(n);
    if (!detail::plausible(st.state)) return out;
  }
}

namespace detail {

inline PvPoint make_point(const TransmissionNetwork& net, const PowerFlowSolution& s, double lambda) {
  return {lambda, s.v_mag, delivered_load(net, s, lambda)};
}

inline Eigen::Index largest_component(const Eigen::VectorXd& t) {
  Eigen::Index k = 0;
  t.cwiseAbs().maxCoeff(&k);
  return k;
}

/// Maximises lambda over the pinned coordinate `k` between two curve points
/// that bracket the nose. Returns the best corrected point found.
inline std::optional<ContinuationState> refine_nose(const PowerFlowProblem& pf, const ContinuationState& before,
                                                    const ContinuationState& after, Eigen::Index k,
                                                    const CpfOptions& opt) {
  const Eigen::VectorXd ya = augmented_vector(pf, before.state, before.lambda);
  const Eigen::VectorXd yb = augmented_vector(pf, after.state, after.lambda);
  const auto n = static_cast<Eigen::Index>(pf.layout().size());

  auto evaluate = [&](double frac) -> std::optional<ContinuationState> {
    ContinuationState guess = before;
    const Eigen::VectorXd y = ya + frac * (yb - ya);
    pf.unpack(y.head(n), guess.state);
    guess.lambda = y(n);
    guess.continuation_index = k;
    auto r = corrector_step(pf, guess, opt);
    if (!r.converged) return std::nullopt;
    return r.state;
  };

  // Golden-section search over the interpolation fraction of coordinate k.
  constexpr double kInvPhi = 0.6180339887498949;
  double lo = 0.0;
  double hi = 1.0;
  double c = hi - kInvPhi * (hi - lo);
  double d = lo + kInvPhi * (hi - lo);
  auto fc = evaluate(c);
  auto fd = evaluate(d);
  std::optional<ContinuationState> best;
  auto consider = [&](const std::optional<ContinuationState>& s) {
    if (s && (!best || s->lambda > best->lambda)) best = s;
  };
  consider(fc);
  consider(fd);
  const double span = std::abs(yb(k) - ya(k));
  while ((hi - lo) * span > opt.nose_tolerance) {
    const double lc = fc ? fc->lambda : -1.0;
    const double ld = fd ? fd->lambda : -1.0;
    if (lc > ld) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - kInvPhi * (hi - lo);
      fc = evaluate(c);
      consider(fc);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + kInvPhi * (hi - lo);
      fd = evaluate(d);
      consider(fd);
    }
  }
  return best;
}

}  // namespace detail

/// Traces the lambda-V curve of a monolithic network from `lambda_start`
/// through the nose onto the lower branch with a tangent predictor and a
/// locally parameterised corrector. The nose is located where the lambda
/// component of the tangent changes sign and refined by a golden-section
/// search on the pinned voltage. Throws InputError when no load grows with
/// lambda and ConvergenceError when the starting point cannot be solved.
inline PvCurve trace_cpf(const TransmissionNetwork& net, const CpfOptions& opt = {}) {
  const PowerFlowProblem pf(net, {});
  const auto n = static_cast<Eigen::Index>(pf.layout().size());
  const Eigen::Index lambda_index = n;

  PvCurve curve;
  for (const auto& bus : net.buses) curve.bus_labels.push_back(bus.label());

  NewtonOptions newton;
  newton.tolerance = opt.tolerance;
  newton.enforce_q_limits = false;
  auto base = solve_newton(net, {}, opt.lambda_start, std::nullopt, newton);
  if (!base.converged) throw ConvergenceError("trace_cpf: base case not solvable (" + base.cause + ")");
  if (pf.lambda_derivative(base).lpNorm<Eigen::Infinity>() == 0.0)
    throw InputError("trace_cpf: zero load direction");

  ContinuationState cur;
  cur.lambda = opt.lambda_start;
  cur.state = base;
  cur.continuation_index = lambda_index;
  cur.step = std::clamp(opt.step_initial, opt.step_min, opt.step_max);
  double sign = 1.0;
  {
    auto t = predictor_tangent(augmented_jacobian(pf, cur.state, cur.lambda, lambda_index), sign);
    if (!t) throw ConvergenceError("trace_cpf: singular augmented jacobian at the base case");
    cur.tangent = *t;
  }
  curve.points.push_back(detail::make_point(net, cur.state, cur.lambda));

  bool past_nose = false;
  int easy = 0;
  double lambda_peak = cur.lambda;
  while (curve.points.size() < opt.max_points) {
    // Next continuation parameter: the fastest-changing coordinate of the tangent.
    const Eigen::Index k = detail::largest_component(cur.tangent);
    ContinuationState pred = cur;
    const Eigen::VectorXd y = augmented_vector(pf, cur.state, cur.lambda) + cur.step * cur.tangent;
    pf.unpack(y.head(n), pred.state);
    pred.lambda = y(n);
    pred.continuation_index = k;

    auto corr = corrector_step(pf, pred, opt);
    if (!corr.converged) {
      cur.step *= 0.5;
      easy = 0;
      if (cur.step < opt.step_min) {
        curve.truncated = true;
        curve.warning = "corrector failed with step below step_min at lambda " + std::to_string(cur.lambda);
        break;
      }
      continue;
    }

    ContinuationState next = corr.state;
    next.continuation_index = k;
    const double orient = cur.tangent(k) >= 0.0 ? 1.0 : -1.0;
    auto t = predictor_tangent(augmented_jacobian(pf, next.state, next.lambda, k), orient);
    if (!t) {
      cur.step *= 0.5;
      easy = 0;
      if (cur.step < opt.step_min) {
        curve.truncated = true;
        curve.warning = "singular augmented jacobian at lambda " + std::to_string(next.lambda);
        break;
      }
      continue;
    }
    next.tangent = *t;
    next.step = cur.step;
    easy = corr.iterations < 3 ? easy + 1 : 0;
    if (easy >= 2) {
      next.step = std::min(2.0 * next.step, opt.step_max);
      easy = 0;
    }

    if (!past_nose && next.tangent(lambda_index) < 0.0) {
      past_nose = true;
      // Pin the voltage that moves most across the nose.
      const Eigen::VectorXd dy = augmented_vector(pf, next.state, next.lambda) -
                                 augmented_vector(pf, cur.state, cur.lambda);
      const auto na = static_cast<Eigen::Index>(pf.layout().pvpq.size());
      const Eigen::Index kv = n > na ? na + detail::largest_component(dy.segment(na, n - na))
                                     : detail::largest_component(dy.head(n));
      if (auto nose = detail::refine_nose(pf, cur, next, kv, opt); nose && nose->lambda > std::max(cur.lambda, next.lambda))
        curve.points.push_back(detail::make_point(net, nose->state, nose->lambda));
    }
    curve.points.push_back(detail::make_point(net, next.state, next.lambda));
    lambda_peak = std::max(lambda_peak, next.lambda);
    cur = std::move(next);

    if (past_nose && (cur.lambda <= opt.lower_branch_stop * lambda_peak || cur.lambda <= opt.lambda_start)) break;
  }
  if (!past_nose && !curve.truncated) {
    curve.truncated = true;
    curve.warning = "point limit reached before the nose";
  }
  curve.update_nose();
  return curve;
}

// ---------------------------------------------------------------------------
// Nose search for coupled transmission/distribution systems.

struct NoseSearchOptions {
  double lambda_start = 1.0;
  double initial_step = 0.05;
  double max_step = 0.4;
  /// Bisection stops when the bracket is narrower than this.
  double resolution = 1e-4;
  double lambda_limit = 1e3;
  CosimOptions cosim{};
};

struct NoseSearchResult {
  double lambda_max = 0.0;
  PvCurve curve;
  CoupledSolution base;
  CoupledSolution nose;
  /// Every lambda at which a coupled solve was attempted, with its outcome.
  std::vector<std::pair<double, bool>> attempts;
};

/// Grows lambda with warm-started coupled solves, doubling the step after each
/// success, then bisects between the last success and the first failure.
/// Only converged points enter the curve. Throws ConvergenceError if the
/// starting point fails.
inline NoseSearchResult nose_search_cosim(const CoupledSystem& sys, const NoseSearchOptions& opt = {}) {
  NoseSearchResult out;
  out.curve.s_base_mva = sys.s_base_mva;
  for (const auto& bus : sys.transmission.buses) out.curve.bus_labels.push_back(bus.label());

  auto record = [&](const CoupledSolution& s) {
    out.curve.points.push_back({s.lambda, s.transmission.v_mag, coupled_delivered_load(sys, s)});
  };

  out.base = solve_coupled(sys, opt.lambda_start, std::nullopt, opt.cosim);
  out.attempts.emplace_back(opt.lambda_start, out.base.converged);
  if (!out.base.converged) throw ConvergenceError("nose_search_cosim: base case failed (" + out.base.cause + ")");
  record(out.base);

  double lo = opt.lambda_start;
  CoupledSolution at_lo = out.base;
  double step = opt.initial_step;
  std::optional<double> hi;
  while (!hi) {
    const double lam = lo + step;
    if (lam > opt.lambda_limit) break;
    auto s = solve_coupled(sys, lam, at_lo, opt.cosim);
    out.attempts.emplace_back(lam, s.converged);
    if (s.converged) {
      lo = lam;
      at_lo = std::move(s);
      record(at_lo);
      step = std::min(2.0 * step, opt.max_step);
    } else {
      hi = lam;
    }
  }
  while (hi && *hi - lo > opt.resolution) {
    const double mid = 0.5 * (lo + *hi);
    auto s = solve_coupled(sys, mid, at_lo, opt.cosim);
    out.attempts.emplace_back(mid, s.converged);
    if (s.converged) {
      lo = mid;
      at_lo = std::move(s);
      record(at_lo);
    } else {
      hi = mid;
    }
  }
  out.lambda_max = lo;
  out.nose = at_lo;
  out.curve.update_nose();
  if (!hi) {
    out.curve.truncated = true;
    out.curve.warning = "lambda limit reached without a failed solve";
  }
  return out;
}

}  // namespace tdmargin
