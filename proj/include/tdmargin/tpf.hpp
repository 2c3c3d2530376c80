#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tdmargin/netmodel.hpp"
#include "tdmargin/zipload.hpp"

namespace tdmargin {

using ComplexMatrix = Eigen::MatrixXcd;
using ComplexVector = Eigen::VectorXcd;

/// Demand attached to a transmission bus from outside the network model,
/// linear in the bus voltage magnitude around `v_ref`. Load positive. The
/// co-simulation uses this to represent feeders; with zero slopes it is a
/// plain PQ injection.
struct BoundaryInjection {
  int bus = 0;
  double p = 0.0;
  double q = 0.0;
  double dp_dv = 0.0;
  double dq_dv = 0.0;
  double v_ref = 1.0;

  [[nodiscard]] PQ at(double v) const { return {p + dp_dv * (v - v_ref), q + dq_dv * (v - v_ref)}; }
};

struct PowerFlowSolution {
  std::vector<double> v_mag;
  std::vector<double> v_ang;
  bool converged = false;
  int iterations = 0;
  double max_mismatch = std::numeric_limits<double>::infinity();
  /// Why the solve stopped without converging; empty on success.
  std::string cause;

  [[nodiscard]] Complex phasor(std::size_t i) const { return std::polar(v_mag[i], v_ang[i]); }
};

struct NewtonOptions {
  double tolerance = 1e-8;
  int max_iterations = 50;
  /// Switch pv buses to pq when their reactive output leaves [q_min, q_max].
  bool enforce_q_limits = true;
};

/// Bus admittance matrix. Each branch contributes the pi-model with an ideal
/// tap:1 ratio at its from end.
inline ComplexMatrix build_ybus(const TransmissionNetwork& net) {
  const auto n = static_cast<Eigen::Index>(net.buses.size());
  ComplexMatrix y = ComplexMatrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& bus = net.buses[static_cast<std::size_t>(i)];
    y(i, i) += Complex{bus.g_shunt, bus.b_shunt};
  }
  for (const auto& br : net.branches) {
    const Complex z{br.r, br.x};
    if (z == Complex{})
      throw InputError("branch " + std::to_string(br.from) + "-" + std::to_string(br.to) + " has zero impedance");
    if (!(br.tap > 0.0))
      throw InputError("branch " + std::to_string(br.from) + "-" + std::to_string(br.to) + " has non-positive tap");
    const auto f = static_cast<Eigen::Index>(net.index_of(br.from));
    const auto t = static_cast<Eigen::Index>(net.index_of(br.to));
    const Complex ys = 1.0 / z;
    const Complex ysh{0.0, br.b_shunt / 2.0};
    y(f, f) += (ys + ysh) / (br.tap * br.tap);
    y(t, t) += ys + ysh;
    y(f, t) -= ys / br.tap;
    y(t, f) -= ys / br.tap;
  }
  return y;
}

/// Positions of the unknowns: angles of pv and pq buses, then magnitudes of pq buses.
struct StateLayout {
  std::vector<std::size_t> pvpq;
  std::vector<std::size_t> pq;
  std::size_t slack = 0;

  explicit StateLayout(const TransmissionNetwork& net) {
    for (std::size_t i = 0; i < net.buses.size(); ++i) {
      switch (net.buses[i].kind) {
        case BusKind::slack: slack = i; break;
        case BusKind::pv: pvpq.push_back(i); break;
        case BusKind::pq:
          pvpq.push_back(i);
          pq.push_back(i);
          break;
      }
    }
  }
  [[nodiscard]] std::size_t size() const { return pvpq.size() + pq.size(); }
};

/// Network, admittances and boundary demand for one transmission solve.
class PowerFlowProblem {
 public:
  PowerFlowProblem(TransmissionNetwork net, std::vector<BoundaryInjection> injections)
      : net_(std::move(net)), injections_(std::move(injections)), ybus_(build_ybus(net_)), layout_(net_) {
    extra_.assign(net_.buses.size(), {});
    for (const auto& inj : injections_) extra_[net_.index_of(inj.bus)].push_back(inj);
  }

  [[nodiscard]] const TransmissionNetwork& network() const { return net_; }
  [[nodiscard]] const ComplexMatrix& ybus() const { return ybus_; }
  [[nodiscard]] const StateLayout& layout() const { return layout_; }
  [[nodiscard]] const std::vector<BoundaryInjection>& injections() const { return injections_; }

  /// Complex power leaving each bus into the network.
  [[nodiscard]] ComplexVector network_injection(const PowerFlowSolution& s) const {
    const ComplexVector v = voltages(s);
    return v.cwiseProduct((ybus_ * v).conjugate());
  }

  /// Demand at each bus at the given state: ZIP loads (scaled by lambda) plus boundary injections.
  [[nodiscard]] std::vector<PQ> demand(const PowerFlowSolution& s, double lambda) const {
    std::vector<PQ> out(net_.buses.size());
    for (std::size_t i = 0; i < net_.buses.size(); ++i) {
      for (const auto& load : net_.buses[i].loads) {
        const auto pq = eval_zip(load, s.v_mag[i], lambda);
        out[i].p += pq.p;
        out[i].q += pq.q;
      }
      for (const auto& inj : extra_[i]) {
        const auto pq = inj.at(s.v_mag[i]);
        out[i].p += pq.p;
        out[i].q += pq.q;
      }
    }
    return out;
  }

  /// Scheduled minus calculated power: dP for pv and pq buses, then dQ for pq buses.
  [[nodiscard]] Eigen::VectorXd mismatch(const PowerFlowSolution& s, double lambda) const {
    const ComplexVector sc = network_injection(s);
    const auto d = demand(s, lambda);
    Eigen::VectorXd f(static_cast<Eigen::Index>(layout_.size()));
    Eigen::Index r = 0;
    for (auto i : layout_.pvpq) f(r++) = net_.buses[i].p_inj - d[i].p - sc(static_cast<Eigen::Index>(i)).real();
    for (auto i : layout_.pq) f(r++) = net_.buses[i].q_inj - d[i].q - sc(static_cast<Eigen::Index>(i)).imag();
    return f;
  }

  /// d(mismatch)/d(state), including the voltage sensitivity of every demand term.
  [[nodiscard]] Eigen::MatrixXd jacobian(const PowerFlowSolution& s, double lambda) const {
    const auto n = static_cast<Eigen::Index>(net_.buses.size());
    const ComplexVector v = voltages(s);
    const ComplexVector ibus = ybus_ * v;
    ComplexVector vnorm(n);
    for (Eigen::Index i = 0; i < n; ++i) vnorm(i) = v(i) / std::abs(v(i));

    // dS/dVa = j diag(V) conj(diag(I) - Y diag(V)); dS/dVm = diag(V) conj(Y diag(Vn)) + conj(diag(I)) diag(Vn)
    ComplexMatrix ds_da = -ybus_ * v.asDiagonal();
    ds_da.diagonal() += ibus;
    ds_da = (Complex{0.0, 1.0} * (v.asDiagonal() * ds_da.conjugate())).eval();
    ComplexMatrix ds_dm = v.asDiagonal() * (ybus_ * vnorm.asDiagonal()).conjugate();
    ds_dm.diagonal() += ibus.conjugate().cwiseProduct(vnorm);

    std::vector<PQ> dd(net_.buses.size());
    for (std::size_t i = 0; i < net_.buses.size(); ++i) {
      for (const auto& load : net_.buses[i].loads) {
        const auto g = eval_zip_dv(load, s.v_mag[i], lambda);
        dd[i].p += g.p;
        dd[i].q += g.q;
      }
      for (const auto& inj : extra_[i]) {
        dd[i].p += inj.dp_dv;
        dd[i].q += inj.dq_dv;
      }
    }

    const auto& pvpq = layout_.pvpq;
    const auto& pq = layout_.pq;
    const auto na = static_cast<Eigen::Index>(pvpq.size());
    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(layout_.size()),
                                              static_cast<Eigen::Index>(layout_.size()));
    auto idx = [](std::size_t k) { return static_cast<Eigen::Index>(k); };
    for (std::size_t r = 0; r < pvpq.size(); ++r) {
      for (std::size_t c = 0; c < pvpq.size(); ++c) j(idx(r), idx(c)) = -ds_da(idx(pvpq[r]), idx(pvpq[c])).real();
      for (std::size_t c = 0; c < pq.size(); ++c) {
        j(idx(r), na + idx(c)) = -ds_dm(idx(pvpq[r]), idx(pq[c])).real();
        if (pvpq[r] == pq[c]) j(idx(r), na + idx(c)) -= dd[pq[c]].p;
      }
    }
    for (std::size_t r = 0; r < pq.size(); ++r) {
      for (std::size_t c = 0; c < pvpq.size(); ++c) j(na + idx(r), idx(c)) = -ds_da(idx(pq[r]), idx(pvpq[c])).imag();
      for (std::size_t c = 0; c < pq.size(); ++c) {
        j(na + idx(r), na + idx(c)) = -ds_dm(idx(pq[r]), idx(pq[c])).imag();
        if (r == c) j(na + idx(r), na + idx(c)) -= dd[pq[c]].q;
      }
    }
    return j;
  }

  /// d(mismatch)/d(lambda): minus the ZIP demand at lambda == 1.
  [[nodiscard]] Eigen::VectorXd lambda_derivative(const PowerFlowSolution& s) const {
    Eigen::VectorXd f(static_cast<Eigen::Index>(layout_.size()));
    auto zip_total = [&](std::size_t i) {
      PQ t;
      for (const auto& load : net_.buses[i].loads) {
        const auto pq = eval_zip(load, s.v_mag[i], 1.0);
        t.p += pq.p;
        t.q += pq.q;
      }
      return t;
    };
    Eigen::Index r = 0;
    for (auto i : layout_.pvpq) f(r++) = -zip_total(i).p;
    for (auto i : layout_.pq) f(r++) = -zip_total(i).q;
    return f;
  }

  /// Packs the unknowns of `s` in layout order.
  [[nodiscard]] Eigen::VectorXd pack(const PowerFlowSolution& s) const {
    Eigen::VectorXd x(static_cast<Eigen::Index>(layout_.size()));
    Eigen::Index r = 0;
    for (auto i : layout_.pvpq) x(r++) = s.v_ang[i];
    for (auto i : layout_.pq) x(r++) = s.v_mag[i];
    return x;
  }

  void unpack(const Eigen::VectorXd& x, PowerFlowSolution& s) const {
    Eigen::Index r = 0;
    for (auto i : layout_.pvpq) s.v_ang[i] = x(r++);
    for (auto i : layout_.pq) s.v_mag[i] = x(r++);
  }

  /// Flat profile (or a copy of `start`) with slack and pv magnitudes at their setpoints.
  [[nodiscard]] PowerFlowSolution initial_state(const std::optional<PowerFlowSolution>& start) const {
    PowerFlowSolution s;
    const auto n = net_.buses.size();
    if (start && start->v_mag.size() == n && start->v_ang.size() == n) {
      s.v_mag = start->v_mag;
      s.v_ang = start->v_ang;
    } else {
      s.v_mag.assign(n, 1.0);
      s.v_ang.assign(n, 0.0);
    }
    for (std::size_t i = 0; i < n; ++i)
      if (net_.buses[i].kind != BusKind::pq) s.v_mag[i] = net_.buses[i].v_set;
    return s;
  }

 private:
  [[nodiscard]] ComplexVector voltages(const PowerFlowSolution& s) const {
    ComplexVector v(static_cast<Eigen::Index>(net_.buses.size()));
    for (std::size_t i = 0; i < net_.buses.size(); ++i) v(static_cast<Eigen::Index>(i)) = s.phasor(i);
    return v;
  }

  TransmissionNetwork net_;
  std::vector<BoundaryInjection> injections_;
  ComplexMatrix ybus_;
  StateLayout layout_;
  std::vector<std::vector<BoundaryInjection>> extra_;
};

inline Eigen::VectorXd power_mismatch(const TransmissionNetwork& net, const std::vector<BoundaryInjection>& inj,
                                      const PowerFlowSolution& state, double lambda) {
  return PowerFlowProblem(net, inj).mismatch(state, lambda);
}

inline Eigen::MatrixXd jacobian(const TransmissionNetwork& net, const std::vector<BoundaryInjection>& inj,
                                const PowerFlowSolution& state, double lambda) {
  return PowerFlowProblem(net, inj).jacobian(state, lambda);
}

namespace detail {

inline constexpr double kSingularRcond = 1e-13;

/// Solves a x = b. Returns nullopt when `a` is numerically singular.
inline std::optional<Eigen::VectorXd> solve_dense(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  if (!(lu.rcond() > kSingularRcond)) return std::nullopt;
  Eigen::VectorXd x = lu.solve(b);
  if (!x.allFinite()) return std::nullopt;
  return x;
}

inline bool plausible(const PowerFlowSolution& s) {
  for (std::size_t i = 0; i < s.v_mag.size(); ++i)
    if (!std::isfinite(s.v_mag[i]) || !std::isfinite(s.v_ang[i]) || s.v_mag[i] <= 1e-3 || s.v_mag[i] > 5.0)
      return false;
  return true;
}

/// Newton iterations on a problem with fixed bus types.
inline PowerFlowSolution newton_iterate(const PowerFlowProblem& pf, PowerFlowSolution s, double lambda,
                                        const NewtonOptions& opt) {
  s.converged = false;
  s.cause.clear();
  for (int it = 0;; ++it) {
    const Eigen::VectorXd f = pf.mismatch(s, lambda);
    s.max_mismatch = f.size() ? f.lpNorm<Eigen::Infinity>() : 0.0;
    s.iterations = it;
    if (!std::isfinite(s.max_mismatch)) {
      s.cause = "diverged";
      return s;
    }
    if (s.max_mismatch <= opt.tolerance) {
      s.converged = true;
      return s;
    }
    if (it >= opt.max_iterations) {
      s.cause = "iteration limit";
      return s;
    }
    const auto dx = solve_dense(pf.jacobian(s, lambda), -f);
    if (!dx) {
      s.cause = "singular jacobian";
      return s;
    }
    pf.unpack(pf.pack(s) + *dx, s);
    if (!plausible(s)) {
      s.cause = "diverged";
      return s;
    }
  }
}

}  // namespace detail

/// Newton-Raphson power flow in polar coordinates. ZIP loads and boundary
/// injections are re-evaluated at the iterate voltages, so the solution is
/// the voltage dependent operating point. Never throws on non-convergence;
/// check `converged` and `cause`.
inline PowerFlowSolution solve_newton(const TransmissionNetwork& net, const std::vector<BoundaryInjection>& injections,
                                      double lambda, const std::optional<PowerFlowSolution>& start = std::nullopt,
                                      const NewtonOptions& opt = {}) {
  PowerFlowProblem pf(net, injections);
  auto s = detail::newton_iterate(pf, pf.initial_state(start), lambda, opt);
  if (!s.converged || !opt.enforce_q_limits) return s;

  // pv -> pq switching, one bus kind change at a time until no limit is violated.
  TransmissionNetwork work = net;
  int total_iterations = s.iterations;
  for (std::size_t round = 0; round < net.buses.size(); ++round) {
    const PowerFlowProblem cur(work, injections);
    const ComplexVector sc = cur.network_injection(s);
    const auto d = cur.demand(s, lambda);
    bool switched = false;
    for (std::size_t i = 0; i < work.buses.size(); ++i) {
      auto& bus = work.buses[i];
      if (bus.kind != BusKind::pv) continue;
      const double q_gen = sc(static_cast<Eigen::Index>(i)).imag() + d[i].q;
      if (q_gen > bus.q_max || q_gen < bus.q_min) {
        bus.kind = BusKind::pq;
        bus.q_inj = q_gen > bus.q_max ? bus.q_max : bus.q_min;
        switched = true;
      }
    }
    if (!switched) break;
    const PowerFlowProblem next(work, injections);
    s = detail::newton_iterate(next, s, lambda, opt);
    total_iterations += s.iterations;
    if (!s.converged) break;
  }
  s.iterations = total_iterations;
  return s;
}

/// Total active power consumed by ZIP loads at the solved voltages, pu.
inline double delivered_load(const TransmissionNetwork& net, const PowerFlowSolution& s, double lambda) {
  double total = 0.0;
  for (std::size_t i = 0; i < net.buses.size(); ++i)
    for (const auto& load : net.buses[i].loads) total += eval_zip(load, s.v_mag[i], lambda).p;
  return total;
}

}  // namespace tdmargin
