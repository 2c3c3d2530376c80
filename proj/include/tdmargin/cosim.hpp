#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tdmargin/dpf.hpp"
#include "tdmargin/netmodel.hpp"
#include "tdmargin/tpf.hpp"

namespace tdmargin {

struct BoundaryTraceRow {
  int iteration = 0;
  int bus = 0;
  double v_boundary = 0.0;
  double p = 0.0;
  double q = 0.0;
};

struct CoupledSolution {
  double lambda = 1.0;
  PowerFlowSolution transmission;
  std::vector<FeederSolution> feeders;
  /// Boundary demand model handed to the next transmission solve, one per feeder.
  std::vector<BoundaryInjection> injections;
  std::vector<BoundaryTraceRow> boundary_trace;
  bool converged = false;
  int exchanges = 0;
  /// Largest boundary voltage and power change seen on the last exchange.
  double last_dv = std::numeric_limits<double>::infinity();
  double last_ds = std::numeric_limits<double>::infinity();
  std::string cause;
};

struct CosimOptions {
  double tolerance = 1e-6;
  int max_exchanges = 20;
  /// Represent each feeder in the transmission solve by its head power
  /// linearised in boundary voltage magnitude. When false the feeder is a
  /// fixed PQ injection between exchanges.
  bool linearized_boundary = true;
  /// Relative voltage perturbation for the boundary sensitivity.
  double sensitivity_step = 1e-6;
  NewtonOptions newton{};
  SweepOptions sweep{};
};

/// Cold starting point: flat transmission profile and each feeder modelled by
/// its nominal-voltage demand with no losses.
inline CoupledSolution cold_start(const CoupledSystem& sys, double lambda) {
  CoupledSolution s;
  s.lambda = lambda;
  const PowerFlowProblem pf(sys.transmission, {});
  s.transmission = pf.initial_state(std::nullopt);
  for (const auto& f : sys.feeders) {
    BoundaryInjection inj;
    inj.bus = f.boundary_bus;
    for (const auto& [_, load] : f.loads) {
      inj.p += lambda * load.p0;
      inj.q += lambda * load.q0;
    }
    const SweepOptions opt{};
    for (const auto& [_, dg] : f.dg_units) inj.p -= dg_output(dg, 1.0, lambda, opt).real();
    inj.p *= f.replication;
    inj.q *= f.replication;
    s.injections.push_back(inj);
  }
  return s;
}

namespace detail {

inline bool has_state(const CoupledSolution& s, const CoupledSystem& sys) {
  return s.transmission.v_mag.size() == sys.transmission.buses.size() &&
         s.injections.size() == sys.feeders.size();
}

}  // namespace detail

/// One pass of (a) transmission solve with the current boundary model, (b) a
/// sweep of every feeder at its new boundary voltage, (c) boundary model update.
inline CoupledSolution exchange_step(const CoupledSystem& sys, double lambda, const CoupledSolution& prev,
                                     const CosimOptions& opt = {}) {
  if (!detail::has_state(prev, sys)) throw InputError("exchange_step: previous solution does not match the system");
  CoupledSolution next;
  next.lambda = lambda;
  next.boundary_trace = prev.boundary_trace;
  next.exchanges = prev.exchanges + 1;
  next.feeders.resize(sys.feeders.size());
  next.injections = prev.injections;

  next.transmission = solve_newton(sys.transmission, prev.injections, lambda, prev.transmission, opt.newton);
  if (!next.transmission.converged) {
    next.cause = "transmission: " + next.transmission.cause;
    return next;
  }

  const auto& net = sys.transmission;
  double dv = 0.0;
  double ds = 0.0;
  std::map<int, BoundaryTraceRow> per_bus;
  for (std::size_t fi = 0; fi < sys.feeders.size(); ++fi) {
    const auto& f = sys.feeders[fi];
    const auto bi = net.index_of(f.boundary_bus);
    const Complex vb = next.transmission.phasor(bi);
    const std::vector<Complex>* warm = fi < prev.feeders.size() ? &prev.feeders[fi].v : nullptr;
    auto sol = solve_bfs(f, vb, lambda, opt.sweep, warm);
    if (!sol.converged) {
      next.cause = "feeder '" + f.name + "': " + sol.cause;
      return next;
    }
    const auto head = aggregate_head_power(sol, f);
    const auto assumed = prev.injections[fi].at(std::abs(vb));
    ds = std::max({ds, std::abs(head.p - assumed.p), std::abs(head.q - assumed.q)});
    if (prev.transmission.converged) dv = std::max(dv, std::abs(vb - prev.transmission.phasor(bi)));

    BoundaryInjection inj{f.boundary_bus, head.p, head.q, 0.0, 0.0, std::abs(vb)};
    if (opt.linearized_boundary) {
      const double h = opt.sensitivity_step * std::abs(vb);
      const auto bumped = solve_bfs(f, vb * (1.0 + opt.sensitivity_step), lambda, opt.sweep, &sol.v);
      if (!bumped.converged) {
        next.cause = "feeder '" + f.name + "' sensitivity: " + bumped.cause;
        return next;
      }
      const auto hb = aggregate_head_power(bumped, f);
      inj.dp_dv = (hb.p - head.p) / h;
      inj.dq_dv = (hb.q - head.q) / h;
    }
    next.injections[fi] = inj;
    next.feeders[fi] = std::move(sol);

    auto& row = per_bus[f.boundary_bus];
    row.iteration = next.exchanges;
    row.bus = f.boundary_bus;
    row.v_boundary = std::abs(vb);
    row.p += head.p;
    row.q += head.q;
  }
  for (const auto& [_, row] : per_bus) next.boundary_trace.push_back(row);
  next.last_dv = dv;
  next.last_ds = ds;
  next.converged = dv <= opt.tolerance && ds <= opt.tolerance;
  return next;
}

/// Alternates transmission and feeder solves until the boundary quantities
/// settle. Starts from `warm` when given (e.g. the previous lambda point).
inline CoupledSolution solve_coupled(const CoupledSystem& sys, double lambda,
                                     const std::optional<CoupledSolution>& warm = std::nullopt,
                                     const CosimOptions& opt = {}) {
  CoupledSolution cur = (warm && detail::has_state(*warm, sys)) ? *warm : cold_start(sys, lambda);
  cur.lambda = lambda;
  cur.converged = false;
  cur.exchanges = 0;
  cur.boundary_trace.clear();
  for (int k = 0; k < opt.max_exchanges; ++k) {
    auto next = exchange_step(sys, lambda, cur, opt);
    if (!next.cause.empty()) return next;
    cur = std::move(next);
    if (cur.converged) return cur;
  }
  cur.cause = "exchange limit";
  return cur;
}

/// ZIP active power consumed across the transmission network and every feeder replica, pu.
inline double coupled_delivered_load(const CoupledSystem& sys, const CoupledSolution& s) {
  double total = delivered_load(sys.transmission, s.transmission, s.lambda);
  for (std::size_t fi = 0; fi < sys.feeders.size() && fi < s.feeders.size(); ++fi)
    total += feeder_delivered_load(sys.feeders[fi], s.feeders[fi], s.lambda);
  return total;
}

}  // namespace tdmargin
