#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tdmargin/netmodel.hpp"
#include "tdmargin/zipload.hpp"

namespace tdmargin {

struct FeederSolution {
  /// Node ids in topology order; `v` follows the same order.
  std::vector<std::string> nodes;
  /// Node voltages on the secondary (feeder) side, complex pu.
  std::vector<Complex> v;
  /// Power drawn at the transformer primary by all replicas, load positive.
  double head_p = 0.0;
  double head_q = 0.0;
  /// Same for a single replica.
  double copy_p = 0.0;
  double copy_q = 0.0;
  bool converged = false;
  int iterations = 0;
  std::string cause;

  [[nodiscard]] std::optional<std::size_t> find(const std::string& node) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i] == node) return i;
    return std::nullopt;
  }
};

struct SweepOptions {
  /// Largest nodal voltage change between sweeps accepted as converged.
  double tolerance = 1e-10;
  int max_sweeps = 100;
  /// Scale DG active output with lambda instead of holding it fixed.
  bool dg_scales_with_lambda = false;
};

/// Feeder segment impedance seen from the transformer primary.
inline Complex refer_feeder_impedance(const FeederSegment& seg, const SubstationTransformer& xfmr) {
  const double k = xfmr.k_eff();
  return k * k * seg.z();
}

/// Reactive output of a DG unit at node voltage `v`, positive = injection.
/// Linear droop through the setpoint, saturating at +-q_max.
inline double dg_q_vvc(const DgUnit& dg, double v) {
  if (dg.mode == DgMode::upf) return 0.0;
  const double x = std::clamp((dg.v_set - v) / dg.droop_band, -1.0, 1.0);
  return dg.q_max * x;
}

/// Complex output of a DG unit at node voltage `v`, positive = injection.
inline Complex dg_output(const DgUnit& dg, double v, double lambda, const SweepOptions& opt) {
  const double p = opt.dg_scales_with_lambda ? lambda * dg.p_rated : dg.p_rated;
  return {p, dg_q_vvc(dg, v)};
}

namespace detail {

/// Parent index and segment impedance for each node in topology order.
struct FeederLayout {
  std::vector<std::string> nodes;
  std::vector<std::ptrdiff_t> parent;
  std::vector<Complex> z;
  std::vector<const ZipLoad*> load;
  std::vector<const DgUnit*> dg;

  explicit FeederLayout(const FeederModel& f) : nodes(feeder_topology_order(f)) {
    const auto n = nodes.size();
    parent.assign(n, -1);
    z.assign(n, Complex{});
    load.assign(n, nullptr);
    dg.assign(n, nullptr);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) index[nodes[i]] = i;
    for (const auto& seg : f.segments) {
      const auto c = index.at(seg.to);
      parent[c] = static_cast<std::ptrdiff_t>(index.at(seg.from));
      z[c] = seg.z();
    }
    z[0] = f.head_transformer.series_z;
    for (const auto& [node, l] : f.loads) load[index.at(node)] = &l;
    for (const auto& [node, d] : f.dg_units) dg[index.at(node)] = &d;
  }
};

inline Complex node_current(const detail::FeederLayout& lay, std::size_t i, Complex v, double lambda,
                            const SweepOptions& opt) {
  Complex s{};
  const double mag = std::abs(v);
  if (lay.load[i]) {
    const auto pq = eval_zip(*lay.load[i], mag, lambda);
    s += Complex{pq.p, pq.q};
  }
  if (lay.dg[i]) s -= dg_output(*lay.dg[i], mag, lambda, opt);
  if (s == Complex{}) return {};
  return std::conj(s / v);
}

}  // namespace detail

/// Backward/forward sweep for a radial feeder whose transformer primary sits
/// at `head_voltage` (transmission side, complex pu). Loads and VVC output are
/// re-evaluated from the latest node voltages on every sweep. Non-convergence
/// is reported through the result, never thrown.
inline FeederSolution solve_bfs(const FeederModel& feeder, Complex head_voltage, double lambda,
                                const SweepOptions& opt = {},
                                const std::vector<Complex>* warm = nullptr) {
  if (!(std::abs(head_voltage) > 0.0)) throw InputError("feeder '" + feeder.name + "': head voltage must be nonzero");
  const detail::FeederLayout lay(feeder);
  const auto n = lay.nodes.size();
  const Complex source = head_voltage / feeder.head_transformer.k_eff();

  FeederSolution sol;
  sol.nodes = lay.nodes;
  sol.v = (warm && warm->size() == n) ? *warm : std::vector<Complex>(n, source);

  std::vector<Complex> branch(n);
  auto backward = [&](const std::vector<Complex>& v) {
    for (std::size_t i = 0; i < n; ++i) branch[i] = detail::node_current(lay, i, v[i], lambda, opt);
    for (std::size_t i = n; i-- > 1;) branch[static_cast<std::size_t>(lay.parent[i])] += branch[i];
  };

  std::vector<Complex> next(n);
  for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
    backward(sol.v);
    next[0] = source - lay.z[0] * branch[0];
    for (std::size_t i = 1; i < n; ++i) next[i] = next[static_cast<std::size_t>(lay.parent[i])] - lay.z[i] * branch[i];
    double change = 0.0;
    bool finite = true;
    for (std::size_t i = 0; i < n; ++i) {
      finite = finite && std::isfinite(next[i].real()) && std::isfinite(next[i].imag()) && std::abs(next[i]) > 1e-6;
      change = std::max(change, std::abs(next[i] - sol.v[i]));
    }
    sol.v.swap(next);
    sol.iterations = sweep;
    if (!finite) {
      sol.cause = "diverged";
      return sol;
    }
    if (change <= opt.tolerance) {
      sol.converged = true;
      break;
    }
  }
  if (!sol.converged) {
    sol.cause = "sweep limit";
    return sol;
  }

  backward(sol.v);
  const Complex s_copy = source * std::conj(branch[0]);
  sol.copy_p = s_copy.real();
  sol.copy_q = s_copy.imag();
  sol.head_p = sol.copy_p * feeder.replication;
  sol.head_q = sol.copy_q * feeder.replication;
  return sol;
}

/// Power drawn at the transformer primary by all replicas of the feeder.
inline PQ aggregate_head_power(const FeederSolution& sol, const FeederModel& feeder) {
  return {sol.copy_p * feeder.replication, sol.copy_q * feeder.replication};
}

/// Active power consumed by the ZIP loads of every replica, pu.
inline double feeder_delivered_load(const FeederModel& feeder, const FeederSolution& sol, double lambda) {
  double total = 0.0;
  for (const auto& [node, load] : feeder.loads) {
    const auto i = sol.find(node);
    if (i) total += eval_zip(load, std::abs(sol.v[*i]), lambda).p;
  }
  return total * feeder.replication;
}

}  // namespace tdmargin
