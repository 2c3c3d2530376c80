#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "tdmargin/dpf.hpp"
#include "tdmargin/margin.hpp"
#include "tdmargin/netmodel.hpp"

namespace tdmargin {

// ---------------------------------------------------------------------------
// Effective source-to-load impedance through the substation transformer.

struct ImpedancePath {
  Complex z_transmission;
  Complex z_distribution;
  double k_eff = 1.0;
  Complex z_eq;
};

/// z_eq = z_t + k_eff^2 * z_d. A lower secondary tap raises k_eff and with it
/// the feeder impedance seen from the generator.
inline ImpedancePath effective_impedance(Complex z_t, Complex z_d, double k_eff) {
  if (!(k_eff > 0.0)) throw InputError("effective_impedance: k_eff must be positive");
  return {z_t, z_d, k_eff, z_t + k_eff * k_eff * z_d};
}

/// Loss-based single-impedance equivalent of one feeder replica, on the
/// secondary side: total series losses over the squared head current, with
/// the primary at 1 pu and lambda == 1.
inline Complex feeder_equivalent_impedance(const FeederModel& feeder, const SweepOptions& opt = {}) {
  const auto sol = solve_bfs(feeder, Complex{1.0, 0.0}, 1.0, opt);
  if (!sol.converged) throw ConvergenceError("feeder_equivalent_impedance: sweep did not converge");
  const Complex source = Complex{1.0, 0.0} / feeder.head_transformer.k_eff();
  const Complex head_current = std::conj(Complex{sol.copy_p, sol.copy_q} / source);
  Complex delivered{};
  for (std::size_t i = 0; i < sol.nodes.size(); ++i) {
    const double mag = std::abs(sol.v[i]);
    if (auto it = feeder.loads.find(sol.nodes[i]); it != feeder.loads.end()) {
      const auto pq = eval_zip(it->second, mag, 1.0);
      delivered += Complex{pq.p, pq.q};
    }
    if (auto it = feeder.dg_units.find(sol.nodes[i]); it != feeder.dg_units.end())
      delivered -= dg_output(it->second, mag, 1.0, opt);
  }
  const double i2 = std::norm(head_current);
  if (i2 == 0.0) throw InputError("feeder_equivalent_impedance: feeder draws no current");
  return (Complex{sol.copy_p, sol.copy_q} - delivered) / i2;
}

/// Infinite bus (1.0 pu) -- z_t -- boundary bus -- transformer(tap) -- z_d -- ZIP load.
/// With z_d == 0 the load sits directly behind the transformer.
inline CoupledSystem build_extended_two_bus(Complex z_t, Complex z_d, const ZipLoad& load, double tap,
                                            double s_base_mva = 100.0) {
  CoupledSystem sys;
  sys.s_base_mva = s_base_mva;
  TransmissionBus source;
  source.id = 1;
  source.kind = BusKind::slack;
  source.v_set = 1.0;
  TransmissionBus boundary;
  boundary.id = 2;
  boundary.kind = BusKind::pq;
  sys.transmission.buses = {source, boundary};
  sys.transmission.branches.push_back({1, 2, z_t.real(), z_t.imag(), 0.0, 1.0});

  FeederModel f;
  f.name = "eq_feeder";
  f.boundary_bus = 2;
  f.head_transformer.tap_secondary = tap;
  f.segments.push_back({"head", "load", z_d.real(), z_d.imag()});
  f.loads["load"] = load;
  sys.feeders.push_back(std::move(f));
  return sys;
}

/// 60 MW + 20 MVAr with the [0.4 0.3 0.3] ZIP profile on a 100 MVA base.
inline ZipLoad reference_zip_load() {
  ZipLoad l;
  l.p0 = 0.6;
  l.q0 = 0.2;
  l.p_frac = {0.4, 0.3, 0.3};
  l.q_frac = {0.4, 0.3, 0.3};
  return l;
}

// ---------------------------------------------------------------------------
// Scenarios.

enum class DgChoice { none, upf, vvc };

inline const char* to_string(DgChoice d) {
  switch (d) {
    case DgChoice::none: return "none";
    case DgChoice::upf: return "upf";
    case DgChoice::vvc: return "vvc";
  }
  return "?";
}

inline constexpr double kNoCvrTap = 1.0;
inline constexpr double kCvrTap = 0.95;
inline constexpr double kNoCvrVset = 1.05;
inline constexpr double kCvrVset = 1.00;

struct CvrScenario {
  std::string label;
  double tap_secondary = kNoCvrTap;
  DgChoice dg_mode = DgChoice::none;
  double dg_vset = kNoCvrVset;
  double dg_penetration = 0.0;

  [[nodiscard]] bool is_cvr() const { return tap_secondary < kNoCvrTap; }
};

inline CvrScenario no_cvr_scenario(DgChoice dg = DgChoice::none, double penetration = 0.6) {
  return {std::string("No CVR / ") + to_string(dg), kNoCvrTap, dg, kNoCvrVset,
          dg == DgChoice::none ? 0.0 : penetration};
}

inline CvrScenario cvr_scenario(DgChoice dg = DgChoice::none, double penetration = 0.6, double tap = kCvrTap) {
  return {std::string("CVR / ") + to_string(dg), tap, dg, kCvrVset, dg == DgChoice::none ? 0.0 : penetration};
}

/// Sets every feeder head tap and the setpoint of every VVC inverter. UPF
/// units and the DG fleet itself are left alone.
inline CoupledSystem apply_cvr(CoupledSystem sys, const CvrScenario& scenario) {
  if (scenario.tap_secondary < kMinTap || scenario.tap_secondary > kMaxTap)
    throw InputError("apply_cvr: tap " + std::to_string(scenario.tap_secondary) + " outside [0.9, 1.1]");
  if (scenario.dg_vset < 0.9 || scenario.dg_vset > 1.1)
    throw InputError("apply_cvr: DG setpoint " + std::to_string(scenario.dg_vset) + " outside [0.9, 1.1]");
  for (auto& f : sys.feeders) {
    f.head_transformer.tap_secondary = scenario.tap_secondary;
    for (auto& [_, dg] : f.dg_units)
      if (dg.mode == DgMode::vvc) dg.v_set = scenario.dg_vset;
  }
  return sys;
}

/// Inverter rating relative to its active output; leaves room for 0.44 s of reactive power.
inline constexpr double kDgRatingMargin = 1.2;

/// Replaces the DG fleet of every feeder: total active output equals
/// `penetration` times the feeder's base load, split over the load nodes in
/// proportion to their p0.
inline CoupledSystem with_dg(CoupledSystem sys, DgChoice mode, double penetration, double v_set = kNoCvrVset) {
  if (penetration < 0.0) throw InputError("with_dg: penetration must be non-negative");
  for (auto& f : sys.feeders) {
    f.dg_units.clear();
    if (mode == DgChoice::none || penetration == 0.0) continue;
    for (const auto& [node, load] : f.loads) {
      if (load.p0 <= 0.0) continue;
      DgUnit dg;
      dg.p_rated = penetration * load.p0;
      dg.s_rated = kDgRatingMargin * dg.p_rated;
      dg.mode = mode == DgChoice::upf ? DgMode::upf : DgMode::vvc;
      dg.v_set = v_set;
      dg.q_max = default_q_max(dg.p_rated, dg.s_rated);
      f.dg_units[node] = dg;
    }
  }
  return sys;
}

/// System configured for one scenario: DG fleet per its mode, then taps and setpoints.
inline CoupledSystem configure_scenario(const CoupledSystem& sys, const CvrScenario& scenario) {
  return apply_cvr(with_dg(sys, scenario.dg_mode, scenario.dg_penetration, scenario.dg_vset), scenario);
}

struct ScenarioRow {
  std::string label;
  bool failed = false;
  std::string error;
  double vsm_mw = 0.0;
  double lambda_max = 0.0;
  /// (lambda_max - 1) * total base P, MW.
  double lambda_vsm_mw = 0.0;
  /// Relative to the paired No-CVR row; set on CVR rows only.
  std::optional<double> pct_reduction;
};

struct ScenarioReport {
  std::vector<ScenarioRow> rows;
};

inline double pct_reduction(double vsm_no_cvr, double vsm_cvr) {
  return 100.0 * (vsm_no_cvr - vsm_cvr) / vsm_no_cvr;
}

inline double total_base_load(const CoupledSystem& sys) {
  double p = 0.0;
  for (const auto& bus : sys.transmission.buses)
    for (const auto& l : bus.loads) p += l.p0;
  for (const auto& f : sys.feeders)
    for (const auto& [_, l] : f.loads) p += l.p0 * f.replication;
  return p;
}

/// Runs the co-simulation nose search for every scenario and pairs each CVR
/// row with the closest preceding No-CVR row of the same DG mode. Rows keep
/// the given order. A failing scenario is marked and the rest still run.
/// `threads` caps how many scenarios are evaluated at once.
inline ScenarioReport compare_scenarios(const CoupledSystem& sys, const std::vector<CvrScenario>& scenarios,
                                        const NoseSearchOptions& opt = {}, unsigned threads = 1) {
  ScenarioReport report;
  report.rows.resize(scenarios.size());

  auto run_one = [&](std::size_t i) {
    const auto& sc = scenarios[i];
    auto& row = report.rows[i];
    row.label = sc.label;
    try {
      const auto configured = configure_scenario(sys, sc);
      const auto result = nose_search_cosim(configured, opt);
      row.lambda_max = result.lambda_max;
      row.vsm_mw = compute_vsm(result.curve, 0, sys.s_base_mva);
      row.lambda_vsm_mw = compute_lambda_vsm(result.curve, 0, total_base_load(configured), sys.s_base_mva);
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
  };

  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(scenarios.size())));
  if (threads == 1) {
    for (std::size_t i = 0; i < scenarios.size(); ++i) run_one(i);
  } else {
    std::mutex m;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(m);
            if (next >= scenarios.size()) return;
            i = next++;
          }
          run_one(i);
        }
      });
    }
    for (auto& th : pool) th.join();
  }

  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    if (!scenarios[i].is_cvr() || report.rows[i].failed) continue;
    for (std::size_t j = i; j-- > 0;) {
      if (scenarios[j].is_cvr() || scenarios[j].dg_mode != scenarios[i].dg_mode) continue;
      if (!report.rows[j].failed)
        report.rows[i].pct_reduction = pct_reduction(report.rows[j].vsm_mw, report.rows[i].vsm_mw);
      break;
    }
  }
  return report;
}

/// (No CVR, CVR) pairs for each DG mode, in Table I order.
inline std::vector<CvrScenario> standard_scenarios(double penetration = 0.6, double cvr_tap = kCvrTap) {
  std::vector<CvrScenario> out;
  for (auto mode : {DgChoice::none, DgChoice::upf, DgChoice::vvc}) {
    out.push_back(no_cvr_scenario(mode, penetration));
    out.push_back(cvr_scenario(mode, penetration, cvr_tap));
  }
  return out;
}

}  // namespace tdmargin
