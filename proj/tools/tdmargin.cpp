#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tdmargin.hpp"

namespace td = tdmargin;

namespace {

constexpr int kExitNonConvergence = 2;
constexpr int kExitInput = 3;

struct RunConfig {
  std::string command;
  std::string case_path;
  std::optional<double> tap;
  std::optional<std::string> dg;
  double dg_vset = td::kNoCvrVset;
  bool dg_vset_given = false;
  double penetration = 0.6;
  std::optional<int> replication;
  double lambda = 1.0;
  std::optional<double> lambda_step;
  double tol_cosim = 1e-6;
  std::string engine = "cosim";
  std::string out;
  std::vector<std::string> buses;
  // twobus only
  double zt_r = 0.01, zt_x = 0.06, zd_r = 0.03, zd_x = 0.06;
  double cvr_tap = td::kCvrTap;
};

td::DgChoice parse_dg(const std::string& s) {
  if (s == "none") return td::DgChoice::none;
  if (s == "upf") return td::DgChoice::upf;
  if (s == "vvc") return td::DgChoice::vvc;
  throw td::InputError("unknown DG mode '" + s + "'");
}

unsigned worker_threads() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TDMARGIN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw td::InputError("TDMARGIN_THREADS must be a positive integer");
    n = static_cast<unsigned>(v);
  }
  return n;
}

/// Case file with the command-line overrides applied, re-validated.
td::CoupledSystem configured_case(const RunConfig& cfg) {
  if (cfg.case_path.empty()) throw td::InputError("--case is required");
  auto sys = td::load_case(cfg.case_path);
  if (cfg.replication)
    for (auto& f : sys.feeders) f.replication = *cfg.replication;
  if (cfg.dg) {
    const auto mode = parse_dg(*cfg.dg);
    sys = td::with_dg(sys, mode, cfg.penetration, cfg.dg_vset);
  } else if (cfg.dg_vset_given) {
    for (auto& f : sys.feeders)
      for (auto& [_, dg] : f.dg_units) dg.v_set = cfg.dg_vset;
  }
  if (cfg.tap) {
    if (*cfg.tap < td::kMinTap || *cfg.tap > td::kMaxTap) throw td::InputError("--tap outside [0.9, 1.1]");
    for (auto& f : sys.feeders) f.head_transformer.tap_secondary = *cfg.tap;
  }
  const auto report = td::validate_network(sys);
  if (!report.ok()) throw td::InputError("invalid configuration: " + report.summary());
  return sys;
}

td::CosimOptions cosim_options(const RunConfig& cfg) {
  td::CosimOptions o;
  o.tolerance = cfg.tol_cosim;
  return o;
}

td::NoseSearchOptions nose_options(const RunConfig& cfg) {
  td::NoseSearchOptions o;
  o.cosim = cosim_options(cfg);
  if (cfg.lambda_step) o.initial_step = *cfg.lambda_step;
  return o;
}

td::CpfOptions cpf_options(const RunConfig& cfg) {
  td::CpfOptions o;
  if (cfg.lambda_step) o.step_initial = *cfg.lambda_step;
  return o;
}

void emit(const RunConfig& cfg, const std::string& text) {
  if (cfg.out.empty()) std::cout << text;
  else td::write_text(cfg.out, text);
}

struct Margin {
  td::PvCurve curve;
  double lambda_max = 0.0;
  double vsm_mw = 0.0;
};

Margin margin_for(const td::CoupledSystem& sys, const RunConfig& cfg, const std::string& engine) {
  Margin m;
  if (engine == "cpf") {
    const auto flat = td::flatten(sys);
    m.curve = td::trace_cpf(flat.net, cpf_options(cfg));
    m.lambda_max = m.curve.nose().lambda;
  } else if (engine == "cosim") {
    auto r = td::nose_search_cosim(sys, nose_options(cfg));
    m.curve = std::move(r.curve);
    m.lambda_max = r.lambda_max;
  } else {
    throw td::InputError("unknown engine '" + engine + "'");
  }
  m.vsm_mw = td::compute_vsm(m.curve, 0, sys.s_base_mva);
  if (m.curve.truncated) std::cerr << "warning: " << m.curve.warning << '\n';
  return m;
}

int run_solve(const RunConfig& cfg) {
  const auto sys = configured_case(cfg);
  const auto flat = td::flatten(sys);
  td::NewtonOptions opt;
  const auto sol = td::solve_newton(flat.net, {}, cfg.lambda, std::nullopt, opt);
  if (!sol.converged) throw td::ConvergenceError("power flow did not converge (" + sol.cause + ")");
  std::ostringstream os;
  os << "lambda " << cfg.lambda << ", " << sol.iterations << " iterations, max mismatch " << sol.max_mismatch
     << " pu\n";
  os << std::left << std::setw(20) << "bus" << std::right << std::setw(12) << "v_pu" << std::setw(12) << "angle_deg"
     << '\n';
  os << std::fixed;
  for (std::size_t i = 0; i < flat.net.buses.size(); ++i)
    os << std::left << std::setw(20) << flat.net.buses[i].label() << std::right << std::setw(12)
       << std::setprecision(6) << sol.v_mag[i] << std::setw(12) << std::setprecision(4)
       << sol.v_ang[i] * 180.0 / 3.14159265358979323846 << '\n';
  os << "delivered load " << std::setprecision(4) << td::delivered_load(flat.net, sol, cfg.lambda) * sys.s_base_mva
     << " MW\n";
  emit(cfg, os.str());
  return 0;
}

int run_cosim(const RunConfig& cfg) {
  const auto sys = configured_case(cfg);
  const auto sol = td::solve_coupled(sys, cfg.lambda, std::nullopt, cosim_options(cfg));
  if (!sol.converged) throw td::ConvergenceError("co-simulation did not converge (" + sol.cause + ")");
  std::cout << "lambda " << cfg.lambda << ", " << sol.exchanges << " exchanges\n" << std::fixed;
  for (std::size_t fi = 0; fi < sys.feeders.size(); ++fi) {
    const auto& f = sys.feeders[fi];
    const auto bi = sys.transmission.index_of(f.boundary_bus);
    const auto head = td::aggregate_head_power(sol.feeders[fi], f);
    double vmin = 1e9;
    for (auto v : sol.feeders[fi].v) vmin = std::min(vmin, std::abs(v));
    std::cout << "feeder " << f.name << " at bus " << f.boundary_bus << ": V " << std::setprecision(6)
              << sol.transmission.v_mag[bi] << " pu, P " << std::setprecision(3) << head.p * sys.s_base_mva
              << " MW, Q " << head.q * sys.s_base_mva << " MVAr, lowest node " << std::setprecision(4) << vmin
              << " pu\n";
  }
  std::cout << "delivered load " << std::setprecision(4) << td::coupled_delivered_load(sys, sol) * sys.s_base_mva
            << " MW\n";
  if (!cfg.out.empty() && !sys.feeders.empty()) {
    int bus = sys.feeders.front().boundary_bus;
    if (!cfg.buses.empty()) bus = std::stoi(cfg.buses.front());
    td::write_text(cfg.out, td::boundary_trace_csv(sol, bus));
  }
  return 0;
}

int run_pv_curve(const RunConfig& cfg) {
  const auto sys = configured_case(cfg);
  const auto m = margin_for(sys, cfg, cfg.engine);
  emit(cfg, td::pv_curve_csv(m.curve, cfg.buses));
  if (!cfg.out.empty())
    std::cout << m.curve.points.size() << " points, nose at lambda " << m.lambda_max << '\n';
  return 0;
}

int run_vsm(const RunConfig& cfg) {
  const auto sys = configured_case(cfg);
  const auto m = margin_for(sys, cfg, cfg.engine);
  std::cout << std::fixed << "VSM " << std::setprecision(3) << m.vsm_mw << " MW (lambda_max " << std::setprecision(5)
            << m.lambda_max << ")\n";
  return 0;
}

std::string fmt_z(td::Complex z) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(7) << z.real() << (z.imag() < 0 ? " - j" : " + j") << std::abs(z.imag());
  return os.str();
}

int run_twobus(const RunConfig& cfg) {
  const td::Complex zt{cfg.zt_r, cfg.zt_x}, zd{cfg.zd_r, cfg.zd_x};
  const auto load = td::reference_zip_load();
  std::cout << "z_t = " << fmt_z(zt) << ", z_d = " << fmt_z(zd) << '\n';
  Margin res[2];
  const double taps[2] = {td::kNoCvrTap, cfg.cvr_tap};
  const char* names[2] = {"No-CVR", "CVR"};
  for (int i = 0; i < 2; ++i) {
    const auto sys = td::build_extended_two_bus(zt, zd, load, taps[i]);
    const auto path = td::effective_impedance(zt, zd, sys.feeders.front().head_transformer.k_eff());
    res[i] = margin_for(sys, cfg, cfg.engine);
    std::cout << std::fixed << names[i] << " (tap " << std::setprecision(3) << taps[i] << "): z_eq = " << fmt_z(path.z_eq)
              << ", lambda_max " << std::setprecision(5) << res[i].lambda_max << ", VSM " << std::setprecision(3)
              << res[i].vsm_mw << " MW\n";
  }
  std::cout << (res[1].vsm_mw > res[0].vsm_mw ? "CVR margin > No-CVR margin" : "CVR margin < No-CVR margin") << '\n';
  if (!cfg.out.empty()) {
    std::string text = "scenario,tap,lambda_max,vsm_mw\n";
    for (int i = 0; i < 2; ++i) {
      std::ostringstream os;
      os << std::setprecision(12) << names[i] << ',' << taps[i] << ',' << res[i].lambda_max << ',' << res[i].vsm_mw
         << '\n';
      text += os.str();
    }
    td::write_text(cfg.out, text);
  }
  return 0;
}

int run_compare(const RunConfig& cfg) {
  // DG fleet and taps come from the scenarios, not from the overrides.
  auto base_cfg = cfg;
  base_cfg.dg.reset();
  base_cfg.tap.reset();
  const auto sys = configured_case(base_cfg);
  const double tap = cfg.tap.value_or(td::kCvrTap);
  std::vector<td::CvrScenario> scenarios;
  if (cfg.dg) {
    const auto mode = parse_dg(*cfg.dg);
    scenarios = {td::no_cvr_scenario(mode, cfg.penetration), td::cvr_scenario(mode, cfg.penetration, tap)};
  } else {
    scenarios = td::standard_scenarios(cfg.penetration, tap);
  }
  if (cfg.dg_vset_given)
    for (auto& s : scenarios)
      if (!s.is_cvr()) s.dg_vset = cfg.dg_vset;
  const auto report = td::compare_scenarios(sys, scenarios, nose_options(cfg), worker_threads());
  std::cout << td::report_table(report);
  if (!cfg.out.empty()) td::write_text(cfg.out, td::report_csv(report));
  for (const auto& r : report.rows)
    if (r.failed) return kExitNonConvergence;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coupled transmission/distribution power flow and voltage stability margins"};
  app.require_subcommand(1);
  RunConfig cfg;

  auto add_case = [&](CLI::App* sub) {
    sub->add_option("--case", cfg.case_path, "case file (JSON)")->required();
    sub->add_option("--tap", cfg.tap, "secondary tap of every feeder head transformer");
    sub->add_option("--dg", cfg.dg, "replace the DG fleet: none, upf or vvc")
        ->check(CLI::IsMember({"none", "upf", "vvc"}));
    sub->add_option("--dg-vset", cfg.dg_vset, "VVC voltage setpoint, pu")->each([&](const std::string&) {
      cfg.dg_vset_given = true;
    });
    sub->add_option("--penetration", cfg.penetration, "DG active output as a fraction of feeder load");
    sub->add_option("--replication", cfg.replication, "replica count for every feeder");
    sub->add_option("--tol-cosim", cfg.tol_cosim, "boundary exchange tolerance, pu");
  };
  auto add_margin = [&](CLI::App* sub) {
    sub->add_option("--lambda-step", cfg.lambda_step, "initial load-parameter step");
    sub->add_option("--engine", cfg.engine, "cosim (nose search) or cpf (continuation on the flattened model)")
        ->check(CLI::IsMember({"cosim", "cpf"}));
  };

  auto* solve = app.add_subcommand("solve", "monolithic power flow of the flattened case");
  add_case(solve);
  solve->add_option("--lambda", cfg.lambda, "load scale");
  solve->add_option("--out", cfg.out, "write the summary here instead of stdout");

  auto* cosim = app.add_subcommand("cosim", "coupled transmission/feeder solve");
  add_case(cosim);
  cosim->add_option("--lambda", cfg.lambda, "load scale");
  cosim->add_option("--bus", cfg.buses, "boundary bus for the exchange trace");
  cosim->add_option("--out", cfg.out, "boundary exchange trace CSV");

  auto* pv = app.add_subcommand("pv-curve", "trace the P-V curve and write it as CSV");
  add_case(pv);
  add_margin(pv);
  pv->add_option("--bus", cfg.buses, "monitored bus label (repeatable; default all)");
  pv->add_option("--out", cfg.out, "CSV path (default stdout)");

  auto* vsm = app.add_subcommand("vsm", "print the voltage stability margin in MW");
  add_case(vsm);
  add_margin(vsm);

  auto* twobus = app.add_subcommand("twobus", "two-bus No-CVR/CVR margin pair");
  add_margin(twobus);
  twobus->add_option("--zt-r", cfg.zt_r, "transmission resistance, pu");
  twobus->add_option("--zt-x", cfg.zt_x, "transmission reactance, pu");
  twobus->add_option("--zd-r", cfg.zd_r, "feeder resistance, pu");
  twobus->add_option("--zd-x", cfg.zd_x, "feeder reactance, pu");
  twobus->add_option("--tap", cfg.cvr_tap, "CVR secondary tap")->check(CLI::Range(td::kMinTap, td::kMaxTap));
  twobus->add_option("--out", cfg.out, "summary CSV");

  auto* compare = app.add_subcommand("compare", "No-CVR/CVR scenario table");
  add_case(compare);
  add_margin(compare);
  compare->add_option("--out", cfg.out, "report CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitInput;
  }

  try {
    if (*solve) return run_solve(cfg);
    if (*cosim) return run_cosim(cfg);
    if (*pv) return run_pv_curve(cfg);
    if (*vsm) return run_vsm(cfg);
    if (*twobus) return run_twobus(cfg);
    if (*compare) return run_compare(cfg);
  } catch (const td::ConvergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNonConvergence;
  } catch (const td::InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitInput;
}
