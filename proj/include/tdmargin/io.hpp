#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdmargin/cosim.hpp"
#include "tdmargin/cvr.hpp"
#include "tdmargin/margin.hpp"
#include "tdmargin/netmodel.hpp"

namespace tdmargin {

// ---------------------------------------------------------------------------
// Case files (JSON). Impedances and shunts in pu, powers in MW / MVAr,
// converted to pu on s_base_mva when loaded. See cases/README.md.

namespace detail {

using Json = nlohmann::json;

class CaseReader {
 public:
  explicit CaseReader(double s_base) : s_base_(s_base) {}

  template <class T>
  static T get(const Json& j, const std::string& key, const std::string& path) {
    if (!j.is_object() || !j.contains(key)) throw InputError(path + ": missing field '" + key + "'");
    try {
      return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw InputError(path + "." + key + ": wrong type");
    }
  }

  template <class T>
  static T get_or(const Json& j, const std::string& key, const std::string& path, T fallback) {
    if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
    return get<T>(j, key, path);
  }

  [[nodiscard]] double power(const Json& j, const std::string& key, const std::string& path,
                             double fallback = 0.0) const {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (v.is_string()) {
      const auto s = v.get<std::string>();
      if (s == "inf") return std::numeric_limits<double>::infinity();
      if (s == "-inf") return -std::numeric_limits<double>::infinity();
      throw InputError(path + "." + key + ": expected a number");
    }
    return get<double>(j, key, path) / s_base_;
  }

  static ZipFractions fractions(const Json& j, const std::string& prefix, const std::string& path,
                                const ZipFractions* fallback) {
    const std::string list_key = "zip_" + prefix;
    if (j.contains(list_key)) {
      const auto v = get<std::vector<double>>(j, list_key, path);
      if (v.size() != 3) throw InputError(path + "." + list_key + ": expected [z, i, p]");
      return {v[0], v[1], v[2]};
    }
    if (j.contains(prefix + "z") || j.contains(prefix + "i") || j.contains(prefix + "p"))
      return {get_or(j, prefix + "z", path, 0.0), get_or(j, prefix + "i", path, 0.0),
              get_or(j, prefix + "p", path, 0.0)};
    if (j.contains("zip")) {
      const auto v = get<std::vector<double>>(j, "zip", path);
      if (v.size() != 3) throw InputError(path + ".zip: expected [z, i, p]");
      return {v[0], v[1], v[2]};
    }
    if (fallback) return *fallback;
    return {};
  }

  [[nodiscard]] ZipLoad load(const Json& j, const std::string& path) const {
    if (!j.is_object()) throw InputError(path + ": expected an object");
    ZipLoad l;
    l.p0 = power(j, "p0", path);
    l.q0 = power(j, "q0", path);
    l.v0 = get_or(j, "v0", path, 1.0);
    l.p_frac = fractions(j, "p", path, nullptr);
    l.q_frac = fractions(j, "q", path, &l.p_frac);
    return l;
  }

  [[nodiscard]] TransmissionBus bus(const Json& j, const std::string& path) const {
    TransmissionBus b;
    b.id = get<int>(j, "id", path);
    const auto kind = get_or<std::string>(j, "kind", path, "pq");
    if (kind == "slack")
      b.kind = BusKind::slack;
    else if (kind == "pv")
      b.kind = BusKind::pv;
    else if (kind == "pq")
      b.kind = BusKind::pq;
    else
      throw InputError(path + ".kind: expected one of slack, pv, pq, got '" + kind + "'");
    b.v_set = get_or(j, "v_set", path, 1.0);
    b.p_inj = power(j, "p_inj", path);
    b.q_inj = power(j, "q_inj", path);
    b.g_shunt = get_or(j, "g_shunt", path, 0.0);
    b.b_shunt = get_or(j, "b_shunt", path, 0.0);
    b.q_min = power(j, "q_min", path, -std::numeric_limits<double>::infinity());
    b.q_max = power(j, "q_max", path, std::numeric_limits<double>::infinity());
    b.name = get_or<std::string>(j, "name", path, "");
    if (j.contains("native_load")) {
      const auto& nl = j.at("native_load");
      if (nl.is_array()) {
        for (std::size_t i = 0; i < nl.size(); ++i)
          b.loads.push_back(load(nl[i], path + ".native_load[" + std::to_string(i) + "]"));
      } else if (!nl.is_null()) {
        b.loads.push_back(load(nl, path + ".native_load"));
      }
    }
    return b;
  }

  [[nodiscard]] FeederModel feeder(const Json& j, const std::string& path) const {
    FeederModel f;
    f.name = get_or<std::string>(j, "name", path, "");
    f.head = get_or<std::string>(j, "head", path, "head");
    f.boundary_bus = get<int>(j, "boundary_bus", path);
    f.replication = get_or(j, "replication", path, 1);
    if (j.contains("head_transformer")) {
      const auto& t = j.at("head_transformer");
      const auto tp = path + ".head_transformer";
      f.head_transformer.k_nominal = get_or(t, "k_nominal", tp, 1.0);
      f.head_transformer.tap_secondary = get_or(t, "tap_secondary", tp, 1.0);
      f.head_transformer.series_z = {get_or(t, "series_r", tp, 0.0), get_or(t, "series_x", tp, 0.0)};
    }
    if (j.contains("segments")) {
      const auto& segs = j.at("segments");
      for (std::size_t i = 0; i < segs.size(); ++i) {
        const auto sp = path + ".segments[" + std::to_string(i) + "]";
        f.segments.push_back({get<std::string>(segs[i], "from", sp), get<std::string>(segs[i], "to", sp),
                              get_or(segs[i], "r", sp, 0.0), get_or(segs[i], "x", sp, 0.0)});
      }
    }
    if (j.contains("loads"))
      for (const auto& [node, lj] : j.at("loads").items()) f.loads[node] = load(lj, path + ".loads." + node);
    if (j.contains("dg_units")) {
      for (const auto& [node, dj] : j.at("dg_units").items()) {
        const auto dp = path + ".dg_units." + node;
        DgUnit dg;
        dg.p_rated = power(dj, "p_rated", dp);
        dg.s_rated = power(dj, "s_rated", dp, dg.p_rated);
        const auto mode = get_or<std::string>(dj, "mode", dp, "upf");
        if (mode == "upf")
          dg.mode = DgMode::upf;
        else if (mode == "vvc")
          dg.mode = DgMode::vvc;
        else
          throw InputError(dp + ".mode: expected upf or vvc, got '" + mode + "'");
        dg.v_set = get_or(dj, "v_set", dp, 1.05);
        dg.droop_band = get_or(dj, "droop_band", dp, 0.04);
        dg.q_max = power(dj, "q_max", dp, default_q_max(dg.p_rated, dg.s_rated));
        f.dg_units[node] = dg;
      }
    }
    return f;
  }

 private:
  double s_base_;
};

inline std::string line_context(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

inline Json power_json(double pu, double s_base) {
  if (std::isinf(pu)) return pu > 0 ? "inf" : "-inf";
  return pu * s_base;
}

inline Json load_json(const ZipLoad& l, double s_base) {
  return {{"p0", l.p0 * s_base},
          {"q0", l.q0 * s_base},
          {"v0", l.v0},
          {"pz", l.p_frac.z},
          {"pi", l.p_frac.i},
          {"pp", l.p_frac.p},
          {"qz", l.q_frac.z},
          {"qi", l.q_frac.i},
          {"qp", l.q_frac.p}};
}

}  // namespace detail

/// Builds a system from JSON text without validating it.
inline CoupledSystem parse_case(const std::string& text) {
  detail::Json j;
  try {
    j = detail::Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("parse error at " + detail::line_context(text, e.byte == 0 ? 0 : e.byte - 1) + ": " +
                     e.what());
  }
  if (!j.is_object()) throw InputError("case: top level must be an object");
  CoupledSystem sys;
  sys.s_base_mva = detail::CaseReader::get_or(j, "s_base_mva", "case", 100.0);
  if (!(sys.s_base_mva > 0.0)) throw InputError("case.s_base_mva: must be positive");
  const detail::CaseReader rd(sys.s_base_mva);

  if (!j.contains("transmission")) throw InputError("case: missing field 'transmission'");
  const auto& t = j.at("transmission");
  if (t.contains("buses")) {
    const auto& buses = t.at("buses");
    for (std::size_t i = 0; i < buses.size(); ++i)
      sys.transmission.buses.push_back(rd.bus(buses[i], "transmission.buses[" + std::to_string(i) + "]"));
  }
  if (t.contains("branches")) {
    const auto& brs = t.at("branches");
    for (std::size_t i = 0; i < brs.size(); ++i) {
      const auto p = "transmission.branches[" + std::to_string(i) + "]";
      using R = detail::CaseReader;
      sys.transmission.branches.push_back({R::get<int>(brs[i], "from", p), R::get<int>(brs[i], "to", p),
                                           R::get_or(brs[i], "r", p, 0.0), R::get_or(brs[i], "x", p, 0.0),
                                           R::get_or(brs[i], "b_shunt", p, 0.0),
                                           R::get_or(brs[i], "tap", p, 1.0)});
    }
  }
  if (j.contains("feeders")) {
    const auto& fs = j.at("feeders");
    for (std::size_t i = 0; i < fs.size(); ++i)
      sys.feeders.push_back(rd.feeder(fs[i], "feeders[" + std::to_string(i) + "]"));
  }
  return sys;
}

/// Reads and validates a case file. Throws InputError listing every violation.
inline CoupledSystem load_case(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open case file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  auto sys = parse_case(buf.str());
  const auto report = validate_network(sys);
  if (!report.ok()) throw InputError("invalid case '" + path + "': " + report.summary());
  return sys;
}

/// Normalised JSON form of a system; parse_case() of it reproduces the system.
inline std::string case_to_json(const CoupledSystem& sys) {
  using detail::Json;
  const double sb = sys.s_base_mva;
  Json buses = Json::array();
  for (const auto& b : sys.transmission.buses) {
    Json jb = {{"id", b.id},
               {"kind", to_string(b.kind)},
               {"v_set", b.v_set},
               {"p_inj", b.p_inj * sb},
               {"q_inj", b.q_inj * sb},
               {"g_shunt", b.g_shunt},
               {"b_shunt", b.b_shunt},
               {"q_min", detail::power_json(b.q_min, sb)},
               {"q_max", detail::power_json(b.q_max, sb)}};
    if (!b.name.empty()) jb["name"] = b.name;
    if (b.loads.size() == 1) {
      jb["native_load"] = detail::load_json(b.loads.front(), sb);
    } else if (!b.loads.empty()) {
      Json arr = Json::array();
      for (const auto& l : b.loads) arr.push_back(detail::load_json(l, sb));
      jb["native_load"] = arr;
    }
    buses.push_back(jb);
  }
  Json branches = Json::array();
  for (const auto& br : sys.transmission.branches)
    branches.push_back(
        {{"from", br.from}, {"to", br.to}, {"r", br.r}, {"x", br.x}, {"b_shunt", br.b_shunt}, {"tap", br.tap}});

  Json feeders = Json::array();
  for (const auto& f : sys.feeders) {
    Json segs = Json::array();
    for (const auto& s : f.segments) segs.push_back({{"from", s.from}, {"to", s.to}, {"r", s.r}, {"x", s.x}});
    Json loads = Json::object();
    for (const auto& [node, l] : f.loads) loads[node] = detail::load_json(l, sb);
    Json dgs = Json::object();
    for (const auto& [node, d] : f.dg_units)
      dgs[node] = {{"p_rated", d.p_rated * sb}, {"s_rated", d.s_rated * sb}, {"mode", to_string(d.mode)},
                   {"v_set", d.v_set},          {"q_max", d.q_max * sb},     {"droop_band", d.droop_band}};
    feeders.push_back({{"name", f.name},
                       {"head", f.head},
                       {"boundary_bus", f.boundary_bus},
                       {"replication", f.replication},
                       {"head_transformer",
                        {{"k_nominal", f.head_transformer.k_nominal},
                         {"tap_secondary", f.head_transformer.tap_secondary},
                         {"series_r", f.head_transformer.series_z.real()},
                         {"series_x", f.head_transformer.series_z.imag()}}},
                       {"segments", segs},
                       {"loads", loads},
                       {"dg_units", dgs}});
  }
  Json root = {{"s_base_mva", sb},
               {"transmission", {{"buses", buses}, {"branches", branches}}},
               {"feeders", feeders}};
  return root.dump(2) + "\n";
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// CSV exports.

namespace detail {
inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}
}  // namespace detail

/// `lambda,bus_id,v_pu,delivered_mw_total`, one row per (point, monitored bus),
/// points in curve order and buses in the order given (all buses when empty).
inline std::string pv_curve_csv(const PvCurve& curve, const std::vector<std::string>& monitored = {}) {
  if (curve.points.empty()) throw InputError("pv curve is empty");
  std::vector<std::size_t> cols;
  if (monitored.empty()) {
    for (std::size_t i = 0; i < curve.bus_labels.size(); ++i) cols.push_back(i);
  } else {
    for (const auto& label : monitored) {
      auto c = curve.bus_column(label);
      if (!c) throw InputError("pv curve has no bus '" + label + "'");
      cols.push_back(*c);
    }
  }
  std::ostringstream os;
  os << "lambda,bus_id,v_pu,delivered_mw_total\n";
  for (const auto& pt : curve.points)
    for (auto c : cols)
      os << detail::num(pt.lambda) << ',' << curve.bus_labels[c] << ',' << detail::num(pt.v_mag[c]) << ','
         << detail::num(pt.delivered * curve.s_base_mva) << '\n';
  return os.str();
}

inline void export_pv_curve(const PvCurve& curve, const std::string& path,
                            const std::vector<std::string>& monitored = {}) {
  write_text(path, pv_curve_csv(curve, monitored));
}

/// `iter,v_boundary_pu,p_pu,q_pu` for one boundary bus.
inline std::string boundary_trace_csv(const CoupledSolution& sol, int bus) {
  std::ostringstream os;
  os << "iter,v_boundary_pu,p_pu,q_pu\n";
  for (const auto& r : sol.boundary_trace)
    if (r.bus == bus)
      os << r.iteration << ',' << detail::num(r.v_boundary) << ',' << detail::num(r.p) << ',' << detail::num(r.q)
         << '\n';
  return os.str();
}

/// `scenario,vsm_mw,lambda_max,pct_reduction`; failed rows and unpaired rows leave fields empty.
inline std::string report_csv(const ScenarioReport& report) {
  std::ostringstream os;
  os << "scenario,vsm_mw,lambda_max,pct_reduction\n";
  for (const auto& r : report.rows) {
    os << r.label << ',';
    if (!r.failed) os << detail::num(r.vsm_mw) << ',' << detail::num(r.lambda_max);
    else os << ',';
    os << ',';
    if (r.pct_reduction) os << detail::num(*r.pct_reduction);
    os << '\n';
  }
  return os.str();
}

inline std::string report_table(const ScenarioReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "scenario" << std::right << std::setw(14) << "VSM (MW)" << std::setw(12)
     << "lambda_max" << std::setw(18) << "lambda VSM (MW)" << std::setw(14) << "% reduction" << '\n';
  os << std::string(80, '-') << '\n';
  os << std::fixed;
  for (const auto& r : report.rows) {
    os << std::left << std::setw(22) << r.label << std::right;
    if (r.failed) {
      os << "  failed: " << r.error << '\n';
      continue;
    }
    os << std::setw(14) << std::setprecision(4) << r.vsm_mw << std::setw(12) << std::setprecision(4)
       << r.lambda_max << std::setw(18) << std::setprecision(4) << r.lambda_vsm_mw;
    if (r.pct_reduction) os << std::setw(13) << std::setprecision(2) << *r.pct_reduction << '%';
    os << '\n';
  }
  return os.str();
}

}  // namespace tdmargin
