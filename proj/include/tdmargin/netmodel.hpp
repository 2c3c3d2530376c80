#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tdmargin/error.hpp"
#include "tdmargin/zipload.hpp"

namespace tdmargin {

using Complex = std::complex<double>;

enum class BusKind { slack, pv, pq };

inline const char* to_string(BusKind k) {
  switch (k) {
    case BusKind::slack: return "slack";
    case BusKind::pv: return "pv";
    case BusKind::pq: return "pq";
  }
  return "?";
}

struct TransmissionBus {
  int id = 0;
  BusKind kind = BusKind::pq;
  /// Voltage magnitude setpoint, used for slack and pv buses.
  double v_set = 1.0;
  /// Scheduled generation minus any constant (non-ZIP) demand, pu.
  double p_inj = 0.0;
  double q_inj = 0.0;
  double g_shunt = 0.0;
  double b_shunt = 0.0;
  double q_min = -std::numeric_limits<double>::infinity();
  double q_max = std::numeric_limits<double>::infinity();
  /// Voltage dependent demand at this bus. Scales with lambda.
  std::vector<ZipLoad> loads;
  /// Optional display label; empty means the numeric id is used.
  std::string name;

  [[nodiscard]] std::string label() const { return name.empty() ? std::to_string(id) : name; }
  friend bool operator==(const TransmissionBus&, const TransmissionBus&) = default;
};

/// Pi-model branch with an ideal off-nominal ratio `tap`:1 at the from end.
struct TransmissionBranch {
  int from = 0;
  int to = 0;
  double r = 0.0;
  double x = 0.0;
  double b_shunt = 0.0;
  double tap = 1.0;

  friend bool operator==(const TransmissionBranch&, const TransmissionBranch&) = default;
};

struct TransmissionNetwork {
  std::vector<TransmissionBus> buses;
  std::vector<TransmissionBranch> branches;

  [[nodiscard]] std::optional<std::size_t> find(int id) const {
    for (std::size_t i = 0; i < buses.size(); ++i)
      if (buses[i].id == id) return i;
    return std::nullopt;
  }
  [[nodiscard]] std::size_t index_of(int id) const {
    if (auto i = find(id)) return *i;
    throw InputError("unknown transmission bus " + std::to_string(id));
  }
  friend bool operator==(const TransmissionNetwork&, const TransmissionNetwork&) = default;
};

inline constexpr double kMinTap = 0.9;
inline constexpr double kMaxTap = 1.1;

struct SubstationTransformer {
  /// Turns ratio N1/N2 in per unit.
  double k_nominal = 1.0;
  /// Secondary tap position; lowering it reduces the secondary voltage.
  double tap_secondary = 1.0;
  /// Leakage impedance on the secondary side, pu. Zero means an ideal ratio device.
  Complex series_z{0.0, 0.0};

  [[nodiscard]] double k_eff() const { return k_nominal / tap_secondary; }
  friend bool operator==(const SubstationTransformer&, const SubstationTransformer&) = default;
};

struct FeederSegment {
  std::string from;
  std::string to;
  double r = 0.0;
  double x = 0.0;

  [[nodiscard]] Complex z() const { return {r, x}; }
  friend bool operator==(const FeederSegment&, const FeederSegment&) = default;
};

enum class DgMode { upf, vvc };

inline const char* to_string(DgMode m) { return m == DgMode::upf ? "upf" : "vvc"; }

struct DgUnit {
  double p_rated = 0.0;
  double s_rated = 0.0;
  DgMode mode = DgMode::upf;
  double v_set = 1.05;
  double q_max = 0.0;
  double droop_band = 0.04;

  friend bool operator==(const DgUnit&, const DgUnit&) = default;
};

/// Default reactive capability of an inverter: 44% of its rating, limited by
/// the headroom left after active output.
inline double default_q_max(double p_rated, double s_rated) {
  const double headroom = std::sqrt(std::max(0.0, s_rated * s_rated - p_rated * p_rated));
  return std::min(0.44 * s_rated, headroom);
}

struct FeederModel {
  std::string name;
  std::string head = "head";
  int boundary_bus = 0;
  int replication = 1;
  SubstationTransformer head_transformer;
  std::vector<FeederSegment> segments;
  std::map<std::string, ZipLoad> loads;
  std::map<std::string, DgUnit> dg_units;

  friend bool operator==(const FeederModel&, const FeederModel&) = default;
};

struct CoupledSystem {
  TransmissionNetwork transmission;
  std::vector<FeederModel> feeders;
  double s_base_mva = 100.0;

  friend bool operator==(const CoupledSystem&, const CoupledSystem&) = default;
};

struct Violation {
  std::string code;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;

  [[nodiscard]] bool ok() const { return violations.empty(); }
  [[nodiscard]] bool has(std::string_view code) const {
    return std::any_of(violations.begin(), violations.end(),
                       [&](const Violation& v) { return v.code == code; });
  }
  [[nodiscard]] std::string summary() const {
    std::string out;
    for (const auto& v : violations) {
      if (!out.empty()) out += "; ";
      out += v.code + ": " + v.message;
    }
    return out;
  }
};

/// Nodes of the feeder in breadth-first order from the head, siblings sorted
/// by id. Throws TopologyError on cycles, multiple parents or unreachable nodes.
inline std::vector<std::string> feeder_topology_order(const FeederModel& feeder) {
  std::map<std::string, std::vector<std::string>> children;
  std::map<std::string, int> parents;
  std::set<std::string> nodes{feeder.head};
  for (const auto& seg : feeder.segments) {
    if (seg.from == seg.to) throw TopologyError("feeder '" + feeder.name + "': self loop at " + seg.from);
    children[seg.from].push_back(seg.to);
    ++parents[seg.to];
    nodes.insert(seg.from);
    nodes.insert(seg.to);
  }
  if (parents.count(feeder.head))
    throw TopologyError("feeder '" + feeder.name + "': cycle through head node " + feeder.head);
  for (const auto& [node, count] : parents)
    if (count > 1) throw TopologyError("feeder '" + feeder.name + "': cycle, node " + node + " has several parents");
  for (auto& [_, c] : children) std::sort(c.begin(), c.end());

  std::vector<std::string> order;
  order.reserve(nodes.size());
  std::set<std::string> seen{feeder.head};
  std::queue<std::string> frontier;
  frontier.push(feeder.head);
  while (!frontier.empty()) {
    auto node = std::move(frontier.front());
    frontier.pop();
    if (auto it = children.find(node); it != children.end()) {
      for (const auto& child : it->second) {
        if (!seen.insert(child).second)
          throw TopologyError("feeder '" + feeder.name + "': cycle at node " + child);
        frontier.push(child);
      }
    }
    order.push_back(std::move(node));
  }
  if (order.size() != nodes.size())
    throw TopologyError("feeder '" + feeder.name + "': cycle, some nodes are unreachable from the head");
  return order;
}

/// Collects every structural problem instead of stopping at the first one.
inline ValidationReport validate_network(const CoupledSystem& sys) {
  ValidationReport report;
  auto add = [&](std::string code, std::string message) {
    report.violations.push_back({std::move(code), std::move(message)});
  };
  const auto& net = sys.transmission;

  if (!(sys.s_base_mva > 0.0)) add("bad base", "s_base_mva must be positive");

  std::set<int> ids;
  int slack = 0;
  for (const auto& bus : net.buses) {
    if (!ids.insert(bus.id).second) add("duplicate bus", "bus " + std::to_string(bus.id) + " defined twice");
    if (bus.kind == BusKind::slack) ++slack;
    if (bus.kind != BusKind::pq && !(bus.v_set > 0.0))
      add("bad setpoint", "bus " + std::to_string(bus.id) + " has non-positive v_set");
    if (bus.q_min > bus.q_max) add("bad q limits", "bus " + std::to_string(bus.id) + " has q_min > q_max");
    for (const auto& load : bus.loads) {
      try {
        check_zip(load, "bus " + std::to_string(bus.id));
      } catch (const InputError& e) {
        add("bad load", e.what());
      }
    }
  }
  if (slack == 0) add("no slack", "no slack bus");
  if (slack > 1) add("multiple slack", "multiple slack buses (" + std::to_string(slack) + ")");

  for (const auto& br : net.branches) {
    const auto tag = "branch " + std::to_string(br.from) + "-" + std::to_string(br.to);
    if (!ids.count(br.from) || !ids.count(br.to)) add("dangling branch", tag + " references an unknown bus");
    if (br.r == 0.0 && br.x == 0.0) add("zero impedance", tag + " has zero impedance");
    if (!(br.tap > 0.0)) add("bad tap", tag + " has non-positive tap");
  }

  for (const auto& f : sys.feeders) {
    const auto tag = "feeder '" + f.name + "'";
    auto bus = net.find(f.boundary_bus);
    if (!bus)
      add("dangling boundary bus", tag + " attaches to missing bus " + std::to_string(f.boundary_bus));
    else if (net.buses[*bus].kind != BusKind::pq)
      add("boundary not pq", tag + " attaches to non-pq bus " + std::to_string(f.boundary_bus));
    if (f.replication < 1) add("bad replication", tag + " replication must be >= 1");
    const auto& t = f.head_transformer;
    if (!(t.k_nominal > 0.0)) add("bad transformer", tag + " k_nominal must be positive");
    if (t.tap_secondary < kMinTap || t.tap_secondary > kMaxTap)
      add("bad transformer", tag + " tap_secondary outside [0.9, 1.1]");

    std::set<std::string> nodes;
    try {
      auto order = feeder_topology_order(f);
      nodes.insert(order.begin(), order.end());
    } catch (const TopologyError& e) {
      add("non-radial feeder", e.what());
    }
    if (!nodes.empty()) {
      for (const auto& [node, load] : f.loads)
        if (!nodes.count(node)) add("unknown node", tag + " load at unknown node " + node);
      for (const auto& [node, dg] : f.dg_units)
        if (!nodes.count(node)) add("unknown node", tag + " DG at unknown node " + node);
    }
    for (const auto& [node, load] : f.loads) {
      try {
        check_zip(load, f.name + ":" + node);
      } catch (const InputError& e) {
        add("bad load", e.what());
      }
    }
    for (const auto& [node, dg] : f.dg_units) {
      const auto dtag = tag + " DG at " + node;
      if (dg.p_rated < 0.0 || dg.p_rated > dg.s_rated) add("bad dg", dtag + " needs 0 <= p_rated <= s_rated");
      const double headroom = std::sqrt(std::max(0.0, dg.s_rated * dg.s_rated - dg.p_rated * dg.p_rated));
      if (dg.q_max < 0.0 || dg.q_max > headroom + 1e-12) add("bad dg", dtag + " q_max exceeds inverter headroom");
      if (dg.mode == DgMode::vvc && !(dg.droop_band > 0.0)) add("bad dg", dtag + " droop_band must be positive");
    }
  }
  return report;
}

/// Copy of the system with every ZIP base multiplied by `lambda`. DG output is untouched.
inline CoupledSystem scale_loads(CoupledSystem sys, double lambda) {
  if (lambda < 0.0) throw InputError("lambda must be non-negative");
  for (auto& bus : sys.transmission.buses)
    for (auto& load : bus.loads) load = scaled(load, lambda);
  for (auto& f : sys.feeders)
    for (auto& [_, load] : f.loads) load = scaled(load, lambda);
  return sys;
}

/// Monolithic transmission network equivalent to a coupled system.
struct FlattenedNetwork {
  TransmissionNetwork net;
  /// (feeder index, node) -> bus id carrying that node.
  std::map<std::pair<std::size_t, std::string>, int> node_bus;
};

/// Replaces each feeder with explicit branches. Segments leaving the
/// transformer become tapped branches so the feeder impedance is referred to
/// the primary through k_eff^2. Zero-impedance segments merge into their
/// parent. Identical replicas collapse into one copy with impedances divided
/// and loads multiplied by the replication count. Feeders with DG are rejected.
inline FlattenedNetwork flatten(const CoupledSystem& sys) {
  FlattenedNetwork out{sys.transmission, {}};
  int next_id = 0;
  for (const auto& bus : sys.transmission.buses) next_id = std::max(next_id, bus.id);
  ++next_id;

  for (std::size_t fi = 0; fi < sys.feeders.size(); ++fi) {
    const auto& f = sys.feeders[fi];
    if (!f.dg_units.empty()) throw InputError("flatten: feeder '" + f.name + "' has DG units");
    const double reps = f.replication;
    const double k = f.head_transformer.k_eff();

    struct Mapping {
      int bus;
      bool behind_tap;
    };
    std::map<std::string, Mapping> where;
    auto new_bus = [&](const std::string& node) {
      TransmissionBus b;
      b.id = next_id++;
      b.kind = BusKind::pq;
      b.name = (f.name.empty() ? "feeder" + std::to_string(fi) : f.name) + ":" + node;
      out.net.buses.push_back(b);
      out.node_bus[{fi, node}] = b.id;
      return b.id;
    };

    const Complex zt = f.head_transformer.series_z;
    if (zt == Complex{}) {
      where[f.head] = {f.boundary_bus, true};
      out.node_bus[{fi, f.head}] = f.boundary_bus;
    } else {
      const int id = new_bus(f.head);
      out.net.branches.push_back({f.boundary_bus, id, zt.real() / reps, zt.imag() / reps, 0.0, k});
      where[f.head] = {id, false};
    }

    std::map<std::string, const FeederSegment*> parent_seg;
    for (const auto& seg : f.segments) parent_seg[seg.to] = &seg;
    for (const auto& node : feeder_topology_order(f)) {
      if (node == f.head) continue;
      const auto& seg = *parent_seg.at(node);
      const auto up = where.at(seg.from);
      if (seg.r == 0.0 && seg.x == 0.0) {
        where[node] = up;
        out.node_bus[{fi, node}] = up.bus;
        continue;
      }
      const int id = new_bus(node);
      out.net.branches.push_back({up.bus, id, seg.r / reps, seg.x / reps, 0.0, up.behind_tap ? k : 1.0});
      where[node] = {id, false};
    }

    for (const auto& [node, load] : f.loads) {
      const auto m = where.at(node);
      auto l = scaled(load, reps);
      if (m.behind_tap) l.v0 *= k;
      out.net.buses[out.net.index_of(m.bus)].loads.push_back(l);
    }
  }
  return out;
}

}  // namespace tdmargin
