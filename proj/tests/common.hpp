#pragma once

#include <cmath>
#include <complex>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "tdmargin.hpp"

namespace tdtest {

using tdmargin::Complex;

inline std::string case_path(const std::string& name) { return std::string(TDMARGIN_CASE_DIR) + "/" + name; }

/// |V|^2 roots of |V|^4 + (2(PR+QX) - E^2)|V|^2 + (P^2+Q^2)|Z|^2 = 0 for a
/// constant-PQ load behind a series impedance. NaN when past the nose.
struct QuarticRoots {
  double high = NAN;
  double low = NAN;
};

inline QuarticRoots quartic_roots(double e, double p, double q, double r, double x) {
  const double b = 2.0 * (p * r + q * x) - e * e;
  const double c = (p * p + q * q) * (r * r + x * x);
  const double disc = b * b - 4.0 * c;
  if (disc < 0.0) return {};
  return {std::sqrt((-b + std::sqrt(disc)) / 2.0), std::sqrt((-b - std::sqrt(disc)) / 2.0)};
}

inline tdmargin::ZipLoad pq_load(double p, double q) {
  tdmargin::ZipLoad l;
  l.p0 = p;
  l.q0 = q;
  return l;
}

inline tdmargin::ZipLoad zip_load(double p, double q, double z, double i, double c) {
  tdmargin::ZipLoad l;
  l.p0 = p;
  l.q0 = q;
  l.p_frac = {z, i, c};
  l.q_frac = {z, i, c};
  return l;
}

/// Slack bus 1 at `e` feeding PQ bus 2 through r + jx.
inline tdmargin::TransmissionNetwork two_bus(double r, double x, const tdmargin::ZipLoad& load, double e = 1.0) {
  tdmargin::TransmissionNetwork net;
  tdmargin::TransmissionBus s;
  s.id = 1;
  s.kind = tdmargin::BusKind::slack;
  s.v_set = e;
  tdmargin::TransmissionBus b;
  b.id = 2;
  b.kind = tdmargin::BusKind::pq;
  b.loads.push_back(load);
  net.buses = {s, b};
  net.branches.push_back({1, 2, r, x, 0.0, 1.0});
  return net;
}

/// Central-difference jacobian of the mismatch around `s`.
inline Eigen::MatrixXd fd_jacobian(const tdmargin::PowerFlowProblem& pf, const tdmargin::PowerFlowSolution& s,
                                   double lambda, double h = 1e-6) {
  const Eigen::VectorXd x0 = pf.pack(s);
  Eigen::MatrixXd j(x0.size(), x0.size());
  for (Eigen::Index c = 0; c < x0.size(); ++c) {
    auto sp = s, sm = s;
    Eigen::VectorXd xp = x0, xm = x0;
    xp(c) += h;
    xm(c) -= h;
    pf.unpack(xp, sp);
    pf.unpack(xm, sm);
    j.col(c) = (pf.mismatch(sp, lambda) - pf.mismatch(sm, lambda)) / (2.0 * h);
  }
  return j;
}

/// Largest entrywise |a - b| / max(|b|, 1).
inline double max_rel_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index k = 0; k < a.cols(); ++k)
      worst = std::max(worst, std::abs(a(i, k) - b(i, k)) / std::max(std::abs(b(i, k)), 1.0));
  return worst;
}

/// Random state with magnitudes in [vlo, vhi] and angles within +-0.3 rad.
inline tdmargin::PowerFlowSolution random_state(const tdmargin::PowerFlowProblem& pf, std::mt19937& rng,
                                                double vlo = 0.6, double vhi = 1.1) {
  auto s = pf.initial_state(std::nullopt);
  std::uniform_real_distribution<double> mag(vlo, vhi), ang(-0.3, 0.3);
  for (const auto i : pf.layout().pvpq) s.v_ang[i] = ang(rng);
  for (const auto i : pf.layout().pq) s.v_mag[i] = mag(rng);
  return s;
}

/// Series losses of one feeder replica from the node voltages alone, pu.
inline double feeder_losses(const tdmargin::FeederModel& f, const tdmargin::FeederSolution& sol, Complex head_voltage) {
  double loss = 0.0;
  auto v_of = [&](const std::string& node) { return sol.v[*sol.find(node)]; };
  const Complex zt = f.head_transformer.series_z;
  if (zt != Complex{}) {
    const Complex i = (head_voltage / f.head_transformer.k_eff() - v_of(f.head)) / zt;
    loss += std::norm(i) * zt.real();
  }
  for (const auto& seg : f.segments) {
    if (seg.z() == Complex{}) continue;
    const Complex i = (v_of(seg.from) - v_of(seg.to)) / seg.z();
    loss += std::norm(i) * seg.r;
  }
  return loss;
}

}  // namespace tdtest
