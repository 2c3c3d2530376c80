#include <gtest/gtest.h>

#include "common.hpp"

using namespace tdmargin;

namespace {

CoupledSystem extended(double tap = 1.0) {
  return build_extended_two_bus({0.01, 0.06}, {0.03, 0.06}, reference_zip_load(), tap);
}

/// Largest voltage difference between the coupled and the flattened solves,
/// covering transmission buses and every feeder node (the latter referred to
/// the primary side when the node sits behind the transformer ratio).
double coupled_vs_flat(const CoupledSystem& sys, double lambda) {
  const auto flat = flatten(sys);
  const auto mono = solve_newton(flat.net, {}, lambda);
  const auto co = solve_coupled(sys, lambda);
  EXPECT_TRUE(mono.converged) << mono.cause;
  EXPECT_TRUE(co.converged) << co.cause;
  if (!mono.converged || !co.converged) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < sys.transmission.buses.size(); ++i)
    worst = std::max(worst, std::abs(mono.phasor(i) - co.transmission.phasor(i)));
  for (std::size_t fi = 0; fi < sys.feeders.size(); ++fi) {
    const auto& f = sys.feeders[fi];
    const auto& sol = co.feeders[fi];
    for (std::size_t n = 0; n < sol.nodes.size(); ++n) {
      const int bus = flat.node_bus.at({fi, sol.nodes[n]});
      const auto bi = flat.net.index_of(bus);
      // nodes merged into the boundary bus carry primary-side voltages
      const double scale = bus == f.boundary_bus ? f.head_transformer.k_eff() : 1.0;
      worst = std::max(worst, std::abs(mono.phasor(bi) - scale * sol.v[n]));
    }
  }
  return worst;
}

}  // namespace

TEST(Cosim, ZeroLoadFeederConvergesInOneExchange) {
  auto sys = extended();
  sys.feeders[0].loads["load"] = tdtest::pq_load(0.0, 0.0);
  sys.transmission.buses[1].loads.push_back(tdtest::pq_load(0.5, 0.1));
  const auto co = solve_coupled(sys, 1.0);
  ASSERT_TRUE(co.converged);
  EXPECT_EQ(co.exchanges, 1);
  const auto alone = solve_newton(sys.transmission, {}, 1.0);
  EXPECT_NEAR(co.transmission.v_mag[1], alone.v_mag[1], 1e-12);
}

TEST(Cosim, MatchesFlattenedModel) {
  for (double tap : {1.0, 0.95})
    for (double lambda : {0.5, 1.0, 1.2}) EXPECT_LT(coupled_vs_flat(extended(tap), lambda), 1e-5) << tap << " " << lambda;
}

TEST(Cosim, MatchesFlattenedModelWithReplicasAndLeakage) {
  for (const char* name : {"ieee9_4d.json", "ieee9_123d.json"}) {
    auto sys = load_case(tdtest::case_path(name));
    for (auto& f : sys.feeders) f.head_transformer.tap_secondary = 0.95;
    EXPECT_LT(coupled_vs_flat(sys, 1.0), 1e-5) << name;
  }
}

TEST(Cosim, PastTheNoseDoesNotConverge) {
  const auto co = solve_coupled(extended(), 10.0);
  EXPECT_FALSE(co.converged);
  EXPECT_FALSE(co.cause.empty());
}

TEST(Cosim, ExchangeIsIdempotentAtConvergence) {
  const auto sys = extended();
  const auto co = solve_coupled(sys, 1.0);
  ASSERT_TRUE(co.converged);
  const auto again = exchange_step(sys, 1.0, co);
  EXPECT_TRUE(again.converged);
  EXPECT_NEAR(again.transmission.v_mag[1], co.transmission.v_mag[1], 1e-9);
  EXPECT_NEAR(again.injections[0].p, co.injections[0].p, 1e-9);
}

TEST(Cosim, FirstPassAddsFeederLosses) {
  const auto sys = extended();
  const auto start = cold_start(sys, 1.0);
  EXPECT_DOUBLE_EQ(start.injections[0].p, 0.6);
  const auto first = exchange_step(sys, 1.0, start);
  ASSERT_TRUE(first.cause.empty()) << first.cause;
  const auto& f = sys.feeders[0];
  const double delivered = feeder_delivered_load(f, first.feeders[0], 1.0);
  const double losses = tdtest::feeder_losses(f, first.feeders[0], first.transmission.phasor(1));
  EXPECT_GT(losses, 0.0);
  EXPECT_NEAR(first.injections[0].p - delivered, losses, 1e-9);
}

TEST(Cosim, FeedersOnDistinctBusesUpdateTogether) {
  const auto sys = load_case(tdtest::case_path("ieee9_4d.json"));
  ASSERT_GE(sys.feeders.size(), 2u);
  const auto start = cold_start(sys, 1.0);
  const auto first = exchange_step(sys, 1.0, start);
  ASSERT_TRUE(first.cause.empty());
  for (std::size_t i = 0; i < sys.feeders.size(); ++i) {
    EXPECT_NE(first.injections[i].p, start.injections[i].p);
    EXPECT_EQ(first.injections[i].bus, sys.feeders[i].boundary_bus);
  }
  EXPECT_EQ(first.boundary_trace.size(), sys.feeders.size());
}

TEST(Cosim, PlainPqExchangeAgreesWithLinearised) {
  const auto sys = load_case(tdtest::case_path("ieee9_123d.json"));
  CosimOptions plain;
  plain.linearized_boundary = false;
  plain.max_exchanges = 200;
  plain.tolerance = 1e-9;
  const auto a = solve_coupled(sys, 1.0);
  const auto b = solve_coupled(sys, 1.0, std::nullopt, plain);
  ASSERT_TRUE(a.converged && b.converged) << b.cause;
  EXPECT_GE(b.exchanges, a.exchanges);
  for (std::size_t i = 0; i < a.transmission.v_mag.size(); ++i)
    EXPECT_NEAR(a.transmission.v_mag[i], b.transmission.v_mag[i], 1e-5);
}

TEST(Cosim, TraceHasOneRowPerExchangeAndBus) {
  const auto sys = load_case(tdtest::case_path("ieee9_4d.json"));
  const auto co = solve_coupled(sys, 1.2);
  ASSERT_TRUE(co.converged);
  EXPECT_EQ(co.boundary_trace.size(), static_cast<std::size_t>(co.exchanges) * 3);
  EXPECT_EQ(co.boundary_trace.back().iteration, co.exchanges);
}

TEST(Cosim, WarmStartFromNeighbour) {
  const auto sys = extended();
  const auto a = solve_coupled(sys, 1.0);
  const auto b = solve_coupled(sys, 1.05, a);
  const auto c = solve_coupled(sys, 1.05);
  ASSERT_TRUE(b.converged && c.converged);
  EXPECT_NEAR(b.transmission.v_mag[1], c.transmission.v_mag[1], 1e-6);
  EXPECT_THROW(exchange_step(sys, 1.0, CoupledSolution{}), InputError);
}
