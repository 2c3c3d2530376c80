#include <gtest/gtest.h>

#include <random>

#include "common.hpp"

using namespace tdmargin;

TEST(Ybus, SingleBranchOffDiagonal) {
  const auto net = tdtest::two_bus(0.01, 0.06, tdtest::pq_load(0.0, 0.0));
  const auto y = build_ybus(net);
  // 1/(0.01+j0.06) = (0.01-j0.06)/0.0037
  EXPECT_NEAR(y(0, 1).real(), -2.7027027027, 1e-9);
  EXPECT_NEAR(y(0, 1).imag(), 16.2162162162, 1e-9);
  EXPECT_EQ(y(0, 1), y(1, 0));
  EXPECT_NEAR(std::abs(y(0, 0) + y(0, 1)), 0.0, 1e-12);
}

TEST(Ybus, ShuntsOnlyWithoutBranches) {
  auto net = tdtest::two_bus(0.01, 0.06, tdtest::pq_load(0.0, 0.0));
  net.branches.clear();
  net.buses[1].g_shunt = 0.02;
  net.buses[1].b_shunt = 0.3;
  const auto y = build_ybus(net);
  EXPECT_EQ(y(0, 0), Complex{});
  EXPECT_EQ(y(0, 1), Complex{});
  EXPECT_EQ(y(1, 1), (Complex{0.02, 0.3}));
}

TEST(Ybus, TapModelAndLineCharging) {
  auto net = tdtest::two_bus(0.02, 0.1, tdtest::pq_load(0.0, 0.0));
  net.branches[0].b_shunt = 0.04;
  const Complex ys = 1.0 / Complex{0.02, 0.1};
  const Complex half{0.0, 0.02};
  auto y = build_ybus(net);
  EXPECT_NEAR(std::abs(y(0, 0) - (ys + half)), 0.0, 1e-12);
  EXPECT_NEAR(std::abs(y(1, 1) - (ys + half)), 0.0, 1e-12);
  EXPECT_NEAR(std::abs(y(0, 1) + ys), 0.0, 1e-12);

  net.branches[0].tap = 1.05;
  y = build_ybus(net);
  EXPECT_NEAR(std::abs(y(0, 0) - ((ys + half) / (1.05 * 1.05))), 0.0, 1e-12);
  EXPECT_NEAR(std::abs(y(1, 1) - (ys + half)), 0.0, 1e-12);
  EXPECT_NEAR(std::abs(y(0, 1) + ys / 1.05), 0.0, 1e-12);
}

TEST(Ybus, RejectsZeroImpedanceAndBadTap) {
  auto net = tdtest::two_bus(0.0, 0.0, tdtest::pq_load(0.0, 0.0));
  EXPECT_THROW(build_ybus(net), InputError);
  net.branches[0].x = 0.1;
  net.branches[0].tap = 0.0;
  EXPECT_THROW(build_ybus(net), InputError);
}

TEST(Newton, TwoBusMatchesQuarticHighRoot) {
  const auto net = tdtest::two_bus(0.01, 0.06, tdtest::pq_load(0.6, 0.2));
  const auto s = solve_newton(net, {}, 1.0);
  ASSERT_TRUE(s.converged) << s.cause;
  const auto roots = tdtest::quartic_roots(1.0, 0.6, 0.2, 0.01, 0.06);
  EXPECT_NEAR(s.v_mag[1], roots.high, 1e-9);
  EXPECT_NEAR(s.v_mag[1], 0.98105, 5e-6);
  EXPECT_LE(s.max_mismatch, 1e-8);
}

TEST(Newton, ZeroLoadIsFlat) {
  const auto net = tdtest::two_bus(0.01, 0.06, tdtest::pq_load(0.0, 0.0));
  const auto s = solve_newton(net, {}, 1.0);
  ASSERT_TRUE(s.converged);
  EXPECT_LE(s.iterations, 1);
  EXPECT_DOUBLE_EQ(s.v_mag[1], 1.0);
  EXPECT_DOUBLE_EQ(s.v_ang[1], 0.0);
}

TEST(Newton, PastTheNoseDoesNotConverge) {
  const auto net = tdtest::two_bus(0.01, 0.06, tdtest::pq_load(0.6, 0.2));
  ASSERT_TRUE(std::isnan(tdtest::quartic_roots(1.0, 6.0, 2.0, 0.01, 0.06).high));
  const auto s = solve_newton(net, {}, 10.0);
  EXPECT_FALSE(s.converged);
  EXPECT_FALSE(s.cause.empty());
}

TEST(Newton, BoundaryInjectionActsAsLoad) {
  const auto net = tdtest::two_bus(0.01, 0.06, tdtest::pq_load(0.0, 0.0));
  const auto s = solve_newton(net, {{2, 0.6, 0.2, 0.0, 0.0, 1.0}}, 1.0);
  ASSERT_TRUE(s.converged);
  EXPECT_NEAR(s.v_mag[1], tdtest::quartic_roots(1.0, 0.6, 0.2, 0.01, 0.06).high, 1e-9);
}

TEST(Newton, ReactiveLimitSwitchesBusToPq) {
  auto net = tdtest::two_bus(0.01, 0.06, tdtest::pq_load(0.3, 0.5));
  net.buses[1].kind = BusKind::pv;
  net.buses[1].v_set = 1.0;
  net.buses[1].q_max = 0.1;
  const auto s = solve_newton(net, {}, 1.0);
  ASSERT_TRUE(s.converged) << s.cause;
  // at the limit the bus is a net 0.3 + j0.4 load
  EXPECT_NEAR(s.v_mag[1], tdtest::quartic_roots(1.0, 0.3, 0.4, 0.01, 0.06).high, 1e-8);

  NewtonOptions loose;
  loose.enforce_q_limits = false;
  EXPECT_NEAR(solve_newton(net, {}, 1.0, std::nullopt, loose).v_mag[1], 1.0, 1e-12);
}

TEST(Mismatch, ZeroAtSolution) {
  const auto net = load_case(tdtest::case_path("ieee9.json")).transmission;
  const auto s = solve_newton(net, {}, 1.0);
  ASSERT_TRUE(s.converged);
  EXPECT_LE(power_mismatch(net, {}, s, 1.0).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(Mismatch, FlatStartEqualsScheduledMinusFlatInjection) {
  const auto net = tdtest::two_bus(0.01, 0.06, tdtest::pq_load(0.6, 0.2));
  const PowerFlowProblem pf(net, {});
  const auto flat = pf.initial_state(std::nullopt);
  const auto f = pf.mismatch(flat, 1.0);
  // a flat profile injects nothing into a shunt-free network
  ASSERT_EQ(f.size(), 2);
  EXPECT_NEAR(f(0), -0.6, 1e-15);
  EXPECT_NEAR(f(1), -0.2, 1e-15);
  EXPECT_NEAR(pf.mismatch(flat, 0.0).norm(), 0.0, 1e-15);
}

TEST(Jacobian, FiniteDifferenceTwoBus) {
  const auto net = tdtest::two_bus(0.01, 0.06, tdtest::zip_load(0.6, 0.2, 0.4, 0.3, 0.3));
  const PowerFlowProblem pf(net, {});
  auto s = pf.initial_state(std::nullopt);
  s.v_mag[1] = 0.98;
  s.v_ang[1] = -0.05;
  EXPECT_LT(tdtest::max_rel_error(pf.jacobian(s, 1.0), tdtest::fd_jacobian(pf, s, 1.0)), 1e-6);
}

TEST(Jacobian, FiniteDifferenceWithSlopedInjection) {
  const auto net = load_case(tdtest::case_path("ieee9.json")).transmission;
  const PowerFlowProblem pf(net, {{5, 0.5, 0.2, 0.7, 1.9, 0.97}, {9, 0.1, -0.1, -0.2, 0.3, 1.0}});
  std::mt19937 rng(3);
  for (int k = 0; k < 5; ++k) {
    const auto s = tdtest::random_state(pf, rng);
    EXPECT_LT(tdtest::max_rel_error(pf.jacobian(s, 1.4), tdtest::fd_jacobian(pf, s, 1.4)), 1e-6);
  }
}

TEST(Jacobian, LoadTermsOnDiagonal) {
  auto base = tdtest::two_bus(0.01, 0.06, tdtest::pq_load(0.0, 0.0));
  const PowerFlowProblem empty(base, {});
  const auto s = empty.initial_state(std::nullopt);
  const auto j0 = empty.jacobian(s, 1.0);

  auto cp = base;
  cp.buses[1].loads = {tdtest::pq_load(0.6, 0.2)};
  EXPECT_NEAR((PowerFlowProblem(cp, {}).jacobian(s, 1.0) - j0).norm(), 0.0, 1e-15);

  auto cz = base;
  cz.buses[1].loads = {tdtest::zip_load(0.6, 0.2, 1.0, 0.0, 0.0)};
  const auto dj = PowerFlowProblem(cz, {}).jacobian(s, 1.0) - j0;
  // mismatch carries -P_load, so the entry shifts by -dP/dV = -2 p0 pz
  EXPECT_NEAR(dj(0, 1), -2.0 * 0.6, 1e-14);
  EXPECT_NEAR(dj(1, 1), -2.0 * 0.2, 1e-14);
}

TEST(DeliveredLoad, SumsZipAtSolvedVoltage) {
  const auto net = tdtest::two_bus(0.01, 0.06, tdtest::zip_load(0.6, 0.2, 0.4, 0.3, 0.3));
  const auto s = solve_newton(net, {}, 2.0);
  ASSERT_TRUE(s.converged);
  const double v = s.v_mag[1];
  EXPECT_NEAR(delivered_load(net, s, 2.0), 2.0 * 0.6 * (0.4 * v * v + 0.3 * v + 0.3), 1e-14);
}
