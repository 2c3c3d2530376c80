#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "common.hpp"

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run_shell(const std::string& command) {
  const std::string cmd = command + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (auto n = fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

Run run(const std::string& args) { return run_shell(std::string(TDMARGIN_CLI) + " " + args); }

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST(Cli, TwoBusDefaultMarginShrinks) {
  const auto r = run("twobus");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("CVR margin < No-CVR margin"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("0.0432410 + j0.1264820"), std::string::npos) << r.out;
}

TEST(Cli, TwoBusWithoutFeederMarginGrows) {
  const auto r = run("twobus --zd-r 0 --zd-x 0 --engine cpf");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("CVR margin > No-CVR margin"), std::string::npos) << r.out;
}

TEST(Cli, PvCurveRowsArePointsTimesBuses) {
  const std::string out = testing::TempDir() + "cli_curve.csv";
  auto r = run("pv-curve --case " + tdtest::case_path("ieee9.json") + " --engine cpf --out " + out);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto points = std::stoul(r.out.substr(0, r.out.find(' ')));
  EXPECT_EQ(count_lines(read_file(out)), 1 + points * 9);

  r = run("pv-curve --case " + tdtest::case_path("ieee9.json") + " --engine cpf --bus 5 --bus 7 --out " + out);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(count_lines(read_file(out)), 1 + points * 2);
  std::remove(out.c_str());
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
  const std::string a = testing::TempDir() + "cli_a.csv", b = testing::TempDir() + "cli_b.csv";
  const auto args = " --case " + tdtest::case_path("ieee9_4d.json") + " --out ";
  ASSERT_EQ(run("compare" + args + a).code, 0);
  ASSERT_EQ(run("compare" + args + b).code, 0);
  const auto text = read_file(a);
  EXPECT_EQ(text, read_file(b));
  EXPECT_EQ(count_lines(text), 7u);
  EXPECT_EQ(text.rfind("scenario,vsm_mw,lambda_max,pct_reduction\n", 0), 0u);
  std::remove(a.c_str());
  std::remove(b.c_str());
}

TEST(Cli, VsmAndSolve) {
  auto r = run("vsm --case " + tdtest::case_path("two_bus_extended.json"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.rfind("VSM ", 0), 0u) << r.out;
  r = run("solve --case " + tdtest::case_path("two_bus_extended.json") + " --tap 0.95");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("eq_feeder:load"), std::string::npos);
  r = run("cosim --case " + tdtest::case_path("ieee9_123d.json") + " --dg vvc --penetration 0.3");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("feeder ieee123_eq"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run("solve --case " + tdtest::case_path("two_bus_extended.json") + " --lambda 20").code, 2);
  EXPECT_EQ(run("cosim --case " + tdtest::case_path("two_bus_extended.json") + " --lambda 20").code, 2);
  EXPECT_EQ(run("solve --case /nonexistent.json").code, 3);
  EXPECT_EQ(run("solve --case " + tdtest::case_path("two_bus.json") + " --tap 0.5").code, 3);
  EXPECT_EQ(run("vsm --case " + tdtest::case_path("ieee9_4d.json") + " --dg upf --engine cpf").code, 3);
  EXPECT_EQ(run("frobnicate").code, 3);
  EXPECT_EQ(run("solve").code, 3);
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, ThreadCapFromEnvironment) {
  const auto args = "compare --case " + tdtest::case_path("two_bus_extended.json");
  EXPECT_EQ(run_shell("env TDMARGIN_THREADS=2 " + std::string(TDMARGIN_CLI) + " " + args).code, 0);
  EXPECT_EQ(run_shell("env TDMARGIN_THREADS=zero " + std::string(TDMARGIN_CLI) + " " + args).code, 3);
}
