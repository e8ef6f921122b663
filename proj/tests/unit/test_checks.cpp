#include <gtest/gtest.h>

#include <algorithm>
#include <string>
#include <vector>

#include "tmblock/checks/checks.hpp"

using namespace tmb;
using namespace tmb::checks;

TEST(Checks, SolverSuitePasses) {
  const auto results = run_solver_suite();
  ASSERT_FALSE(results.empty());
  for (const auto& r : results) EXPECT_TRUE(r.passed) << summary_line(r) << " " << r.detail;
  const auto oracle = std::find_if(results.begin(), results.end(),
                                   [](const CheckResult& r) { return r.name == "solver_oracle"; });
  ASSERT_NE(oracle, results.end());
  EXPECT_GE(oracle->instances, 1000u);
  EXPECT_GE(oracle->tie_cases, 50u);
}

TEST(Checks, WrongTieBreakIsCaught) {
  Solvers s;
  // Prefers the last kernel on ties and never abstains on a tie with mu.
  s.exact = [](const match::MatchProblem& p) {
    match::SimplexPoint out;
    out.p.assign(p.a.size(), 0.0);
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.a.size(); ++i)
      if (p.a[i] >= p.a[best]) best = i;
    if (p.a[best] >= p.mu) out.p[best] = 1.0;
    out.q = out.p[best] > 0.0 ? 0.0 : 1.0;
    return out;
  };
  SuiteOptions o;
  o.oracle_instances = 200;
  const auto r = check_solver_oracle(s, o);
  EXPECT_FALSE(r.passed);
  EXPECT_NE(summary_line(r).find("status=FAIL"), std::string::npos);
}

TEST(Checks, SummaryLineFormat) {
  CheckResult r;
  r.name = "demo";
  r.instances = 3;
  r.max_error = 0.5;
  const auto line = summary_line(r);
  EXPECT_EQ(line.rfind("check=demo status=pass instances=3 ties=0 max_error=", 0), 0u) << line;
}

TEST(Checks, GradientSuitePasses) {
  SuiteOptions o;
  o.grad_instances = 5;
  const auto results = run_grad_suite(o);
  std::vector<std::string> names;
  for (const auto& r : results) names.push_back(r.name);
  for (const char* want : {"grad_conv2d_same", "grad_batch_norm", "grad_margin_softmax", "grad_residual_block"})
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed) << summary_line(r) << " " << r.detail;
    EXPECT_EQ(r.instances, 5u) << r.name;
  }
}
