#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tmblock/matchers/solvers.hpp"

namespace tmb::checks {

struct CheckResult {
  std::string name;
  bool passed = true;
  std::size_t instances = 0;
  /// Deliberate tie constructions among `instances` (solver oracle only).
  std::size_t tie_cases = 0;
  double max_error = 0.0;
  double seconds = 0.0;
  std::string detail;
};

/// Machine-readable one-liner:
/// "check=<name> status=pass|FAIL instances=<n> ties=<t> max_error=<e> seconds=<s>".
std::string summary_line(const CheckResult& r);

/// The solvers under test. Tests swap in doubles to make sure the suite can
/// fail.
struct Solvers {
  std::function<match::SimplexPoint(const match::MatchProblem&)> exact = match::solve_exact;
  std::function<match::SimplexPoint(const match::MatchProblem&)> entropy = match::solve_entropy;
};

struct SuiteOptions {
  std::uint64_t seed = 20240601;
  std::size_t oracle_instances = 1000;
  std::size_t oracle_ties = 50;
  std::size_t entropy_instances = 100;
  std::size_t temperature_instances = 500;
  std::size_t order_instances = 1000;
  std::size_t perturbed_samples = 1000000;
  /// Random micro-instances per differentiable op.
  std::size_t grad_instances = 20;
};

// Individual checks. Each one returns instead of throwing.
CheckResult check_solver_oracle(const Solvers& s, const SuiteOptions& o);
CheckResult check_entropy_closed_form(const Solvers& s, const SuiteOptions& o);
CheckResult check_jacobian_entropy(const SuiteOptions& o);
CheckResult check_jacobian_perturbed(const SuiteOptions& o);
CheckResult check_temperature_limit(const Solvers& s, const SuiteOptions& o);
CheckResult check_order_preservation(const Solvers& s, const SuiteOptions& o);
/// One result per op family plus the residual and template blocks.
std::vector<CheckResult> check_gradients(const SuiteOptions& o);

std::vector<CheckResult> run_solver_suite(const Solvers& s = {}, const SuiteOptions& o = {});
std::vector<CheckResult> run_grad_suite(const SuiteOptions& o = {});

}  // namespace tmb::checks
