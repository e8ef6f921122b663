#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "tmblock/autodiff/batch_norm.hpp"
#include "tmblock/rng.hpp"

namespace tmb::match {

/// Best-matching-kernel selection over the simplex
///   { (p, q) : p >= 0, q >= 0, q + sum(p) = 1 }
/// with objective q*mu + p.a. `eps` is the smoothing temperature used by the
/// perturbed and entropy-regularized variants.
struct MatchProblem {
  std::vector<double> a;
  double mu = 0.0;
  double eps = 1.0;

  /// Throws std::invalid_argument on empty a, non-positive eps, or non-finite values.
  void validate() const;
  std::size_t size() const { return a.size(); }
};

struct SimplexPoint {
  std::vector<double> p;
  double q = 0.0;

  bool feasible(double tol = 1e-9) const;
  /// Vertex index in the extended ordering: 0 = no-match (q), k+1 = kernel k.
  std::size_t argmax_extended() const;
};

struct PerturbedConfig {
  std::size_t samples = 64;
  std::uint64_t seed = 0;
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Integral solution of the linear program. Ties: no-match wins against any
/// kernel; among kernels the lowest index wins.
SimplexPoint solve_exact(const MatchProblem& prob);

/// Test oracle: evaluates the objective at all K+1 vertices and keeps the
/// first strict maximum in the order (q, p_0, ..., p_{K-1}).
SimplexPoint brute_force_vertices(const MatchProblem& prob);

/// Closed-form maximizer of the entropy-regularized problem: soft-max of
/// eps*(mu, a).
SimplexPoint solve_entropy(const MatchProblem& prob);

/// eps * (diag(p) - p p^T) evaluated at the closed-form solution.
Eigen::MatrixXd jacobian_entropy(const MatchProblem& prob);
/// Same formula at an injected p.
Eigen::MatrixXd jacobian_entropy_at(std::span<const double> p, double eps);

/// Monte-Carlo expectation of the perturbed argmax vertex.
SimplexPoint solve_perturbed(const MatchProblem& prob, const PerturbedConfig& cfg);

/// J(i, j) = d p_j / d a_i, estimated as E[eps * z_i * ptilde_j] on the same
/// sample stream as solve_perturbed.
Eigen::MatrixXd jacobian_perturbed(const MatchProblem& prob, const PerturbedConfig& cfg);

struct PerturbedEstimate {
  SimplexPoint mean;
  Eigen::MatrixXd jacobian;
  /// Standard error of each Jacobian entry.
  Eigen::MatrixXd jacobian_stderr;
};
PerturbedEstimate perturbed_estimate(const MatchProblem& prob, const PerturbedConfig& cfg);

struct NumericSolveOptions {
  std::size_t max_iterations = 100000;
  double objective_tolerance = 1e-10;
  double step_tolerance = 1e-13;
};

/// Iterative maximizer of the entropy-regularized objective (exponentiated
/// gradient ascent in log space). Throws ConvergenceError when the iteration
/// budget runs out.
SimplexPoint numeric_solve_entropy(const MatchProblem& prob, const NumericSolveOptions& options = {});

double linear_objective(const MatchProblem& prob, const SimplexPoint& x);
/// q*mu + p.a - (1/eps)(q log q + p.log p), with 0 log 0 = 0.
double entropy_objective(const MatchProblem& prob, const SimplexPoint& x);

struct ThresholdResult {
  /// Per-channel margin; NaN for flagged channels.
  std::vector<double> mu;
  /// Channels with |gamma| < 1e-12.
  std::vector<std::size_t> flagged;
  /// Mean of the finite, non-zero margins (NaN when there are none).
  double mean_nonzero() const;
};

/// Activation level at which BN followed by ReLU starts to fire:
/// mu_k = E[a_k] - beta_k * sqrt(Var(a_k)) / gamma_k.
ThresholdResult bn_relu_threshold(const ad::BatchNormState& state);

struct NormalizedMixing {
  std::vector<double> p_star;
  double eta = 0.0;
};

/// Splits BN-ReLU output into its mass eta = sum(p_hat) and the normalized
/// point p_hat / eta. eta == 0 yields p_star == 0.
NormalizedMixing bn_relu_normalize(std::span<const double> p_hat);

namespace detail {

/// Winning vertex of one perturbed sample in the extended ordering (0 = q).
/// Components of sample s are drawn at counters s*(K+1) + j, j = 0 for the
/// margin and j = k+1 for kernel k.
std::size_t perturbed_winner(const double* a, std::size_t k, std::size_t stride, double mu,
                             double eps, const CounterRng& rng, std::uint64_t sample);

}  // namespace detail

}  // namespace tmb::match
