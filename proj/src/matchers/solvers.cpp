#include "tmblock/matchers/solvers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace tmb::match {

void MatchProblem::validate() const {
  if (a.empty()) throw std::invalid_argument("MatchProblem: need at least one activation");
  if (!(eps > 0.0) || !std::isfinite(eps)) {
    throw std::invalid_argument("MatchProblem: eps must be positive and finite");
  }
  if (!std::isfinite(mu)) throw std::invalid_argument("MatchProblem: mu must be finite");
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!std::isfinite(a[k])) {
      throw std::invalid_argument("MatchProblem: activation " + std::to_string(k) + " is not finite");
    }
  }
}

bool SimplexPoint::feasible(double tol) const {
  if (q < 0.0) return false;
  double total = q;
  for (double v : p) {
    if (v < 0.0) return false;
    total += v;
  }
  return std::abs(total - 1.0) <= tol;
}

std::size_t SimplexPoint::argmax_extended() const {
  std::size_t best = 0;
  double best_value = q;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > best_value) {
      best_value = p[k];
      best = k + 1;
    }
  }
  return best;
}

namespace {

SimplexPoint vertex(std::size_t k, std::size_t extended_index) {
  SimplexPoint x;
  x.p.assign(k, 0.0);
  if (extended_index == 0) x.q = 1.0;
  else x.p[extended_index - 1] = 1.0;
  return x;
}

}  // namespace

SimplexPoint solve_exact(const MatchProblem& prob) {
  prob.validate();
  std::size_t best = 0;
  double best_value = prob.mu;
  for (std::size_t k = 0; k < prob.a.size(); ++k) {
    if (prob.a[k] > best_value) {
      best_value = prob.a[k];
      best = k + 1;
    }
  }
  return vertex(prob.a.size(), best);
}

double linear_objective(const MatchProblem& prob, const SimplexPoint& x) {
  double value = x.q * prob.mu;
  for (std::size_t k = 0; k < prob.a.size(); ++k) value += x.p[k] * prob.a[k];
  return value;
}

SimplexPoint brute_force_vertices(const MatchProblem& prob) {
  prob.validate();
  const std::size_t k = prob.a.size();
  SimplexPoint best = vertex(k, 0);
  double best_value = linear_objective(prob, best);
  for (std::size_t v = 1; v <= k; ++v) {
    SimplexPoint candidate = vertex(k, v);
    const double value = linear_objective(prob, candidate);
    if (value > best_value) {
      best_value = value;
      best = std::move(candidate);
    }
  }
  return best;
}

SimplexPoint solve_entropy(const MatchProblem& prob) {
  prob.validate();
  const double eps = prob.eps;
  double shift = eps * prob.mu;
  for (double v : prob.a) shift = std::max(shift, eps * v);
  const double eq = std::exp(eps * prob.mu - shift);
  double denom = eq;
  SimplexPoint x;
  x.p.resize(prob.a.size());
  for (std::size_t k = 0; k < prob.a.size(); ++k) {
    x.p[k] = std::exp(eps * prob.a[k] - shift);
    denom += x.p[k];
  }
  for (auto& v : x.p) v /= denom;
  x.q = eq / denom;
  return x;
}

Eigen::MatrixXd jacobian_entropy_at(std::span<const double> p, double eps) {
  const auto k = static_cast<Eigen::Index>(p.size());
  Eigen::MatrixXd j(k, k);
  for (Eigen::Index r = 0; r < k; ++r)
    for (Eigen::Index c = 0; c < k; ++c)
      j(r, c) = eps * ((r == c ? p[static_cast<std::size_t>(r)] : 0.0) -
                       p[static_cast<std::size_t>(r)] * p[static_cast<std::size_t>(c)]);
  return j;
}

Eigen::MatrixXd jacobian_entropy(const MatchProblem& prob) {
  const auto x = solve_entropy(prob);
  return jacobian_entropy_at(x.p, prob.eps);
}

namespace detail {

std::size_t perturbed_winner(const double* a, std::size_t k, std::size_t stride, double mu,
                             double eps, const CounterRng& rng, std::uint64_t sample) {
  const std::uint64_t base = sample * (k + 1);
  std::size_t best = 0;
  double best_value = mu + rng.normal(base) / eps;
  for (std::size_t i = 0; i < k; ++i) {
    const double v = a[i * stride] + rng.normal(base + 1 + i) / eps;
    if (v > best_value) {
      best_value = v;
      best = i + 1;
    }
  }
  return best;
}

}  // namespace detail

PerturbedEstimate perturbed_estimate(const MatchProblem& prob, const PerturbedConfig& cfg) {
  prob.validate();
  if (cfg.samples == 0) throw std::invalid_argument("PerturbedConfig: samples must be >= 1");
  const std::size_t k = prob.a.size();
  const CounterRng rng(cfg.seed);
  std::vector<double> counts(k + 1, 0.0);
  // Running sums of eps*z_i*ptilde_j and its square, for the standard error.
  Eigen::MatrixXd s1 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  Eigen::MatrixXd s2 = s1;
  std::vector<double> z(k);
  for (std::uint64_t s = 0; s < cfg.samples; ++s) {
    const std::size_t w = detail::perturbed_winner(prob.a.data(), k, 1, prob.mu, prob.eps, rng, s);
    counts[w] += 1.0;
    if (w == 0) continue;
    const std::uint64_t base = s * (k + 1);
    const auto col = static_cast<Eigen::Index>(w - 1);
    for (std::size_t i = 0; i < k; ++i) {
      const double v = prob.eps * rng.normal(base + 1 + i);
      s1(static_cast<Eigen::Index>(i), col) += v;
      s2(static_cast<Eigen::Index>(i), col) += v * v;
    }
  }
  const double n = static_cast<double>(cfg.samples);
  PerturbedEstimate est;
  est.mean.q = counts[0] / n;
  est.mean.p.resize(k);
  for (std::size_t i = 0; i < k; ++i) est.mean.p[i] = counts[i + 1] / n;
  est.jacobian = s1 / n;
  est.jacobian_stderr = est.jacobian;
  for (Eigen::Index r = 0; r < est.jacobian.rows(); ++r)
    for (Eigen::Index c = 0; c < est.jacobian.cols(); ++c) {
      const double m = s1(r, c) / n;
      const double var = std::max(s2(r, c) / n - m * m, 0.0);
      est.jacobian_stderr(r, c) = cfg.samples > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    }
  return est;
}

SimplexPoint solve_perturbed(const MatchProblem& prob, const PerturbedConfig& cfg) {
  prob.validate();
  if (cfg.samples == 0) throw std::invalid_argument("PerturbedConfig: samples must be >= 1");
  const std::size_t k = prob.a.size();
  const CounterRng rng(cfg.seed);
  std::vector<std::uint64_t> counts(k + 1, 0);
  for (std::uint64_t s = 0; s < cfg.samples; ++s) {
    ++counts[detail::perturbed_winner(prob.a.data(), k, 1, prob.mu, prob.eps, rng, s)];
  }
  const double n = static_cast<double>(cfg.samples);
  SimplexPoint x;
  x.q = static_cast<double>(counts[0]) / n;
  x.p.resize(k);
  for (std::size_t i = 0; i < k; ++i) x.p[i] = static_cast<double>(counts[i + 1]) / n;
  return x;
}

Eigen::MatrixXd jacobian_perturbed(const MatchProblem& prob, const PerturbedConfig& cfg) {
  return perturbed_estimate(prob, cfg).jacobian;
}

double entropy_objective(const MatchProblem& prob, const SimplexPoint& x) {
  auto xlogx = [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; };
  double neg_entropy = xlogx(x.q);
  for (double v : x.p) neg_entropy += xlogx(v);
  return linear_objective(prob, x) - neg_entropy / prob.eps;
}

SimplexPoint numeric_solve_entropy(const MatchProblem& prob, const NumericSolveOptions& options) {
  prob.validate();
  const std::size_t k = prob.a.size();
  const std::size_t m = k + 1;
  // Extended vector: index 0 is q.
  std::vector<double> value(m);
  value[0] = prob.mu;
  for (std::size_t i = 0; i < k; ++i) value[i + 1] = prob.a[i];

  // Exponentiated-gradient ascent: log x <- log x + t * grad, renormalized,
  // with grad_i = value_i - (log x_i + 1)/eps. Step t = eps/2 contracts the
  // log-space error by one half per iteration.
  const double step = 0.5 * prob.eps;
  std::vector<double> log_x(m, -std::log(static_cast<double>(m)));
  std::vector<double> x(m, 1.0 / static_cast<double>(m));
  auto as_point = [k](const std::vector<double>& ext) {
    SimplexPoint pt;
    pt.q = ext[0];
    pt.p.assign(ext.begin() + 1, ext.begin() + static_cast<std::ptrdiff_t>(k + 1));
    return pt;
  };
  double objective = entropy_objective(prob, as_point(x));
  std::vector<double> next(m);
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      const double grad = value[i] - (log_x[i] + 1.0) / prob.eps;
      next[i] = log_x[i] + step * grad;
    }
    const double shift = *std::max_element(next.begin(), next.end());
    double z = 0.0;
    for (double v : next) z += std::exp(v - shift);
    const double log_z = shift + std::log(z);
    double max_step = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      log_x[i] = next[i] - log_z;
      const double xi = std::exp(log_x[i]);
      max_step = std::max(max_step, std::abs(xi - x[i]));
      x[i] = xi;
    }
    const double updated = entropy_objective(prob, as_point(x));
    const double change = std::abs(updated - objective);
    objective = updated;
    if (change < options.objective_tolerance && max_step < options.step_tolerance) {
      return as_point(x);
    }
  }
  throw ConvergenceError("numeric_solve_entropy: no convergence after " +
                         std::to_string(options.max_iterations) + " iterations");
}

double ThresholdResult::mean_nonzero() const {
  double total = 0.0;
  std::size_t count = 0;
  for (double v : mu) {
    if (std::isfinite(v) && v != 0.0) {
      total += v;
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

ThresholdResult bn_relu_threshold(const ad::BatchNormState& state) {
  if (!state.stats_initialized) {
    throw ad::UninitializedStatsError("bn_relu_threshold: running statistics are not initialized");
  }
  const std::size_t c = state.channels();
  const auto gamma = state.gamma.data();
  const auto beta = state.beta.data();
  ThresholdResult r;
  r.mu.resize(c);
  for (std::size_t k = 0; k < c; ++k) {
    if (std::abs(gamma[k]) < 1e-12) {
      r.flagged.push_back(k);
      r.mu[k] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    r.mu[k] = state.running_mean[k] - beta[k] * std::sqrt(state.running_var[k]) / gamma[k];
  }
  return r;
}

NormalizedMixing bn_relu_normalize(std::span<const double> p_hat) {
  NormalizedMixing out;
  for (std::size_t k = 0; k < p_hat.size(); ++k) {
    if (p_hat[k] < 0.0 || std::isnan(p_hat[k])) {
      throw std::invalid_argument("bn_relu_normalize: entry " + std::to_string(k) +
                                  " is negative");
    }
    out.eta += p_hat[k];
  }
  out.p_star.assign(p_hat.size(), 0.0);
  if (out.eta > 0.0) {
    for (std::size_t k = 0; k < p_hat.size(); ++k) out.p_star[k] = p_hat[k] / out.eta;
  }
  return out;
}

}  // namespace tmb::match
