#include "tmblock/checks/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tmblock/autodiff/batch_norm.hpp"
#include "tmblock/autodiff/gradcheck.hpp"
#include "tmblock/autodiff/ops.hpp"
#include "tmblock/blocks/blocks.hpp"
#include "tmblock/matchers/layers.hpp"

namespace tmb::checks {

using match::MatchProblem;
using match::SimplexPoint;

namespace {

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void fail(CheckResult& r, const std::string& what) {
  if (r.passed) r.detail = what;
  r.passed = false;
}

std::string describe(const MatchProblem& p) {
  std::ostringstream s;
  s.precision(17);
  s << "a=[";
  for (std::size_t i = 0; i < p.a.size(); ++i) s << (i ? "," : "") << p.a[i];
  s << "] mu=" << p.mu << " eps=" << p.eps;
  return s.str();
}

MatchProblem random_problem(Rng& rng, std::size_t k, double spread) {
  MatchProblem p;
  p.a.resize(k);
  for (auto& v : p.a) v = rng.uniform(-spread, spread);
  p.mu = rng.uniform(-spread, spread);
  p.eps = rng.uniform(0.2, 3.0);
  return p;
}

std::vector<std::size_t> ranking(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  return idx;
}

ad::Tensor random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                         bool requires_grad = true) {
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return ad::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

ad::Tensor readout(const ad::Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(t, random_tensor(t.shape(), rng, -1.0, 1.0, false)));
}

void randomize(ad::BatchNormState& bn, Rng& rng) {
  for (auto& g : bn.gamma.mutable_data()) g = rng.uniform(0.5, 1.5);
  for (auto& b : bn.beta.mutable_data()) b = rng.uniform(-0.5, 0.5);
}

}  // namespace

std::string summary_line(const CheckResult& r) {
  std::ostringstream s;
  s << "check=" << r.name << " status=" << (r.passed ? "pass" : "FAIL")
    << " instances=" << r.instances << " ties=" << r.tie_cases << " max_error=" << r.max_error
    << " seconds=" << r.seconds;
  return s.str();
}

CheckResult check_solver_oracle(const Solvers& s, const SuiteOptions& o) {
  Timer timer;
  CheckResult r;
  r.name = "solver_oracle";
  Rng rng(combine_keys(o.seed, 1));
  const std::size_t ties = std::min(o.oracle_ties, o.oracle_instances);
  for (std::size_t t = 0; t < o.oracle_instances; ++t) {
    auto prob = random_problem(rng, 1 + rng.below(8), 3.0);
    if (t < ties) {
      // Alternate margin ties with duplicated best kernels.
      const auto best = std::max_element(prob.a.begin(), prob.a.end()) - prob.a.begin();
      if (t % 2 == 0 || prob.size() == 1) {
        prob.mu = prob.a[static_cast<std::size_t>(best)];
      } else {
        std::size_t other = rng.below(prob.size() - 1);
        if (other >= static_cast<std::size_t>(best)) ++other;
        prob.a[other] = prob.a[static_cast<std::size_t>(best)];
        prob.mu = prob.a[other] - rng.uniform(0.1, 2.0);
      }
      ++r.tie_cases;
    }
    const auto x = s.exact(prob);
    const auto y = match::brute_force_vertices(prob);
    ++r.instances;
    if (x.p != y.p || x.q != y.q) {
      fail(r, "solve_exact differs from vertex enumeration at " + describe(prob) +
                  " (solver vertex " + std::to_string(x.argmax_extended()) + ", oracle vertex " +
                  std::to_string(y.argmax_extended()) + ")");
    }
  }
  r.seconds = timer.seconds();
  return r;
}

CheckResult check_entropy_closed_form(const Solvers& s, const SuiteOptions& o) {
  Timer timer;
  CheckResult r;
  r.name = "entropy_closed_form";
  Rng rng(combine_keys(o.seed, 2));
  for (std::size_t t = 0; t < o.entropy_instances; ++t) {
    const auto prob = random_problem(rng, 1 + rng.below(8), 2.0);
    const auto closed = s.entropy(prob);
    SimplexPoint numeric;
    try {
      numeric = match::numeric_solve_entropy(prob);
    } catch (const match::ConvergenceError& e) {
      fail(r, std::string(e.what()) + " at " + describe(prob));
      continue;
    }
    ++r.instances;
    if (!closed.feasible()) fail(r, "closed form infeasible at " + describe(prob));
    double err = std::abs(closed.q - numeric.q);
    for (std::size_t i = 0; i < prob.size(); ++i) err = std::max(err, std::abs(closed.p[i] - numeric.p[i]));
    r.max_error = std::max(r.max_error, err);
    if (err > 1e-6) fail(r, "closed form and numeric maximizer differ by " + std::to_string(err) + " at " + describe(prob));
  }
  r.seconds = timer.seconds();
  return r;
}

CheckResult check_jacobian_entropy(const SuiteOptions& o) {
  Timer timer;
  CheckResult r;
  r.name = "jacobian_entropy";
  Rng rng(combine_keys(o.seed, 3));
  const double h = 1e-6;
  for (std::size_t t = 0; t < o.entropy_instances; ++t) {
    const auto prob = random_problem(rng, 1 + rng.below(8), 2.0);
    const auto j = match::jacobian_entropy(prob);
    for (std::size_t i = 0; i < prob.size(); ++i) {
      auto plus = prob, minus = prob;
      plus.a[i] += h;
      minus.a[i] -= h;
      const auto pp = match::solve_entropy(plus).p;
      const auto pm = match::solve_entropy(minus).p;
      for (std::size_t c = 0; c < prob.size(); ++c) {
        const double fd = (pp[c] - pm[c]) / (2 * h);
        const double err = std::abs(j(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) - fd);
        r.max_error = std::max(r.max_error, err);
        if (err > 1e-6) fail(r, "entry (" + std::to_string(i) + "," + std::to_string(c) + ") off by " + std::to_string(err) + " at " + describe(prob));
      }
    }
    ++r.instances;
  }
  r.seconds = timer.seconds();
  return r;
}

CheckResult check_jacobian_perturbed(const SuiteOptions& o) {
  Timer timer;
  CheckResult r;
  r.name = "jacobian_perturbed";
  const MatchProblem prob{{0.0, 0.0}, 0.0, 1.0};
  const match::PerturbedConfig cfg{o.perturbed_samples, combine_keys(o.seed, 4)};
  const auto j = match::jacobian_perturbed(prob, cfg);
  const double h = 1e-2;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    auto plus = prob, minus = prob;
    plus.a[i] += h;
    minus.a[i] -= h;
    const auto pp = match::solve_perturbed(plus, cfg).p;
    const auto pm = match::solve_perturbed(minus, cfg).p;
    for (std::size_t c = 0; c < prob.size(); ++c) {
      const double fd = (pp[c] - pm[c]) / (2 * h);
      const double err = std::abs(j(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) - fd);
      r.max_error = std::max(r.max_error, err);
      if (err > 5e-2) fail(r, "entry (" + std::to_string(i) + "," + std::to_string(c) + ") off by " + std::to_string(err));
    }
  }
  r.instances = 1;
  r.seconds = timer.seconds();
  return r;
}

CheckResult check_temperature_limit(const Solvers& s, const SuiteOptions& o) {
  Timer timer;
  CheckResult r;
  r.name = "temperature_limit";
  Rng rng(combine_keys(o.seed, 5));
  while (r.instances < o.temperature_instances) {
    // K+1 distinct levels at least 0.2 apart, dealt out in random order.
    const std::size_t k = 1 + rng.below(8);
    std::vector<double> levels(k + 1);
    double v = rng.uniform(-3.0, 0.0);
    for (auto& l : levels) {
      l = v;
      v += rng.uniform(0.2, 1.0);
    }
    rng.shuffle(levels);
    MatchProblem prob{{levels.begin() + 1, levels.end()}, levels[0], 50.0};
    const auto soft = s.entropy(prob);
    const auto hard = s.exact(prob);
    double top = soft.q;
    for (double x : soft.p) top = std::max(top, x);
    ++r.instances;
    r.max_error = std::max(r.max_error, 1.0 - top);
    if (soft.argmax_extended() != hard.argmax_extended()) fail(r, "argmax differs from exact vertex at " + describe(prob));
    if (top < 0.99) fail(r, "max entry " + std::to_string(top) + " below 0.99 at " + describe(prob));
  }
  r.seconds = timer.seconds();
  return r;
}

CheckResult check_order_preservation(const Solvers& s, const SuiteOptions& o) {
  Timer timer;
  CheckResult r;
  r.name = "order_preservation";
  Rng rng(combine_keys(o.seed, 6));
  for (std::size_t t = 0; t < o.order_instances; ++t) {
    const std::size_t k = 2 + rng.below(7);
    std::vector<double> a(k);
    for (auto& x : a) x = rng.uniform(-3.0, 3.0);
    // One BN layer whose channels all carry the same scalar parameters.
    auto bn = ad::BatchNormState::create(k);
    const double gamma = rng.uniform(0.1, 3.0), beta = rng.uniform(-1.0, 1.0);
    const double mean = rng.uniform(-1.0, 1.0), var = rng.uniform(0.2, 4.0);
    std::fill(bn.gamma.mutable_data().begin(), bn.gamma.mutable_data().end(), gamma);
    std::fill(bn.beta.mutable_data().begin(), bn.beta.mutable_data().end(), beta);
    bn.running_mean.assign(k, mean);
    bn.running_var.assign(k, var);
    bn.stats_initialized = true;
    bn.mode = ad::NormMode::eval;
    const auto y = ad::relu(ad::batch_norm(ad::Tensor::from({1, k}, a), bn));

    const auto p = s.entropy({a, rng.uniform(-2.0, 2.0), rng.uniform(0.1, 4.0)}).p;
    std::vector<double> fired, soft;
    for (std::size_t i = 0; i < k; ++i) {
      if (y.at(i) > 0.0) {
        fired.push_back(y.at(i));
        soft.push_back(p[i]);
      }
    }
    ++r.instances;
    if (ranking(fired) != ranking(soft)) {
      fail(r, "ranking of fired BN-ReLU outputs differs from the soft-max ranking at instance " + std::to_string(t));
    }
  }
  r.seconds = timer.seconds();
  return r;
}

std::vector<CheckResult> check_gradients(const SuiteOptions& o) {
  using namespace ad;
  struct Case {
    std::string name;
    std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(Rng&, std::uint64_t)> make;
  };
  // Each maker draws fresh inputs; captured state lives in shared_ptrs so the
  // closure stays valid while gradcheck runs.
  const std::vector<Case> cases = {
      {"conv2d_same", [](Rng& rng, std::uint64_t rs) {
         auto x = random_tensor({1, 3, 5, 5}, rng), k = random_tensor({2, 3, 3, 3}, rng), b = random_tensor({2}, rng);
         return std::pair{std::function<Tensor()>([=] { return readout(conv2d(x, k, b), rs); }), std::vector{x, k, b}};
       }},
      {"conv2d_strided_valid", [](Rng& rng, std::uint64_t rs) {
         auto x = random_tensor({2, 2, 6, 5}, rng), k = random_tensor({3, 2, 3, 3}, rng);
         return std::pair{std::function<Tensor()>([=] { return readout(conv2d(x, k, Tensor{}, {2, Padding::valid}), rs); }), std::vector{x, k}};
       }},
      {"conv2d_1x1", [](Rng& rng, std::uint64_t rs) {
         auto x = random_tensor({2, 4, 3, 3}, rng), k = random_tensor({2, 4, 1, 1}, rng), b = random_tensor({2}, rng);
         return std::pair{std::function<Tensor()>([=] { return readout(conv2d(x, k, b), rs); }), std::vector{x, k, b}};
       }},
      {"avg_pool_count_valid", [](Rng& rng, std::uint64_t rs) {
         auto x = random_tensor({1, 2, 5, 4}, rng);
         return std::pair{std::function<Tensor()>([=] { return readout(avg_pool(x, {3, 2, 1, Padding::same, PoolBorder::count_valid}), rs); }), std::vector{x}};
       }},
      {"avg_pool_zero_pad", [](Rng& rng, std::uint64_t rs) {
         auto x = random_tensor({1, 2, 4, 4}, rng);
         return std::pair{std::function<Tensor()>([=] { return readout(avg_pool(x, {2, 2, 2, Padding::same, PoolBorder::zero_pad}), rs); }), std::vector{x}};
       }},
      {"global_avg_pool", [](Rng& rng, std::uint64_t rs) {
         auto x = random_tensor({2, 3, 3, 2}, rng);
         return std::pair{std::function<Tensor()>([=] { return readout(global_avg_pool(x), rs); }), std::vector{x}};
       }},
      {"batch_norm", [](Rng& rng, std::uint64_t rs) {
         auto x = random_tensor({2, 3, 3, 3}, rng, -2, 2);
         auto bn = std::make_shared<BatchNormState>(BatchNormState::create(3));
         randomize(*bn, rng);
         return std::pair{std::function<Tensor()>([=] { return readout(batch_norm(x, *bn), rs); }), std::vector{x, bn->gamma, bn->beta}};
       }},
      {"add_mul_scalar", [](Rng& rng, std::uint64_t rs) {
         auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
         return std::pair{std::function<Tensor()>([=] { return readout(add(mul(a, b), scalar_mul(a, -1.7)), rs); }), std::vector{a, b}};
       }},
      {"sum_mean", [](Rng& rng, std::uint64_t) {
         auto a = random_tensor({2, 5}, rng);
         return std::pair{std::function<Tensor()>([=] { return add(sum(mul(a, a)), scalar_mul(mean(a), 3.0)); }), std::vector{a}};
       }},
      {"relu", [](Rng& rng, std::uint64_t rs) {
         auto a = random_tensor({4, 5}, rng, -2, 2);
         return std::pair{std::function<Tensor()>([=] { return readout(relu(a), rs); }), std::vector{a}};
       }},
      {"reshape_concat", [](Rng& rng, std::uint64_t rs) {
         auto a = random_tensor({1, 2, 3, 3}, rng), b = random_tensor({18}, rng);
         return std::pair{std::function<Tensor()>([=] {
           const std::vector<Tensor> parts{a, reshape(b, {1, 2, 3, 3})};
           return readout(concat_channels(parts), rs);
         }), std::vector{a, b}};
       }},
      {"matmul_linear", [](Rng& rng, std::uint64_t rs) {
         auto x = random_tensor({3, 4}, rng), w = random_tensor({2, 4}, rng), b = random_tensor({2}, rng), m = random_tensor({2, 3}, rng);
         return std::pair{std::function<Tensor()>([=] { return readout(matmul(linear(x, w, b), m), rs); }), std::vector{x, w, b, m}};
       }},
      {"softmax", [](Rng& rng, std::uint64_t rs) {
         auto a = random_tensor({2, 4, 2, 2}, rng, -3, 3);
         return std::pair{std::function<Tensor()>([=] { return readout(softmax(a, 1), rs); }), std::vector{a}};
       }},
      {"cross_entropy", [](Rng& rng, std::uint64_t) {
         auto a = random_tensor({3, 5}, rng, -3, 3);
         std::vector<int> labels{int(rng.below(5)), int(rng.below(5)), int(rng.below(5))};
         return std::pair{std::function<Tensor()>([=] { return cross_entropy(a, labels); }), std::vector{a}};
       }},
      {"cross_entropy_map", [](Rng& rng, std::uint64_t) {
         auto a = random_tensor({2, 4, 3, 3}, rng, -3, 3);
         std::vector<int> labels{int(rng.below(4)), int(rng.below(4))};
         return std::pair{std::function<Tensor()>([=] { return cross_entropy_map(a, labels); }), std::vector{a}};
       }},
      {"margin_softmax", [](Rng& rng, std::uint64_t rs) {
         auto a = random_tensor({2, 3, 2, 2}, rng, -1, 4);
         const double mu = rng.uniform(0.0, 3.0), eta = rng.uniform(1.0, 17.0), eps = rng.uniform(0.3, 2.0);
         return std::pair{std::function<Tensor()>([=] { return readout(match::margin_softmax_layer(a, mu, eta, eps), rs); }), std::vector{a}};
       }},
      {"residual_block", [](Rng& rng, std::uint64_t rs) {
         auto p = std::make_shared<blocks::ResidualBlockParams>(blocks::ResidualBlockParams::create(3, 4, 2, rng));
         randomize(p->bn, rng);
         auto x = random_tensor({2, 3, 6, 6}, rng);
         std::vector<Tensor> params{x, p->conv1, p->bn.gamma, p->bn.beta, p->conv2, p->conv2_bias, p->proj, p->proj_bias};
         return std::pair{std::function<Tensor()>([=] { return readout(blocks::residual_block_baseline(x, *p), rs); }), params};
       }},
      {"template_block_add", [](Rng& rng, std::uint64_t rs) {
         blocks::TemplateBlockConfig cfg;
         cfg.num_classes = 4;
         cfg.d_in = 8;
         cfg.d_value = 8;
         cfg.pre_pool_bn = true;
         cfg.score_bn = true;
         auto p = std::make_shared<blocks::TemplateBlockParams>(blocks::TemplateBlockParams::create(cfg, rng));
         for (auto& v : p->values.mutable_data()) v = rng.uniform(-1.0, 1.0);
         randomize(p->pre_bn, rng);
         randomize(p->score_norm, rng);
         randomize(p->mix_bn, rng);
         auto x = random_tensor({1, 8, 6, 6}, rng);
         std::vector<Tensor> params{x, p->alpha, p->alpha_bias, p->values, p->proj, p->proj_bias,
                                    p->pre_bn.gamma, p->pre_bn.beta, p->score_norm.gamma,
                                    p->score_norm.beta, p->mix_bn.gamma, p->mix_bn.beta};
         return std::pair{std::function<Tensor()>([=] {
           const auto out = blocks::template_block_forward(x, cfg, *p);
           return add(readout(out.f_out, rs), readout(out.patch_scores, rs + 1));
         }), params};
       }},
      {"template_block_concat_softmax", [](Rng& rng, std::uint64_t rs) {
         blocks::TemplateBlockConfig cfg;
         cfg.num_classes = 3;
         cfg.d_in = 8;
         cfg.d_value = 5;
         cfg.shortcut = blocks::ShortcutMode::concat;
         cfg.shortcut_avgpool2 = true;
         cfg.mixing = blocks::Mixing::margin_softmax;
         cfg.mixing_params.mu = 0.5;
         auto p = std::make_shared<blocks::TemplateBlockParams>(blocks::TemplateBlockParams::create(cfg, rng));
         for (auto& v : p->values.mutable_data()) v = rng.uniform(-1.0, 1.0);
         auto x = random_tensor({1, 8, 6, 6}, rng);
         std::vector<Tensor> params{x, p->alpha, p->alpha_bias, p->values, p->proj, p->proj_bias};
         return std::pair{std::function<Tensor()>([=] {
           const auto out = blocks::template_block_forward(x, cfg, *p);
           return add(readout(out.f_out, rs), readout(out.patch_scores, rs + 1));
         }), params};
       }},
  };

  std::vector<CheckResult> results;
  GradcheckOptions opts;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    Timer timer;
    CheckResult r;
    r.name = "grad_" + cases[c].name;
    Rng rng(combine_keys(o.seed, 100 + c));
    for (std::size_t t = 0; t < o.grad_instances; ++t) {
      auto [loss, params] = cases[c].make(rng, combine_keys(o.seed, 1000 * c + t));
      const auto report = gradcheck(loss, params, opts);
      ++r.instances;
      r.max_error = std::max(r.max_error, report.max_abs_error);
      if (!report.passed) fail(r, "instance " + std::to_string(t) + ": " + report.first_failure);
    }
    r.seconds = timer.seconds();
    results.push_back(std::move(r));
  }
  return results;
}

std::vector<CheckResult> run_solver_suite(const Solvers& s, const SuiteOptions& o) {
  return {check_solver_oracle(s, o),     check_entropy_closed_form(s, o),
          check_jacobian_entropy(o),     check_jacobian_perturbed(o),
          check_temperature_limit(s, o), check_order_preservation(s, o)};
}

std::vector<CheckResult> run_grad_suite(const SuiteOptions& o) { return check_gradients(o); }

}  // namespace tmb::checks
