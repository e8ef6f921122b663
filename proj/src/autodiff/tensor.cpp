#include "tmblock/autodiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "tmblock/rng.hpp"

namespace tmb::ad {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {

thread_local bool tl_grad_enabled = true;
thread_local KinkMonitor* tl_kink_monitor = nullptr;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->id = detail::next_node_id();
  return n;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  Tensor t(new_node(std::move(shape), std::move(values)));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

detail::Node& Tensor::node() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return *node_;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = node().shape;
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape()));
  return node().data[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node().leaf && !flag) throw std::logic_error("cannot clear requires_grad on a non-leaf");
  node().requires_grad = flag;
  return *this;
}

std::span<const double> Tensor::grad() const {
  node().ensure_grad();
  return node().grad;
}

std::span<double> Tensor::mutable_grad() {
  node().ensure_grad();
  return node().grad;
}

void Tensor::zero_grad() {
  auto& g = node().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(new_node(node().shape, node().data));
}

Tensor Tensor::clone() const {
  auto t = detach();
  t.node_->requires_grad = node().requires_grad && node().leaf;
  return t;
}

Tensor Tensor::make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                           std::function<void(detail::Node&)> backward) {
  auto n = new_node(std::move(shape), std::move(data));
  n->leaf = false;
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (auto& t : inputs) n->inputs.push_back(t.node_);
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

void Tensor::backward() const {
  auto& root = node();
  if (root.data.size() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) return;

  // Collect every node reachable through requires_grad edges. Ids increase
  // with creation time, so descending id order is a valid reverse topological
  // order of the tape.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{&root};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  for (auto* n : order) {
    if (!n->leaf) n->grad.assign(n->data.size(), 0.0);
    else n->ensure_grad();
  }
  if (root.leaf) {
    root.grad[0] += 1.0;
    return;
  }
  root.grad[0] = 1.0;
  for (auto* n : order) {
    if (!n->leaf && n->backward) n->backward(*n);
  }
  // Intermediate gradients are scratch space.
  for (auto* n : order) {
    if (!n->leaf) std::vector<double>().swap(n->grad);
  }
}

bool grad_enabled() { return tl_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tl_grad_enabled = previous_; }

KinkMonitor::KinkMonitor()
    : previous_(tl_kink_monitor), min_distance_(std::numeric_limits<double>::infinity()) {
  tl_kink_monitor = this;
}

KinkMonitor::~KinkMonitor() { tl_kink_monitor = previous_; }

void KinkMonitor::record(std::span<const double> kink_inputs) {
  auto* m = tl_kink_monitor;
  if (m == nullptr) return;
  std::uint64_t word = 0;
  int bit = 0;
  for (double v : kink_inputs) {
    word = (word << 1) | (v > 0.0 ? 1u : 0u);
    m->min_distance_ = std::min(m->min_distance_, std::abs(v));
    if (++bit == 64) {
      m->hash_ = combine_keys(m->hash_, word);
      word = 0;
      bit = 0;
    }
  }
  m->hash_ = combine_keys(m->hash_, word ^ (static_cast<std::uint64_t>(bit) << 58));
}

}  // namespace tmb::ad
