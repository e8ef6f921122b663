#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tmb::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads self.grad and accumulates into self.inputs[i]->grad.
  std::function<void(Node& self)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

std::uint64_t next_node_id();

}  // namespace detail

/// Dense row-major tensor of doubles. Copies share the underlying node, so a
/// Tensor behaves like a handle onto one vertex of the differentiation tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().data.size(); }

  std::span<const double> data() const { return node().data; }
  /// Mutable access; intended for leaves (parameters, inputs). Mutating a
  /// non-leaf invalidates gradients of anything computed from it.
  std::span<double> mutable_data() { return node().data; }
  double item() const;
  double at(std::size_t flat) const { return node().data.at(flat); }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return node().leaf; }
  bool has_grad() const { return !node().grad.empty(); }
  /// Gradient view; all zeros if nothing has been accumulated yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse sweep from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  /// Same values, cut from the tape.
  Tensor detach() const;
  Tensor clone() const;

  std::uint64_t id() const { return node().id; }

  // Tape construction, used by op implementations.
  static Tensor make_result(Shape shape, std::vector<double> data,
                            std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward);
  detail::Node& node() const;
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// True when ops record onto the tape (the default).
bool grad_enabled();

/// Disables tape recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Records the sign pattern of every kink-bearing op (relu) evaluated while
/// active. Finite-difference checks use it to discard stencils that straddle
/// a kink.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  std::uint64_t signature() const { return hash_; }
  double min_distance() const { return min_distance_; }

  static void record(std::span<const double> kink_inputs);

 private:
  KinkMonitor* previous_;
  std::uint64_t hash_ = 0;
  double min_distance_;
};

}  // namespace tmb::ad
