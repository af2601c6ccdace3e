#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records primitive applications in topological order. Parameters are
// bound to the tape by reference (no copy); their gradients live on the tape
// after backward() and are read back with Tape::grad(param).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace batchrx::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }
  static Tensor row(std::vector<double> values) {
    const auto n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }
  // Rank-1 tensors are viewed as a single row.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  double item() const;
  bool all_finite() const;
  std::string shape_string() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  /// The reference is invalidated by the next op recorded on the same tape.
  const Tensor& value() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  /// A non-recording tape only evaluates values; backward() is rejected.
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value);
  /// Binds an external tensor as a differentiable leaf. Binding the same
  /// tensor twice returns the same leaf. The tensor must outlive the tape.
  Var parameter(const Tensor& p);
  /// Tensors frozen before binding become constant leaves: no gradient is
  /// propagated into them or computed for them.
  void freeze(std::span<const Tensor* const> tensors);

  /// Populates gradients of a scalar output w.r.t. every node on the tape.
  void backward(Var output);

  /// Gradient of the last backward() output w.r.t. a bound parameter; zeros
  /// when the parameter was unreachable or never bound.
  Tensor grad(const Tensor& p) const;
  Tensor grad(Var v) const;

  // Primitive implementation interface.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);
  const Tensor& value(std::size_t id) const;
  std::span<const double> grad_of(std::size_t id) const { return nodes_[id].grad; }
  std::span<double> accumulator(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> parameter_ids_;
  std::unordered_set<const Tensor*> frozen_;
  bool record_;
};

// ---- primitives -----------------------------------------------------------
//
// Binary elementwise ops broadcast a dimension of size 1 against the other
// operand (scalar, row vector or column vector against a matrix).

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var matmul(Var a, Var b);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
Var concat(std::span<const Var> parts, std::size_t axis);
Var concat(std::initializer_list<Var> parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var minimum(Var a, Var b);
Var maximum(Var a, Var b);
/// Identity inside [lo, hi] (bounds inclusive), zero gradient outside.
Var clamp(Var a, double lo, double hi);

Var scale(Var a, double factor);
Var add_scalar(Var a, double shift);

enum class OpKind {
  add, sub, mul, matmul, tanh, sigmoid, relu, exp, log, square, sum, mean,
  concat, slice, minimum, maximum, clamp,
};

struct OpAttrs {
  std::size_t axis = 1;
  std::size_t begin = 0;
  std::size_t end = 0;
  double lo = 0.0;
  double hi = 0.0;
};

std::string to_string(OpKind kind);
Var forward_primitive(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

// ---- gradient checking ----------------------------------------------------

class GradCheckError : public std::runtime_error {
 public:
  GradCheckError(const std::string& what, std::size_t block, std::size_t index)
      : std::runtime_error(what), block_(block), index_(index) {}
  std::size_t block() const { return block_; }
  std::size_t index() const { return index_; }

 private:
  std::size_t block_;
  std::size_t index_;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_block = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates_checked = 0;
};

using ScalarFunction = std::function<Var(Tape&)>;

/// Compares backward() against central differences of `f` around the current
/// values of `point`. Error per coordinate is |analytic - numeric| / max(1, |analytic|).
/// `max_coords_per_block` > 0 checks a seeded random subset of each block.
GradCheckReport grad_check(const ScalarFunction& f, std::span<Tensor* const> point, double h,
                           std::size_t max_coords_per_block = 0, std::uint64_t seed = 0);

// ---- Adam -----------------------------------------------------------------

class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(std::size_t block)
      : std::runtime_error("non-finite gradient in parameter block " + std::to_string(block)),
        block_(block) {}
  std::size_t block() const { return block_; }

 private:
  std::size_t block_;
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;
};

AdamState make_adam_state(std::span<Tensor* const> params, const AdamOptions& options);

/// Bias-corrected Adam update. Rejects the whole step (nothing is modified)
/// when any gradient is non-finite.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

/// Adam bound to a fixed list of parameters; pulls gradients from a tape.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Tensor*> params, const AdamOptions& options);
  /// Applies one update from the tape's gradients; returns their global L2 norm.
  double step(const Tape& tape);
  const AdamState& state() const { return state_; }
  std::span<Tensor* const> params() const { return params_; }

 private:
  std::vector<Tensor*> params_;
  AdamState state_;
};

}  // namespace batchrx::ad
