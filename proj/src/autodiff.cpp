#include "batchrx/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Core>

namespace batchrx::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::size_t product(const Tensor::Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require(bool ok, const std::string& op, const std::string& detail) {
  if (!ok) throw ShapeError(op + ": shape mismatch (" + detail + ")");
}

void require_2d(const Tensor& t, const std::string& op) {
  require(t.rank() == 1 || t.rank() == 2, op, "rank " + std::to_string(t.rank()) + " unsupported");
}

void require_same_tape(Var a, Var b, const std::string& op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(op + ": operands live on different tapes");
}

// Broadcast plan for two rank<=2 operands.
struct Broadcast {
  std::size_t rows;
  std::size_t cols;
  Tensor::Shape out_shape;
};

Broadcast plan_broadcast(const Tensor& a, const Tensor& b, const std::string& op) {
  require_2d(a, op);
  require_2d(b, op);
  const auto ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  const bool rows_ok = ar == br || ar == 1 || br == 1;
  const bool cols_ok = ac == bc || ac == 1 || bc == 1;
  require(rows_ok && cols_ok, op, a.shape_string() + " vs " + b.shape_string());
  Broadcast plan{std::max(ar, br), std::max(ac, bc), {}};
  if (a.rank() == 1 && b.rank() == 1) {
    plan.out_shape = {plan.cols};
  } else {
    plan.out_shape = {plan.rows, plan.cols};
  }
  return plan;
}

inline std::size_t bidx(const Tensor& t, std::size_t r, std::size_t c) {
  const std::size_t rr = t.rows() == 1 ? 0 : r;
  const std::size_t cc = t.cols() == 1 ? 0 : c;
  return rr * t.cols() + cc;
}

template <class Fwd, class Da, class Db>
Var binary(Var a, Var b, const std::string& op, Fwd fwd, Da da, Db db) {
  require_same_tape(a, b, op);
  Tape& tape = a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast plan = plan_broadcast(av, bv, op);
  Tensor out(plan.out_shape);
  const bool same = av.shape() == bv.shape();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for (std::size_t r = 0; r < plan.rows; ++r) {
      for (std::size_t c = 0; c < plan.cols; ++c) {
        out[r * plan.cols + c] = fwd(av[bidx(av, r, c)], bv[bidx(bv, r, c)]);
      }
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, plan, same, da, db](Tape& t, std::size_t self) {
    const auto g = t.grad_of(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    if (t.requires_grad(ia)) {
      auto ga = t.accumulator(ia);
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(x[i], y[i]);
      } else {
        for (std::size_t r = 0; r < plan.rows; ++r) {
          for (std::size_t c = 0; c < plan.cols; ++c) {
            const std::size_t xi = bidx(x, r, c), yi = bidx(y, r, c);
            ga[xi] += g[r * plan.cols + c] * da(x[xi], y[yi]);
          }
        }
      }
    }
    if (t.requires_grad(ib)) {
      auto gb = t.accumulator(ib);
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(x[i], y[i]);
      } else {
        for (std::size_t r = 0; r < plan.rows; ++r) {
          for (std::size_t c = 0; c < plan.cols; ++c) {
            const std::size_t xi = bidx(x, r, c), yi = bidx(y, r, c);
            gb[yi] += g[r * plan.cols + c] * db(x[xi], y[yi]);
          }
        }
      }
    }
  });
}

template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Tape& tape = a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {ia}, [ia, deriv](Tape& t, std::size_t self) {
    const auto g = t.grad_of(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    auto ga = t.accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor: dimensions must be positive");
  }
  values_.assign(product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor: dimensions must be positive");
  }
  if (product(shape_) != values_.size()) {
    throw ShapeError("tensor: shape " + shape_string() + " does not hold " + std::to_string(values_.size()) +
                     " values");
  }
}

double Tensor::item() const {
  if (values_.size() != 1) throw ShapeError("item: tensor is not a scalar " + shape_string());
  return values_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ']';
  return os.str();
}

// ---- Tape -----------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Tensor& p) {
  if (auto it = parameter_ids_.find(&p); it != parameter_ids_.end()) return Var(this, it->second);
  Node node;
  node.external = &p;
  node.requires_grad = record_ && !frozen_.contains(&p);
  nodes_.push_back(std::move(node));
  const auto id = nodes_.size() - 1;
  parameter_ids_.emplace(&p, id);
  return Var(this, id);
}

void Tape::freeze(std::span<const Tensor* const> tensors) {
  for (const Tensor* t : tensors) {
    if (parameter_ids_.contains(t)) throw std::logic_error("freeze: tensor already bound to this tape");
    frozen_.insert(t);
  }
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node node;
  node.owned = std::move(value);
  bool needs = false;
  for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
  if (record_ && needs) {
    node.requires_grad = true;
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

std::span<double> Tape::accumulator(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
  return n.grad;
}

void Tape::backward(Var output) {
  if (!record_) throw std::logic_error("backward: tape was created without gradient recording");
  if (&output.tape() != this) throw std::invalid_argument("backward: output belongs to another tape");
  if (output.value().size() != 1) {
    throw ShapeError("backward: output must be scalar, got " + output.value().shape_string());
  }
  for (auto& n : nodes_) n.grad.clear();
  accumulator(output.id())[0] = 1.0;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

Tensor Tape::grad(const Tensor& p) const {
  auto it = parameter_ids_.find(&p);
  if (it == parameter_ids_.end() || nodes_[it->second].grad.empty()) return Tensor(p.shape(), 0.0);
  return Tensor(p.shape(), nodes_[it->second].grad);
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  const Tensor& val = value(v.id());
  if (n.grad.empty()) return Tensor(val.shape(), 0.0);
  return Tensor(val.shape(), n.grad);
}

// ---- primitives -----------------------------------------------------------

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var minimum(Var a, Var b) {
  return binary(
      a, b, "min", [](double x, double y) { return std::min(x, y); },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; }, [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Var maximum(Var a, Var b) {
  return binary(
      a, b, "max", [](double x, double y) { return std::max(x, y); },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; }, [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  Tape& tape = a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_2d(av, "matmul");
  require(bv.rank() == 2, "matmul", "right operand must be a matrix, got " + bv.shape_string());
  require(av.cols() == bv.rows(), "matmul", av.shape_string() + " x " + bv.shape_string());
  const auto m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out({m, n});
  MutMap(out.data(), m, n).noalias() = ConstMap(av.data(), m, k) * ConstMap(bv.data(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    ConstMap g(t.grad_of(self).data(), m, n);
    ConstMap x(t.value(ia).data(), m, k);
    ConstMap y(t.value(ib).data(), k, n);
    if (t.requires_grad(ia)) MutMap(t.accumulator(ia).data(), m, k).noalias() += g * y.transpose();
    if (t.requires_grad(ib)) MutMap(t.accumulator(ib).data(), k, n).noalias() += x.transpose() * g;
  });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var sum(Var a) {
  Tape& tape = a.tape();
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  const std::size_t ia = a.id();
  return tape.record(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    for (double& x : t.accumulator(ia)) x += g;
  });
}

Var mean(Var a) {
  Tape& tape = a.tape();
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  const double inv = 1.0 / static_cast<double>(av.size());
  const std::size_t ia = a.id();
  return tape.record(Tensor::scalar(s * inv), {ia}, [ia, inv](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0] * inv;
    for (double& x : t.accumulator(ia)) x += g;
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  Tape& tape = parts[0].tape();
  std::vector<std::size_t> ids;
  std::vector<std::size_t> extents;
  std::size_t rows = parts[0].value().rows();
  std::size_t cols = parts[0].value().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p, "concat");
    const Tensor& v = p.value();
    require_2d(v, "concat");
    if (axis == 1) {
      require(v.rows() == rows, "concat", "row counts differ: " + v.shape_string());
      extents.push_back(v.cols());
      total += v.cols();
    } else {
      require(v.cols() == cols, "concat", "column counts differ: " + v.shape_string());
      extents.push_back(v.rows());
      total += v.rows();
    }
    ids.push_back(p.id());
  }
  const std::size_t out_rows = axis == 1 ? rows : total;
  const std::size_t out_cols = axis == 1 ? total : cols;
  Tensor out({out_rows, out_cols});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const Tensor& v = tape.value(ids[k]);
    if (axis == 1) {
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(v.data() + r * extents[k], extents[k], out.data() + r * out_cols + offset);
      }
    } else {
      std::copy_n(v.data(), v.size(), out.data() + offset * out_cols);
    }
    offset += extents[k];
  }
  return tape.record(std::move(out), ids, [ids, extents, axis, out_rows, out_cols](Tape& t, std::size_t self) {
    const auto g = t.grad_of(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) {
        off += extents[k];
        continue;
      }
      auto acc = t.accumulator(ids[k]);
      if (axis == 1) {
        for (std::size_t r = 0; r < out_rows; ++r) {
          for (std::size_t c = 0; c < extents[k]; ++c) acc[r * extents[k] + c] += g[r * out_cols + off + c];
        }
      } else {
        const double* src = g.data() + off * out_cols;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
      }
      off += extents[k];
    }
  });
}

Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& tape = a.tape();
  const Tensor& av = a.value();
  require_2d(av, "slice");
  if (axis > 1) throw ShapeError("slice: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? av.rows() : av.cols();
  require(begin < end && end <= extent, "slice",
          "range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + av.shape_string());
  const std::size_t rows = av.rows(), cols = av.cols();
  const std::size_t out_rows = axis == 0 ? end - begin : rows;
  const std::size_t out_cols = axis == 1 ? end - begin : cols;
  Tensor out({out_rows, out_cols});
  if (axis == 0) {
    std::copy_n(av.data() + begin * cols, out.size(), out.data());
  } else {
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.data() + r * cols + begin, out_cols, out.data() + r * out_cols);
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {ia}, [ia, axis, begin, cols, out_rows, out_cols](Tape& t, std::size_t self) {
    const auto g = t.grad_of(self);
    auto acc = t.accumulator(ia);
    if (axis == 0) {
      double* dst = acc.data() + begin * cols;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    } else {
      for (std::size_t r = 0; r < out_rows; ++r) {
        for (std::size_t c = 0; c < out_cols; ++c) acc[r * cols + begin + c] += g[r * out_cols + c];
      }
    }
  });
}

Var scale(Var a, double factor) {
  return unary(a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double shift) {
  return unary(a, [shift](double x) { return x + shift; }, [](double, double) { return 1.0; });
}

std::string to_string(OpKind kind) {
  switch (kind) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::relu: return "relu";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::minimum: return "min";
    case OpKind::maximum: return "max";
    case OpKind::clamp: return "clamp";
  }
  return "unknown";
}

Var forward_primitive(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs) {
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(to_string(kind) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::add: arity(2); return add(inputs[0], inputs[1]);
    case OpKind::sub: arity(2); return sub(inputs[0], inputs[1]);
    case OpKind::mul: arity(2); return mul(inputs[0], inputs[1]);
    case OpKind::matmul: arity(2); return matmul(inputs[0], inputs[1]);
    case OpKind::minimum: arity(2); return minimum(inputs[0], inputs[1]);
    case OpKind::maximum: arity(2); return maximum(inputs[0], inputs[1]);
    case OpKind::tanh: arity(1); return tanh(inputs[0]);
    case OpKind::sigmoid: arity(1); return sigmoid(inputs[0]);
    case OpKind::relu: arity(1); return relu(inputs[0]);
    case OpKind::exp: arity(1); return exp(inputs[0]);
    case OpKind::log: arity(1); return log(inputs[0]);
    case OpKind::square: arity(1); return square(inputs[0]);
    case OpKind::sum: arity(1); return sum(inputs[0]);
    case OpKind::mean: arity(1); return mean(inputs[0]);
    case OpKind::clamp: arity(1); return clamp(inputs[0], attrs.lo, attrs.hi);
    case OpKind::slice: arity(1); return slice(inputs[0], attrs.axis, attrs.begin, attrs.end);
    case OpKind::concat: return concat(inputs, attrs.axis);
  }
  throw std::invalid_argument("forward_primitive: unknown op");
}

// ---- gradient checking ----------------------------------------------------

GradCheckReport grad_check(const ScalarFunction& f, std::span<Tensor* const> point, double h,
                           std::size_t max_coords_per_block, std::uint64_t seed) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw std::invalid_argument("grad_check: perturbation must lie in [1e-7, 1e-3]");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    Var out = f(tape);
    tape.backward(out);
    for (Tensor* p : point) analytic.push_back(tape.grad(*p));
  }

  auto evaluate = [&](std::size_t block, std::size_t index) {
    Tape tape(false);
    const double v = f(tape).value().item();
    if (!std::isfinite(v)) {
      throw GradCheckError("grad_check: non-finite value at block " + std::to_string(block) + " coordinate " +
                               std::to_string(index),
                           block, index);
    }
    return v;
  };

  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (std::size_t b = 0; b < point.size(); ++b) {
    Tensor& p = *point[b];
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords_per_block > 0 && coords.size() > max_coords_per_block) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_block);
    }
    for (std::size_t i : coords) {
      const double saved = p[i];
      p[i] = saved + h;
      const double plus = evaluate(b, i);
      p[i] = saved - h;
      const double minus = evaluate(b, i);
      p[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[b][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++report.coordinates_checked;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_block = b;
        report.worst_index = i;
      }
    }
  }
  return report;
}

// ---- Adam -----------------------------------------------------------------

AdamState make_adam_state(std::span<Tensor* const> params, const AdamOptions& options) {
  if (!(options.learning_rate > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
  AdamState state;
  state.options = options;
  for (const Tensor* p : params) {
    state.first_moment.emplace_back(p->shape(), 0.0);
    state.second_moment.emplace_back(p->shape(), 0.0);
  }
  return state;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b]->shape() != grads[b].shape() || params[b]->shape() != state.first_moment[b].shape()) {
      throw ShapeError("adam_step: block " + std::to_string(b) + " shape " + params[b]->shape_string() + " vs " +
                       grads[b].shape_string());
    }
    if (!grads[b].all_finite()) throw NonFiniteGradient(b);
  }
  const AdamOptions& o = state.options;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t b = 0; b < params.size(); ++b) {
    Tensor& p = *params[b];
    Tensor& m = state.first_moment[b];
    Tensor& v = state.second_moment[b];
    const Tensor& g = grads[b];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= o.learning_rate * mhat / (std::sqrt(vhat) + o.epsilon);
    }
  }
}

Adam::Adam(std::vector<Tensor*> params, const AdamOptions& options)
    : params_(std::move(params)), state_(make_adam_state(params_, options)) {}

double Adam::step(const Tape& tape) {
  std::vector<Tensor> grads;
  grads.reserve(params_.size());
  double sq = 0.0;
  for (const Tensor* p : params_) {
    grads.push_back(tape.grad(*p));
    for (double g : grads.back().values()) sq += g * g;
  }
  adam_step(params_, grads, state_);
  return std::sqrt(sq);
}

}  // namespace batchrx::ad
