#pragma once

// Minimal reverse-mode differentiation over dense, row-major float64 arrays.
//
// A Graph is built eagerly (define-by-run): every op computes its value when
// it is created, so the node list is already in topological order and
// backpropagation is a single reverse sweep. Graph ops work on rank-2 arrays;
// scalars are 1x1. Binary elementwise ops broadcast size-1 dimensions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fgl/error.hpp"

namespace fgl::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}
  Array(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_)) {
      throw ShapeError("array value count " + std::to_string(values_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Array scalar(double v) { return Array({1, 1}, v); }
  static Array column(std::vector<double> v) {
    const std::size_t n = v.size();
    return Array({n, 1}, std::move(v));
  }
  static Array row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Array({1, n}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return shape_.empty(); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  const std::vector<double>& vector() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

  double item() const {
    if (values_.size() != 1) throw ShapeError("item() on non-scalar array " + shape_string(shape_));
    return values_[0];
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Array&, const Array&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

enum class OpKind {
  constant,
  parameter,
  add,
  sub,
  mul,
  div,
  matmul,
  relu,
  tanh,
  sigmoid,
  log,
  exp,
  power,
  reduce_sum,
  reduce_mean,
  broadcast,
  concat,
  slice,
  softmax,
  custom,
};

// Reduction over every axis.
inline constexpr int kAllAxes = -1;

// Floor applied to the argument of log.
inline constexpr double kLogFloor = 1e-12;

class ParameterSet {
 public:
  std::size_t add(std::string name, Array value) {
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }
  std::size_t size() const { return values_.size(); }
  const Array& value(std::size_t id) const { return values_.at(id); }
  Array& value(std::size_t id) { return values_.at(id); }
  const std::string& name(std::size_t id) const { return names_.at(id); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }
  std::optional<std::size_t> find(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - names_.begin());
  }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Array> values_;
};

// Gradient per parameter id, same shapes as the parameters.
using Gradients = std::vector<Array>;

inline Gradients zero_gradients(const ParameterSet& params) {
  Gradients g;
  g.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) g.emplace_back(params.value(i).shape(), 0.0);
  return g;
}

// User-defined node: forward recomputes the value from the parent values,
// backward returns one gradient per parent given the output gradient.
struct CustomOp {
  std::string name;
  std::function<Array(const std::vector<const Array*>&)> forward;
  std::function<std::vector<Array>(const std::vector<const Array*>&, const Array& value, const Array& grad)>
      backward;
};

class Graph;

class Var {
 public:
  Var() = default;
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  inline const Array& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

namespace detail {

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected rank-2 array, got " + shape_string(s));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  require_rank2(a, op);
  require_rank2(b, op);
  Shape out(2);
  for (int d = 0; d < 2; ++d) {
    if (a[d] == b[d]) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else if (b[d] == 1) {
      out[d] = a[d];
    } else {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
    }
  }
  return out;
}

// Calls f(i, ia, ib) for every flat output index i with the broadcast source
// indices into a and b.
template <class F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const std::size_t rows = out[0], cols = out[1];
  if (a == out && b == out) {
    const std::size_t n = rows * cols;
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t ar = a[0] == 1 ? 0 : a[1], ac = a[1] == 1 ? 0 : 1;
  const std::size_t br = b[0] == 1 ? 0 : b[1], bc = b[1] == 1 ? 0 : 1;
  std::size_t i = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c, ++i) f(i, r * ar + c * ac, r * br + c * bc);
  }
}

inline Array reduce_to(const Array& g, const Shape& target) {
  if (g.shape() == target) return g;
  Array out(target, 0.0);
  const std::size_t rows = g.rows(), cols = g.cols();
  const std::size_t tr = target[0] == 1 ? 0 : target[1], tc = target[1] == 1 ? 0 : 1;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * tr + c * tc] += g(r, c);
  }
  return out;
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

inline ConstMap as_matrix(const Array& a) {
  return ConstMap(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}
inline MutMap as_matrix(Array& a) {
  return MutMap(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

inline double power_value(double x, double p) {
  if (p == 2.0) return x * x;
  if (p == 1.0) return x;
  if (p == 0.5) return std::sqrt(x);
  if (p == -0.5) return 1.0 / std::sqrt(x);
  if (p == -1.0) return 1.0 / x;
  return std::pow(x, p);
}

}  // namespace detail

class Graph {
 public:
  explicit Graph(const ParameterSet* params = nullptr) : params_(params) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Array value) {
    detail::require_rank2(value.shape(), "constant");
    Node n;
    n.op = OpKind::constant;
    n.value = std::move(value);
    return push(std::move(n), /*check_finite=*/true);
  }
  Var constant(double v) { return constant(Array::scalar(v)); }

  Var parameter(std::size_t id) {
    if (params_ == nullptr) throw UsageError("graph has no parameter set");
    Node n;
    n.op = OpKind::parameter;
    n.param = id;
    n.value = params_->value(id);
    detail::require_rank2(n.value.shape(), "parameter");
    n.requires_grad = true;
    return push(std::move(n), true);
  }

  const ParameterSet* parameters() const { return params_; }
  std::size_t node_count() const { return nodes_.size(); }
  const Array& value(std::size_t id) const { return nodes_.at(id).value; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).op; }

  // Recomputes the forward value of root from the leaf snapshots held by the
  // graph. Node values are left untouched.
  Array eval(const Var& root) const {
    check_owner(root);
    std::vector<char> live = live_set(root.id());
    std::vector<Array> fresh(root.id() + 1);
    for (std::size_t i = 0; i <= root.id(); ++i) {
      if (!live[i]) continue;
      const Node& n = nodes_[i];
      if (n.op == OpKind::constant || n.op == OpKind::parameter) {
        fresh[i] = n.value;
        continue;
      }
      std::vector<const Array*> in;
      in.reserve(n.parents.size());
      for (auto p : n.parents) in.push_back(&fresh[p]);
      fresh[i] = compute(n, in);
      check_finite(fresh[i], n);
    }
    return std::move(fresh[root.id()]);
  }

  // Gradient of a scalar root with respect to every parameter of the set.
  Gradients backpropagate(const Var& root) const {
    check_owner(root);
    const Node& r = nodes_[root.id()];
    if (r.value.size() != 1) throw UsageError("backpropagate: root is not scalar " + shape_string(r.value.shape()));
    Gradients out = params_ ? zero_gradients(*params_) : Gradients{};
    if (!r.requires_grad) return out;

    std::vector<char> live = live_set(root.id());
    std::vector<Array> grads(root.id() + 1);
    grads[root.id()] = Array(r.value.shape(), 1.0);

    for (std::size_t i = root.id() + 1; i-- > 0;) {
      if (!live[i] || grads[i].empty()) continue;
      const Node& n = nodes_[i];
      if (n.op == OpKind::parameter) {
        Array& dst = out[n.param];
        const Array& g = grads[i];
        for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
      } else if (n.op != OpKind::constant) {
        backward(n, grads[i], grads);
      }
      grads[i] = Array();
    }
    for (std::size_t p = 0; p < out.size(); ++p) {
      if (!out[p].all_finite()) throw NumericError("non-finite gradient for parameter " + params_->name(p));
    }
    return out;
  }

 private:
  friend Var unary(OpKind, const Var&, double);
  friend Var binary(OpKind, const Var&, const Var&);
  friend Var matmul(const Var&, const Var&);
  friend Var reduce_sum(const Var&, int);
  friend Var reduce_mean(const Var&, int);
  friend Var broadcast(const Var&, const Shape&);
  friend Var concat(const std::vector<Var>&, int);
  friend Var slice(const Var&, int, std::size_t, std::size_t);
  friend Var softmax(const Var&, int);
  friend Var custom(std::shared_ptr<const CustomOp>, const std::vector<Var>&);
  friend class Var;

  struct Node {
    OpKind op = OpKind::constant;
    std::vector<std::size_t> parents;
    Array value;
    bool requires_grad = false;
    int axis = 0;
    double exponent = 1.0;
    std::size_t begin = 0, end = 0;
    std::size_t param = 0;
    Shape target;
    std::shared_ptr<const CustomOp> custom;
  };

  void check_owner(const Var& v) const {
    if (v.graph_ != this || v.id_ >= nodes_.size()) throw UsageError("variable does not belong to this graph");
  }

  std::vector<char> live_set(std::size_t root) const {
    std::vector<char> live(root + 1, 0);
    live[root] = 1;
    for (std::size_t i = root + 1; i-- > 0;) {
      if (!live[i]) continue;
      for (auto p : nodes_[i].parents) live[p] = 1;
    }
    return live;
  }

  static const char* op_name(OpKind k) {
    switch (k) {
      case OpKind::constant: return "constant";
      case OpKind::parameter: return "parameter";
      case OpKind::add: return "add";
      case OpKind::sub: return "sub";
      case OpKind::mul: return "mul";
      case OpKind::div: return "div";
      case OpKind::matmul: return "matmul";
      case OpKind::relu: return "relu";
      case OpKind::tanh: return "tanh";
      case OpKind::sigmoid: return "sigmoid";
      case OpKind::log: return "log";
      case OpKind::exp: return "exp";
      case OpKind::power: return "power";
      case OpKind::reduce_sum: return "reduce_sum";
      case OpKind::reduce_mean: return "reduce_mean";
      case OpKind::broadcast: return "broadcast";
      case OpKind::concat: return "concat";
      case OpKind::slice: return "slice";
      case OpKind::softmax: return "softmax";
      case OpKind::custom: return "custom";
    }
    return "?";
  }

  static void check_finite(const Array& a, const Node& n) {
    if (!a.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op_name(n.op));
  }

  Var push(Node n, bool check) {
    if (check) check_finite(n.value, n);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var make(Node n, std::vector<std::size_t> parents) {
    n.parents = std::move(parents);
    for (auto p : n.parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    std::vector<const Array*> in;
    in.reserve(n.parents.size());
    for (auto p : n.parents) in.push_back(&nodes_[p].value);
    n.value = compute(n, in);
    return push(std::move(n), true);
  }

  static Array compute(const Node& n, const std::vector<const Array*>& in) {
    switch (n.op) {
      case OpKind::constant:
      case OpKind::parameter:
        return n.value;
      case OpKind::add:
      case OpKind::sub:
      case OpKind::mul:
      case OpKind::div: {
        const Array& a = *in[0];
        const Array& b = *in[1];
        Shape s = detail::broadcast_shape(a.shape(), b.shape(), op_name(n.op));
        Array out(s);
        double* o = out.data();
        const double* pa = a.data();
        const double* pb = b.data();
        switch (n.op) {
          case OpKind::add:
            detail::for_each_broadcast(s, a.shape(), b.shape(),
                                       [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = pa[ia] + pb[ib]; });
            break;
          case OpKind::sub:
            detail::for_each_broadcast(s, a.shape(), b.shape(),
                                       [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = pa[ia] - pb[ib]; });
            break;
          case OpKind::mul:
            detail::for_each_broadcast(s, a.shape(), b.shape(),
                                       [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = pa[ia] * pb[ib]; });
            break;
          default:
            detail::for_each_broadcast(s, a.shape(), b.shape(),
                                       [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = pa[ia] / pb[ib]; });
            break;
        }
        return out;
      }
      case OpKind::matmul: {
        const Array& a = *in[0];
        const Array& b = *in[1];
        if (a.cols() != b.rows()) {
          throw ShapeError("matmul: shape mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
        }
        Array out({a.rows(), b.cols()});
        detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b);
        return out;
      }
      case OpKind::relu:
      case OpKind::tanh:
      case OpKind::sigmoid:
      case OpKind::log:
      case OpKind::exp:
      case OpKind::power: {
        const Array& a = *in[0];
        Array out(a.shape());
        const std::size_t m = a.size();
        const double* x = a.data();
        double* o = out.data();
        switch (n.op) {
          case OpKind::relu:
            for (std::size_t i = 0; i < m; ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
            break;
          case OpKind::tanh:
            for (std::size_t i = 0; i < m; ++i) o[i] = std::tanh(x[i]);
            break;
          case OpKind::sigmoid:
            for (std::size_t i = 0; i < m; ++i) {
              o[i] = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
            }
            break;
          case OpKind::log:
            for (std::size_t i = 0; i < m; ++i) o[i] = std::log(std::max(x[i], kLogFloor));
            break;
          case OpKind::exp:
            for (std::size_t i = 0; i < m; ++i) o[i] = std::exp(x[i]);
            break;
          default:
            for (std::size_t i = 0; i < m; ++i) o[i] = detail::power_value(x[i], n.exponent);
            break;
        }
        return out;
      }
      case OpKind::reduce_sum:
      case OpKind::reduce_mean: {
        const Array& a = *in[0];
        const std::size_t rows = a.rows(), cols = a.cols();
        Array out;
        double count = 1.0;
        if (n.axis == kAllAxes) {
          out = Array({1, 1}, 0.0);
          for (double v : a.values()) out[0] += v;
          count = static_cast<double>(a.size());
        } else if (n.axis == 0) {
          out = Array({1, cols}, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* src = a.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) out[c] += src[c];
          }
          count = static_cast<double>(rows);
        } else {
          out = Array({rows, 1}, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            const double* src = a.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) s += src[c];
            out[r] = s;
          }
          count = static_cast<double>(cols);
        }
        if (n.op == OpKind::reduce_mean) {
          for (double& v : out.values()) v /= count;
        }
        return out;
      }
      case OpKind::broadcast: {
        const Array& a = *in[0];
        Shape s = detail::broadcast_shape(a.shape(), n.target, "broadcast");
        if (s != n.target) {
          throw ShapeError("broadcast: cannot broadcast " + shape_string(a.shape()) + " to " + shape_string(n.target));
        }
        Array out(s);
        double* o = out.data();
        const double* pa = a.data();
        detail::for_each_broadcast(s, a.shape(), s, [&](std::size_t i, std::size_t ia, std::size_t) { o[i] = pa[ia]; });
        return out;
      }
      case OpKind::concat: {
        std::size_t rows = in[0]->rows(), cols = in[0]->cols();
        for (std::size_t k = 1; k < in.size(); ++k) {
          if (n.axis == 0) {
            if (in[k]->cols() != cols) throw ShapeError("concat: column mismatch");
            rows += in[k]->rows();
          } else {
            if (in[k]->rows() != rows) throw ShapeError("concat: row mismatch");
            cols += in[k]->cols();
          }
        }
        Array out({rows, cols});
        std::size_t offset = 0;
        for (const Array* part : in) {
          if (n.axis == 0) {
            std::copy(part->values().begin(), part->values().end(), out.data() + offset * cols);
            offset += part->rows();
          } else {
            for (std::size_t r = 0; r < rows; ++r) {
              std::copy_n(part->data() + r * part->cols(), part->cols(), out.data() + r * cols + offset);
            }
            offset += part->cols();
          }
        }
        return out;
      }
      case OpKind::slice: {
        const Array& a = *in[0];
        const std::size_t extent = n.axis == 0 ? a.rows() : a.cols();
        if (n.begin >= n.end || n.end > extent) throw ShapeError("slice: range out of bounds");
        if (n.axis == 0) {
          Array out({n.end - n.begin, a.cols()});
          std::copy_n(a.data() + n.begin * a.cols(), out.size(), out.data());
          return out;
        }
        Array out({a.rows(), n.end - n.begin});
        for (std::size_t r = 0; r < a.rows(); ++r) {
          std::copy_n(a.data() + r * a.cols() + n.begin, n.end - n.begin, out.data() + r * out.cols());
        }
        return out;
      }
      case OpKind::softmax: {
        const Array& a = *in[0];
        Array out(a.shape());
        const std::size_t rows = a.rows(), cols = a.cols();
        if (n.axis == 0) {
          for (std::size_t c = 0; c < cols; ++c) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r < rows; ++r) mx = std::max(mx, a(r, c));
            double s = 0.0;
            for (std::size_t r = 0; r < rows; ++r) s += (out(r, c) = std::exp(a(r, c) - mx));
            for (std::size_t r = 0; r < rows; ++r) out(r, c) /= s;
          }
        } else {
          for (std::size_t r = 0; r < rows; ++r) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, a(r, c));
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += (out(r, c) = std::exp(a(r, c) - mx));
            for (std::size_t c = 0; c < cols; ++c) out(r, c) /= s;
          }
        }
        return out;
      }
      case OpKind::custom:
        return n.custom->forward(in);
    }
    throw UsageError("unknown op");
  }

  Array& grad_slot(std::vector<Array>& grads, std::size_t p) const {
    if (grads[p].empty()) grads[p] = Array(nodes_[p].value.shape(), 0.0);
    return grads[p];
  }

  void backward(const Node& n, const Array& g, std::vector<Array>& grads) const {
    auto wants = [&](std::size_t k) { return nodes_[n.parents[k]].requires_grad; };
    switch (n.op) {
      case OpKind::add:
      case OpKind::sub:
      case OpKind::mul:
      case OpKind::div: {
        const Array& a = nodes_[n.parents[0]].value;
        const Array& b = nodes_[n.parents[1]].value;
        const double* pg = g.data();
        const double* pa = a.data();
        const double* pb = b.data();
        const double* po = n.value.data();
        if (wants(0)) {
          double* ga = grad_slot(grads, n.parents[0]).data();
          switch (n.op) {
            case OpKind::add:
            case OpKind::sub:
              detail::for_each_broadcast(n.value.shape(), a.shape(), b.shape(),
                                         [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += pg[i]; });
              break;
            case OpKind::mul:
              detail::for_each_broadcast(n.value.shape(), a.shape(), b.shape(),
                                         [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += pg[i] * pb[ib]; });
              break;
            default:
              detail::for_each_broadcast(n.value.shape(), a.shape(), b.shape(),
                                         [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += pg[i] / pb[ib]; });
              break;
          }
        }
        if (wants(1)) {
          double* gb = grad_slot(grads, n.parents[1]).data();
          switch (n.op) {
            case OpKind::add:
              detail::for_each_broadcast(n.value.shape(), a.shape(), b.shape(),
                                         [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += pg[i]; });
              break;
            case OpKind::sub:
              detail::for_each_broadcast(n.value.shape(), a.shape(), b.shape(),
                                         [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] -= pg[i]; });
              break;
            case OpKind::mul:
              detail::for_each_broadcast(n.value.shape(), a.shape(), b.shape(),
                                         [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += pg[i] * pa[ia]; });
              break;
            default:
              detail::for_each_broadcast(n.value.shape(), a.shape(), b.shape(),
                                         [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] -= pg[i] * po[i] / pb[ib]; });
              break;
          }
        }
        return;
      }
      case OpKind::matmul: {
        const Array& a = nodes_[n.parents[0]].value;
        const Array& b = nodes_[n.parents[1]].value;
        if (wants(0)) {
          detail::as_matrix(grad_slot(grads, n.parents[0])).noalias() +=
              detail::as_matrix(g) * detail::as_matrix(b).transpose();
        }
        if (wants(1)) {
          detail::as_matrix(grad_slot(grads, n.parents[1])).noalias() +=
              detail::as_matrix(a).transpose() * detail::as_matrix(g);
        }
        return;
      }
      case OpKind::relu:
      case OpKind::tanh:
      case OpKind::sigmoid:
      case OpKind::log:
      case OpKind::exp:
      case OpKind::power: {
        if (!wants(0)) return;
        const Array& a = nodes_[n.parents[0]].value;
        double* ga = grad_slot(grads, n.parents[0]).data();
        const double* x = a.data();
        const double* o = n.value.data();
        const double* pg = g.data();
        const std::size_t m = a.size();
        switch (n.op) {
          case OpKind::relu:
            for (std::size_t i = 0; i < m; ++i) ga[i] += x[i] > 0.0 ? pg[i] : 0.0;
            break;
          case OpKind::tanh:
            for (std::size_t i = 0; i < m; ++i) ga[i] += pg[i] * (1.0 - o[i] * o[i]);
            break;
          case OpKind::sigmoid:
            for (std::size_t i = 0; i < m; ++i) ga[i] += pg[i] * o[i] * (1.0 - o[i]);
            break;
          case OpKind::log:
            for (std::size_t i = 0; i < m; ++i) ga[i] += x[i] > kLogFloor ? pg[i] / x[i] : 0.0;
            break;
          case OpKind::exp:
            for (std::size_t i = 0; i < m; ++i) ga[i] += pg[i] * o[i];
            break;
          default: {
            const double p = n.exponent;
            if (p == 2.0) {
              for (std::size_t i = 0; i < m; ++i) ga[i] += pg[i] * 2.0 * x[i];
            } else if (p == 0.5) {
              for (std::size_t i = 0; i < m; ++i) ga[i] += pg[i] * 0.5 / o[i];
            } else {
              for (std::size_t i = 0; i < m; ++i) ga[i] += pg[i] * p * detail::power_value(x[i], p - 1.0);
            }
            break;
          }
        }
        return;
      }
      case OpKind::reduce_sum:
      case OpKind::reduce_mean: {
        if (!wants(0)) return;
        const Array& a = nodes_[n.parents[0]].value;
        Array& ga = grad_slot(grads, n.parents[0]);
        const std::size_t rows = a.rows(), cols = a.cols();
        double scale = 1.0;
        if (n.op == OpKind::reduce_mean) {
          scale = n.axis == kAllAxes ? 1.0 / static_cast<double>(a.size())
                  : n.axis == 0      ? 1.0 / static_cast<double>(rows)
                                     : 1.0 / static_cast<double>(cols);
        }
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const double gv = n.axis == kAllAxes ? g[0] : n.axis == 0 ? g[c] : g[r];
            ga(r, c) += gv * scale;
          }
        }
        return;
      }
      case OpKind::broadcast: {
        if (!wants(0)) return;
        const Array& a = nodes_[n.parents[0]].value;
        double* ga = grad_slot(grads, n.parents[0]).data();
        const double* pg = g.data();
        detail::for_each_broadcast(n.value.shape(), a.shape(), n.value.shape(),
                                   [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += pg[i]; });
        return;
      }
      case OpKind::concat: {
        std::size_t offset = 0;
        const std::size_t cols = n.value.cols();
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          const Array& part = nodes_[n.parents[k]].value;
          if (wants(k)) {
            Array& gp = grad_slot(grads, n.parents[k]);
            if (n.axis == 0) {
              const double* src = g.data() + offset * cols;
              for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
            } else {
              for (std::size_t r = 0; r < part.rows(); ++r) {
                for (std::size_t c = 0; c < part.cols(); ++c) gp(r, c) += g(r, offset + c);
              }
            }
          }
          offset += n.axis == 0 ? part.rows() : part.cols();
        }
        return;
      }
      case OpKind::slice: {
        if (!wants(0)) return;
        Array& ga = grad_slot(grads, n.parents[0]);
        if (n.axis == 0) {
          double* dst = ga.data() + n.begin * ga.cols();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        } else {
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < g.cols(); ++c) ga(r, n.begin + c) += g(r, c);
          }
        }
        return;
      }
      case OpKind::softmax: {
        if (!wants(0)) return;
        Array& ga = grad_slot(grads, n.parents[0]);
        const Array& o = n.value;
        const std::size_t rows = o.rows(), cols = o.cols();
        if (n.axis == 0) {
          for (std::size_t c = 0; c < cols; ++c) {
            double dot = 0.0;
            for (std::size_t r = 0; r < rows; ++r) dot += g(r, c) * o(r, c);
            for (std::size_t r = 0; r < rows; ++r) ga(r, c) += o(r, c) * (g(r, c) - dot);
          }
        } else {
          for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g(r, c) * o(r, c);
            for (std::size_t c = 0; c < cols; ++c) ga(r, c) += o(r, c) * (g(r, c) - dot);
          }
        }
        return;
      }
      case OpKind::custom: {
        std::vector<const Array*> in;
        for (auto p : n.parents) in.push_back(&nodes_[p].value);
        std::vector<Array> parts = n.custom->backward(in, n.value, g);
        if (parts.size() != n.parents.size()) throw UsageError("custom op " + n.custom->name + ": gradient count");
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (!wants(k)) continue;
          Array& gp = grad_slot(grads, n.parents[k]);
          if (parts[k].shape() != gp.shape()) throw ShapeError("custom op " + n.custom->name + ": gradient shape");
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += parts[k][i];
        }
        return;
      }
      case OpKind::constant:
      case OpKind::parameter:
        return;
    }
  }

  const ParameterSet* params_;
  std::vector<Node> nodes_;
};

inline const Array& Var::value() const { return graph_->value(id_); }

namespace detail {
inline Graph& same_graph(const Var& a, const Var& b) {
  if (!a.valid() || &a.graph() != &b.graph()) throw UsageError("operands belong to different graphs");
  return a.graph();
}
}  // namespace detail

inline Var unary(OpKind op, const Var& a, double exponent) {
  Graph::Node n;
  n.op = op;
  n.exponent = exponent;
  return a.graph().make(std::move(n), {a.id()});
}

inline Var binary(OpKind op, const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  Graph::Node n;
  n.op = op;
  return g.make(std::move(n), {a.id(), b.id()});
}

inline Var add(const Var& a, const Var& b) { return binary(OpKind::add, a, b); }
inline Var sub(const Var& a, const Var& b) { return binary(OpKind::sub, a, b); }
inline Var mul(const Var& a, const Var& b) { return binary(OpKind::mul, a, b); }
inline Var div(const Var& a, const Var& b) { return binary(OpKind::div, a, b); }

inline Var matmul(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  Graph::Node n;
  n.op = OpKind::matmul;
  return g.make(std::move(n), {a.id(), b.id()});
}

inline Var relu(const Var& a) { return unary(OpKind::relu, a, 1.0); }
inline Var tanh(const Var& a) { return unary(OpKind::tanh, a, 1.0); }
inline Var sigmoid(const Var& a) { return unary(OpKind::sigmoid, a, 1.0); }
inline Var log(const Var& a) { return unary(OpKind::log, a, 1.0); }
inline Var exp(const Var& a) { return unary(OpKind::exp, a, 1.0); }
inline Var power(const Var& a, double p) { return unary(OpKind::power, a, p); }

inline Var reduce_sum(const Var& a, int axis = kAllAxes) {
  if (axis < kAllAxes || axis > 1) throw UsageError("reduce_sum: bad axis");
  Graph::Node n;
  n.op = OpKind::reduce_sum;
  n.axis = axis;
  return a.graph().make(std::move(n), {a.id()});
}

inline Var reduce_mean(const Var& a, int axis = kAllAxes) {
  if (axis < kAllAxes || axis > 1) throw UsageError("reduce_mean: bad axis");
  Graph::Node n;
  n.op = OpKind::reduce_mean;
  n.axis = axis;
  return a.graph().make(std::move(n), {a.id()});
}

inline Var broadcast(const Var& a, const Shape& target) {
  Graph::Node n;
  n.op = OpKind::broadcast;
  n.target = target;
  return a.graph().make(std::move(n), {a.id()});
}

inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  if (axis != 0 && axis != 1) throw UsageError("concat: bad axis");
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::same_graph(parts.front(), p);
    ids.push_back(p.id());
  }
  Graph::Node n;
  n.op = OpKind::concat;
  n.axis = axis;
  return parts.front().graph().make(std::move(n), std::move(ids));
}

inline Var slice(const Var& a, int axis, std::size_t begin, std::size_t end) {
  if (axis != 0 && axis != 1) throw UsageError("slice: bad axis");
  Graph::Node n;
  n.op = OpKind::slice;
  n.axis = axis;
  n.begin = begin;
  n.end = end;
  return a.graph().make(std::move(n), {a.id()});
}

inline Var softmax(const Var& a, int axis) {
  if (axis != 0 && axis != 1) throw UsageError("softmax: bad axis");
  Graph::Node n;
  n.op = OpKind::softmax;
  n.axis = axis;
  return a.graph().make(std::move(n), {a.id()});
}

inline Var custom(std::shared_ptr<const CustomOp> op, const std::vector<Var>& inputs) {
  if (inputs.empty()) throw UsageError("custom op without inputs");
  std::vector<std::size_t> ids;
  for (const auto& v : inputs) {
    detail::same_graph(inputs.front(), v);
    ids.push_back(v.id());
  }
  Graph::Node n;
  n.op = OpKind::custom;
  n.custom = std::move(op);
  return inputs.front().graph().make(std::move(n), std::move(ids));
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator+(const Var& a, double b) { return add(a, a.graph().constant(b)); }
inline Var operator-(const Var& a, double b) { return sub(a, a.graph().constant(b)); }
inline Var operator*(const Var& a, double b) { return mul(a, a.graph().constant(b)); }
inline Var operator/(const Var& a, double b) { return div(a, a.graph().constant(b)); }
inline Var operator+(double a, const Var& b) { return add(b.graph().constant(a), b); }
inline Var operator-(double a, const Var& b) { return sub(b.graph().constant(a), b); }
inline Var operator*(double a, const Var& b) { return mul(b.graph().constant(a), b); }
inline Var operator-(const Var& a) { return mul(a.graph().constant(-1.0), a); }

// Convenience wrapper with the free-function name used elsewhere.
inline Array eval_graph(const Var& root) { return root.graph().eval(root); }
inline Gradients backpropagate(const Var& root) { return root.graph().backpropagate(root); }

// Relative error of the whole gradient against central differences:
// |analytic - numeric| / max(|analytic|, |numeric|) in the Euclidean norm over
// every scalar of every parameter. Entrywise ratios are not used because the
// difference quotient carries an absolute error (epsilon^2 truncation plus
// roundoff) that swamps entries near zero. fn builds a scalar-valued graph
// reading the parameters through Graph::parameter.
inline double finite_difference_check(const std::function<Var(Graph&)>& fn, ParameterSet& params, double epsilon) {
  if (!(epsilon > 0.0)) throw UsageError("finite_difference_check: epsilon must be positive");
  Gradients analytic;
  {
    Graph g(&params);
    Var root = fn(g);
    analytic = g.backpropagate(root);
  }
  auto evaluate = [&]() {
    Graph g(&params);
    return fn(g).value().item();
  };
  double err2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Array& value = params.value(p);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + epsilon;
      const double up = evaluate();
      value[i] = saved - epsilon;
      const double down = evaluate();
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[p][i];
      err2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
  }
  const double scale = std::sqrt(std::max(a2, n2));
  if (scale == 0.0) return 0.0;
  return std::sqrt(err2) / scale;
}

// Same check for a function of a single array argument.
inline double finite_difference_check(const std::function<Var(Graph&, const Var&)>& fn, const Array& point,
                                      double epsilon) {
  ParameterSet params;
  params.add("x", point);
  return finite_difference_check([&](Graph& g) { return fn(g, g.parameter(0)); }, params, epsilon);
}

// Gradient utilities used by the optimizer.
inline void accumulate(Gradients& into, const Gradients& g, double scale = 1.0) {
  if (into.size() != g.size()) throw ShapeError("gradient set size mismatch");
  for (std::size_t p = 0; p < g.size(); ++p) {
    if (into[p].shape() != g[p].shape()) throw ShapeError("gradient shape mismatch");
    for (std::size_t i = 0; i < g[p].size(); ++i) into[p][i] += scale * g[p][i];
  }
}

inline double global_norm(const Gradients& g) {
  double s = 0.0;
  for (const auto& a : g) {
    for (double v : a.values()) s += v * v;
  }
  return std::sqrt(s);
}

}  // namespace fgl::diff
