#include "pcml/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pcml::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

double softplus_scalar(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void accumulate(Matrix& adj, const Matrix& g) {
  if (adj.size() == 0) {
    adj = g;
  } else {
    adj += g;
  }
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::mat_vec: return "mat_vec";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::tanh: return "tanh";
    case OpKind::softplus: return "softplus";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::dot: return "dot";
    case OpKind::concat: return "concat";
  }
  return "?";
}

const Matrix& Gradient::operator[](Node leaf) const {
  auto it = std::lower_bound(leaves_.begin(), leaves_.end(), leaf,
                             [](Node a, Node b) { return a.index < b.index; });
  if (it == leaves_.end() || it->index != leaf.index) {
    throw ShapeError("gradient requested for node " + std::to_string(leaf.index) +
                     ", which is not a leaf");
  }
  return values_[static_cast<std::size_t>(it - leaves_.begin())];
}

Node ExprGraph::leaf(Matrix value, std::string name) {
  if (!value.allFinite()) throw NumericError("non-finite value bound to leaf '" + name + "'");
  Record r{OpKind::leaf, 0, 0, 0.0, std::move(value)};
  const auto index = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(std::move(r));
  leaves_.push_back(Node{index});
  leaf_names_.push_back(std::move(name));
  return Node{index};
}

Node ExprGraph::constant(Matrix value) {
  if (!value.allFinite()) throw NumericError("non-finite constant");
  Record r{OpKind::constant, 0, 0, 0.0, std::move(value)};
  const auto index = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(std::move(r));
  return Node{index};
}

Node ExprGraph::push(OpKind kind, std::initializer_list<Node> operands, double scalar) {
  return push(kind, std::span<const Node>(operands.begin(), operands.size()), scalar);
}

Node ExprGraph::push(OpKind kind, std::span<const Node> operands, double scalar) {
  for (Node n : operands) check(n);
  const auto index = static_cast<std::uint32_t>(nodes_.size());
  Record r{kind, static_cast<std::uint32_t>(operands_.size()),
           static_cast<std::uint32_t>(operands.size()), scalar, Matrix()};
  for (Node n : operands) operands_.push_back(n.index);
  nodes_.push_back(std::move(r));
  try {
    check_shapes(index);
    compute(index);
  } catch (...) {
    nodes_.pop_back();
    operands_.resize(operands_.size() - operands.size());
    throw;
  }
  return Node{index};
}

Node ExprGraph::mat_vec(Node m, Node v) { return push(OpKind::mat_vec, {m, v}); }
Node ExprGraph::add(Node a, Node b) { return push(OpKind::add, {a, b}); }
Node ExprGraph::sub(Node a, Node b) { return push(OpKind::sub, {a, b}); }
Node ExprGraph::mul(Node a, Node b) { return push(OpKind::mul, {a, b}); }
Node ExprGraph::scale(Node a, double s) { return push(OpKind::scale, {a}, s); }
Node ExprGraph::tanh(Node a) { return push(OpKind::tanh, {a}); }
Node ExprGraph::softplus(Node a) { return push(OpKind::softplus, {a}); }
Node ExprGraph::square(Node a) { return push(OpKind::square, {a}); }
Node ExprGraph::sum(Node a) { return push(OpKind::sum, {a}); }
Node ExprGraph::dot(Node a, Node b) { return push(OpKind::dot, {a, b}); }
Node ExprGraph::concat(std::span<const Node> parts) {
  if (parts.empty()) throw ShapeError("concat needs at least one operand");
  return push(OpKind::concat, parts, 0.0);
}

void ExprGraph::check(Node n) const {
  if (n.index >= nodes_.size()) {
    throw ShapeError("node " + std::to_string(n.index) + " does not belong to this graph");
  }
}

const Matrix& ExprGraph::value(Node n) const {
  check(n);
  return nodes_[n.index].value;
}

const std::string& ExprGraph::leaf_name(Node n) const {
  auto it = std::find(leaves_.begin(), leaves_.end(), n);
  if (it == leaves_.end()) throw ShapeError("node is not a leaf");
  return leaf_names_[static_cast<std::size_t>(it - leaves_.begin())];
}

void ExprGraph::check_shapes(std::uint32_t index) const {
  const Record& r = nodes_[index];
  auto fail = [&](const std::string& detail) {
    throw ShapeError("node " + std::to_string(index) + " (" + op_name(r.kind) + "): " + detail);
  };
  auto val = [&](std::uint32_t k) -> const Matrix& { return nodes_[operand(r, k)].value; };
  switch (r.kind) {
    case OpKind::leaf:
    case OpKind::constant:
      break;
    case OpKind::mat_vec:
      if (val(1).cols() != 1 || val(0).cols() != val(1).rows()) {
        fail("cannot multiply " + shape_str(val(0)) + " by " + shape_str(val(1)));
      }
      break;
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul:
      if (val(0).rows() != val(1).rows() || val(0).cols() != val(1).cols()) {
        fail("operand shapes " + shape_str(val(0)) + " and " + shape_str(val(1)) + " differ");
      }
      break;
    case OpKind::dot:
      if (val(0).cols() != 1 || val(1).cols() != 1 || val(0).rows() != val(1).rows()) {
        fail("dot needs equal-length column vectors, got " + shape_str(val(0)) + " and " +
             shape_str(val(1)));
      }
      break;
    case OpKind::concat:
      for (std::uint32_t k = 0; k < r.operand_count; ++k) {
        if (val(k).cols() != 1) fail("operand " + std::to_string(k) + " is not a column vector");
      }
      break;
    default:
      break;
  }
}

void ExprGraph::compute(std::uint32_t index) {
  Record& r = nodes_[index];
  auto val = [&](std::uint32_t k) -> const Matrix& { return nodes_[operand(r, k)].value; };
  switch (r.kind) {
    case OpKind::leaf:
    case OpKind::constant:
      if (!r.value.allFinite()) {
        throw NumericError("non-finite value bound to node " + std::to_string(index));
      }
      return;
    case OpKind::mat_vec:
      r.value.noalias() = val(0) * val(1);
      break;
    case OpKind::add:
      r.value = val(0) + val(1);
      break;
    case OpKind::sub:
      r.value = val(0) - val(1);
      break;
    case OpKind::mul:
      r.value = val(0).cwiseProduct(val(1));
      break;
    case OpKind::scale:
      r.value = r.scalar * val(0);
      break;
    case OpKind::tanh:
      r.value = val(0).array().tanh().matrix();
      break;
    case OpKind::softplus:
      r.value = val(0).unaryExpr(&softplus_scalar);
      break;
    case OpKind::square:
      r.value = val(0).array().square().matrix();
      break;
    case OpKind::sum:
      r.value = Matrix::Constant(1, 1, val(0).sum());
      break;
    case OpKind::dot:
      r.value = Matrix::Constant(1, 1, val(0).col(0).dot(val(1).col(0)));
      break;
    case OpKind::concat: {
      Index rows = 0;
      for (std::uint32_t k = 0; k < r.operand_count; ++k) rows += val(k).rows();
      r.value.resize(rows, 1);
      Index at = 0;
      for (std::uint32_t k = 0; k < r.operand_count; ++k) {
        r.value.middleRows(at, val(k).rows()) = val(k);
        at += val(k).rows();
      }
      break;
    }
  }
  if (!r.value.allFinite()) {
    throw NumericError("non-finite value at node " + std::to_string(index) + " (" +
                       op_name(r.kind) + ")");
  }
}

void ExprGraph::set_leaf(Node leaf, Matrix value) {
  check(leaf);
  Record& r = nodes_[leaf.index];
  if (r.kind != OpKind::leaf) {
    throw ShapeError("node " + std::to_string(leaf.index) + " is not a leaf");
  }
  if (value.rows() != r.value.rows() || value.cols() != r.value.cols()) {
    throw ShapeError("leaf node " + std::to_string(leaf.index) + " bound to " + shape_str(value) +
                     ", expected " + shape_str(r.value));
  }
  r.value = std::move(value);
  stale_ = true;
}

void ExprGraph::forward_eval() {
  for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
    check_shapes(i);
    compute(i);
  }
  stale_ = false;
}

void ExprGraph::forward_eval(std::span<const std::pair<Node, Matrix>> bindings) {
  for (const auto& [node, value] : bindings) set_leaf(node, value);
  forward_eval();
}

Gradient ExprGraph::backward(Node output, const Matrix& seed) const {
  const Seed s{output, seed};
  return backward(std::span<const Seed>(&s, 1));
}

Gradient ExprGraph::backward(std::span<const Seed> seeds) const {
  if (stale_) throw StaleGraphError("backward called on a stale graph; run forward_eval first");
  std::vector<Matrix> adj(nodes_.size());
  std::uint32_t top = 0;
  for (const Seed& s : seeds) {
    check(s.node);
    const Matrix& v = nodes_[s.node.index].value;
    if (s.value.rows() != v.rows() || s.value.cols() != v.cols()) {
      throw ShapeError("seed shape " + shape_str(s.value) + " does not match node " +
                       std::to_string(s.node.index) + " of shape " + shape_str(v));
    }
    accumulate(adj[s.node.index], s.value);
    top = std::max(top, s.node.index + 1);
  }

  for (std::uint32_t i = top; i-- > 0;) {
    if (adj[i].size() == 0) continue;
    const Record& r = nodes_[i];
    const Matrix& g = adj[i];
    auto val = [&](std::uint32_t k) -> const Matrix& { return nodes_[operand(r, k)].value; };
    auto into = [&](std::uint32_t k) -> Matrix& { return adj[operand(r, k)]; };
    switch (r.kind) {
      case OpKind::leaf:
      case OpKind::constant:
        break;
      case OpKind::mat_vec:
        accumulate(into(0), g * val(1).transpose());
        accumulate(into(1), val(0).transpose() * g);
        break;
      case OpKind::add:
        accumulate(into(0), g);
        accumulate(into(1), g);
        break;
      case OpKind::sub:
        accumulate(into(0), g);
        accumulate(into(1), -g);
        break;
      case OpKind::mul:
        accumulate(into(0), g.cwiseProduct(val(1)));
        accumulate(into(1), g.cwiseProduct(val(0)));
        break;
      case OpKind::scale:
        accumulate(into(0), r.scalar * g);
        break;
      case OpKind::tanh:
        accumulate(into(0), g.cwiseProduct((1.0 - r.value.array().square()).matrix()));
        break;
      case OpKind::softplus:
        accumulate(into(0), g.cwiseProduct(val(0).unaryExpr(&sigmoid_scalar)));
        break;
      case OpKind::square:
        accumulate(into(0), 2.0 * g.cwiseProduct(val(0)));
        break;
      case OpKind::sum:
        accumulate(into(0), Matrix::Constant(val(0).rows(), val(0).cols(), g(0, 0)));
        break;
      case OpKind::dot:
        accumulate(into(0), g(0, 0) * val(1));
        accumulate(into(1), g(0, 0) * val(0));
        break;
      case OpKind::concat: {
        Index at = 0;
        for (std::uint32_t k = 0; k < r.operand_count; ++k) {
          const Index rows = val(k).rows();
          accumulate(into(k), g.middleRows(at, rows));
          at += rows;
        }
        break;
      }
    }
  }

  Gradient out;
  out.leaves_ = leaves_;
  out.values_.reserve(leaves_.size());
  for (Node l : leaves_) {
    const Matrix& v = nodes_[l.index].value;
    if (adj[l.index].size() == 0) {
      out.values_.push_back(Matrix::Zero(v.rows(), v.cols()));
    } else {
      out.values_.push_back(std::move(adj[l.index]));
    }
  }
  return out;
}

std::vector<Matrix> forward_eval(ExprGraph& graph,
                                 std::span<const std::pair<Node, Matrix>> leaf_values) {
  graph.forward_eval(leaf_values);
  std::vector<Matrix> out;
  out.reserve(graph.outputs().size());
  for (Node n : graph.outputs()) out.push_back(graph.value(n));
  return out;
}

FdReport check_gradient_fd(ExprGraph& graph, Node leaf, double h, double tol, Node output,
                           const Matrix& seed) {
  if (!(h > 0.0)) throw ValidationError("finite-difference step must be positive");
  if (graph.stale()) graph.forward_eval();
  FdReport report;
  report.analytic = graph.backward(output, seed)[leaf];
  const Matrix base = graph.value(leaf);
  report.numeric.resizeLike(base);

  auto objective = [&]() { return graph.value(output).cwiseProduct(seed).sum(); };
  for (Index k = 0; k < base.size(); ++k) {
    Matrix plus = base;
    Matrix minus = base;
    plus(k) += h;
    minus(k) -= h;
    graph.set_leaf(leaf, plus);
    graph.forward_eval();
    const double fp = objective();
    graph.set_leaf(leaf, minus);
    graph.forward_eval();
    const double fm = objective();
    report.numeric(k) = (fp - fm) / (2.0 * h);
  }
  graph.set_leaf(leaf, base);
  graph.forward_eval();

  for (Index k = 0; k < base.size(); ++k) {
    const double a = report.analytic(k);
    const double abs_err = std::abs(a - report.numeric(k));
    const double err = std::abs(a) < 1e-8 ? abs_err : abs_err / std::abs(a);
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (err > report.max_rel_error || report.worst_entry < 0) {
      if (err >= report.max_rel_error) report.worst_entry = k;
      report.max_rel_error = std::max(report.max_rel_error, err);
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

FdReport check_gradient_fd(ExprGraph& graph, Node leaf, double h, double tol) {
  if (graph.outputs().empty()) throw ValidationError("graph has no marked output");
  const Node out = graph.outputs().front();
  const Matrix& v = graph.value(out);
  return check_gradient_fd(graph, leaf, h, tol, out, Matrix::Ones(v.rows(), v.cols()));
}

}  // namespace pcml::ad
