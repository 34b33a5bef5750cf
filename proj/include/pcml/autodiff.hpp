#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pcml/error.hpp"

namespace pcml {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

namespace ad {

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  mat_vec,
  add,
  sub,
  mul,
  scale,
  tanh,
  softplus,
  square,
  sum,
  dot,
  concat,
};

const char* op_name(OpKind kind);

/// Handle to a node of an ExprGraph. Only meaningful for the graph that issued it.
struct Node {
  std::uint32_t index = 0;
  friend bool operator==(Node, Node) = default;
};

class ExprGraph;

/// Per-leaf gradients, shape-matched to their leaves.
class Gradient {
 public:
  const Matrix& operator[](Node leaf) const;
  std::span<const Matrix> values() const { return values_; }
  std::span<const Node> leaves() const { return leaves_; }

 private:
  friend class ExprGraph;
  std::vector<Node> leaves_;
  std::vector<Matrix> values_;
};

/// Cotangent applied to one graph node when running backward().
struct Seed {
  Node node;
  Matrix value;
};

/// Append-only expression tape with eager evaluation.
///
/// Every builder call checks operand shapes, computes the node's value
/// immediately, and appends it. Nodes are therefore topologically ordered by
/// construction. Rebinding a leaf with set_leaf() marks the graph stale until
/// forward_eval() recomputes all cached values.
///
/// A graph is not thread-safe; distinct graphs are independent.
class ExprGraph {
 public:
  ExprGraph() = default;

  Node leaf(Matrix value, std::string name = {});
  Node constant(Matrix value);

  /// Matrix-vector product m * v; m is r x c, v is c x 1.
  Node mat_vec(Node m, Node v);
  Node add(Node a, Node b);
  Node sub(Node a, Node b);
  /// Elementwise product.
  Node mul(Node a, Node b);
  Node scale(Node a, double s);
  Node tanh(Node a);
  Node softplus(Node a);
  Node square(Node a);
  /// Sum of all entries, 1 x 1.
  Node sum(Node a);
  /// Inner product of two equal-length column vectors, 1 x 1.
  Node dot(Node a, Node b);
  /// Vertical stacking of column vectors.
  Node concat(std::span<const Node> parts);

  void mark_output(Node n) { outputs_.push_back(n); }
  const std::vector<Node>& outputs() const { return outputs_; }

  const Matrix& value(Node n) const;
  OpKind kind(Node n) const { return nodes_[n.index].kind; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& leaves() const { return leaves_; }
  const std::string& leaf_name(Node n) const;

  /// Rebinds a leaf; the graph becomes stale until forward_eval().
  void set_leaf(Node leaf, Matrix value);
  bool stale() const { return stale_; }

  /// Recomputes every cached value from the current leaf bindings.
  void forward_eval();
  /// Binds the given leaves, then recomputes.
  void forward_eval(std::span<const std::pair<Node, Matrix>> bindings);

  /// Gradient of seed . value(output) with respect to every leaf.
  Gradient backward(Node output, const Matrix& seed) const;
  /// Gradient of sum_k seed_k . value(node_k) with respect to every leaf.
  Gradient backward(std::span<const Seed> seeds) const;

 private:
  struct Record {
    OpKind kind;
    std::uint32_t first_operand;
    std::uint32_t operand_count;
    double scalar;
    Matrix value;
  };

  Node push(OpKind kind, std::initializer_list<Node> operands, double scalar = 0.0);
  Node push(OpKind kind, std::span<const Node> operands, double scalar);
  void check(Node n) const;
  void check_shapes(std::uint32_t index) const;
  void compute(std::uint32_t index);
  std::uint32_t operand(const Record& r, std::uint32_t k) const {
    return operands_[r.first_operand + k];
  }

  std::vector<Record> nodes_;
  std::vector<std::uint32_t> operands_;
  std::vector<Node> leaves_;
  std::vector<std::string> leaf_names_;
  std::vector<Node> outputs_;
  bool stale_ = false;
};

/// Graph-level forward evaluation with new leaf values; returns output values.
std::vector<Matrix> forward_eval(ExprGraph& graph,
                                 std::span<const std::pair<Node, Matrix>> leaf_values);

/// Result of comparing backward() against central finite differences.
struct FdReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index worst_entry = -1;
  bool passed = true;
  Matrix analytic;
  Matrix numeric;
};

/// Checks d(seed . output)/d(leaf) against central differences with step h.
///
/// Entries whose analytic derivative is below 1e-8 in magnitude are compared
/// absolutely, the rest relatively. The graph is restored afterwards.
FdReport check_gradient_fd(ExprGraph& graph, Node leaf, double h, double tol,
                           Node output, const Matrix& seed);

/// Same, using the graph's first marked output and an all-ones seed.
FdReport check_gradient_fd(ExprGraph& graph, Node leaf, double h, double tol);

}  // namespace ad
}  // namespace pcml
