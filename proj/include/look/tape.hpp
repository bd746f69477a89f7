#pragma once

#include <cstddef>
#include <vector>

#include "look/matrix.hpp"

namespace look {

using NodeId = std::size_t;

/// Reverse-mode recorder for the small fixed op set used by the MLP heads.
///
/// Nodes are appended in evaluation order, so node ids are already a
/// topological order; backward() walks them from the seed down to 0 touching
/// each node once. A Tape is single-owner and not thread safe.
class Tape {
 public:
  NodeId leaf(Matrix value, bool requires_grad = false);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  /// x [n x c] + bias [1 x c] broadcast over rows.
  NodeId add_row_bias(NodeId x, NodeId bias);
  NodeId relu(NodeId x);
  /// Row-wise unit normalization with the kNormFloor degeneracy rule.
  NodeId normalize_rows(NodeId x);

  const Matrix& value(NodeId id) const { return nodes_.at(id).value; }
  /// Accumulated gradient; empty until backward() reaches the node.
  const Matrix& grad(NodeId id) const { return nodes_.at(id).grad; }

  /// Seeds d(loss)/d(output) and propagates to every upstream node.
  void backward(NodeId output, const Matrix& seed);

  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op { kLeaf, kMatmul, kAdd, kAddRowBias, kRelu, kNormalizeRows };

  struct Node {
    Op op = Op::kLeaf;
    NodeId a = 0;
    NodeId b = 0;
    Matrix value;
    Matrix grad;
    std::vector<double> aux;  // row norms for kNormalizeRows
    bool requires_grad = false;
  };

  NodeId push(Node node);
  void accumulate(NodeId id, const Matrix& g);

  std::vector<Node> nodes_;
};

}  // namespace look
