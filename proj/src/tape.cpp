#include "look/tape.hpp"

#include <string>

#include "look/error.hpp"

namespace look {

NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

NodeId Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  Node n;
  n.op = Op::kMatmul;
  n.a = a;
  n.b = b;
  n.value = look::matmul(value(a), value(b));
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  n.value = look::add(value(a), value(b));
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(n));
}

NodeId Tape::add_row_bias(NodeId x, NodeId bias) {
  const Matrix& xv = value(x);
  const Matrix& bv = value(bias);
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw ShapeError("add_row_bias: bias must be 1x" + std::to_string(xv.cols()));
  }
  Node n;
  n.op = Op::kAddRowBias;
  n.a = x;
  n.b = bias;
  n.value = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto row = n.value.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv(0, c);
  }
  n.requires_grad = nodes_[x].requires_grad || nodes_[bias].requires_grad;
  return push(std::move(n));
}

NodeId Tape::relu(NodeId x) {
  Node n;
  n.op = Op::kRelu;
  n.a = x;
  n.value = value(x);
  for (double& v : n.value.values()) v = v > 0.0 ? v : 0.0;
  n.requires_grad = nodes_[x].requires_grad;
  return push(std::move(n));
}

NodeId Tape::normalize_rows(NodeId x) {
  const Matrix& xv = value(x);
  Node n;
  n.op = Op::kNormalizeRows;
  n.a = x;
  n.value = Matrix(xv.rows(), xv.cols());
  n.aux.resize(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double nrm = norm2(xv.row(r));
    n.aux[r] = nrm;
    if (!(nrm >= kNormFloor)) continue;
    auto src = xv.row(r);
    auto dst = n.value.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] / nrm;
  }
  n.requires_grad = nodes_[x].requires_grad;
  return push(std::move(n));
}

void Tape::accumulate(NodeId id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
  } else {
    auto dst = n.grad.values();
    auto src = g.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

void Tape::backward(NodeId output, const Matrix& seed) {
  const Matrix& out = value(output);
  if (seed.rows() != out.rows() || seed.cols() != out.cols()) {
    throw ShapeError("backward: seed shape does not match output node");
  }
  for (auto& n : nodes_) n.grad = Matrix();
  accumulate(output, seed);

  for (NodeId id = output + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    const Matrix& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul:
        if (nodes_[n.a].requires_grad) accumulate(n.a, matmul_bt(g, nodes_[n.b].value));
        if (nodes_[n.b].requires_grad) accumulate(n.b, matmul_at(nodes_[n.a].value, g));
        break;
      case Op::kAdd:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::kAddRowBias: {
        accumulate(n.a, g);
        if (nodes_[n.b].requires_grad) {
          Matrix gb(1, g.cols());
          for (std::size_t r = 0; r < g.rows(); ++r) {
            auto row = g.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) gb(0, c) += row[c];
          }
          accumulate(n.b, gb);
        }
        break;
      }
      case Op::kRelu: {
        Matrix gx = g;
        auto in = nodes_[n.a].value.values();
        auto gv = gx.values();
        for (std::size_t i = 0; i < gv.size(); ++i) {
          if (!(in[i] > 0.0)) gv[i] = 0.0;
        }
        accumulate(n.a, gx);
        break;
      }
      case Op::kNormalizeRows: {
        // d(x/|x|) = (g - y (y.g)) / |x|; degenerate rows pass no gradient.
        Matrix gx(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const double nrm = n.aux[r];
          if (!(nrm >= kNormFloor)) continue;
          auto y = n.value.row(r);
          auto gr = g.row(r);
          const double yg = dot(y, gr);
          auto dst = gx.row(r);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = (gr[c] - y[c] * yg) / nrm;
        }
        accumulate(n.a, gx);
        break;
      }
    }
  }
}

}  // namespace look
