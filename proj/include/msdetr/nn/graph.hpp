// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace msdetr::nn {

// The model library is built in single precision for training and a second
// time in double precision (MSDETR_REAL_DOUBLE) for finite-difference tests.
#ifdef MSDETR_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Trainable tensor (always 2-D) with its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
    grad.setZero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
  friend bool operator==(Var, Var) = default;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so running the
/// backward closures in reverse creation order is a valid topological sweep.
/// A graph is built per forward pass and discarded afterwards.
class Graph {
 public:
  Var input(Matrix value);
  Var param(Parameter& p);

  const Matrix& value(Var v) const;
  /// Gradient buffer of v, zero-initialized on first access.
  Matrix& grad(Var v);
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Propagates every gradient seeded through grad() down to the leaves.
  /// Parameter gradients are accumulated into Parameter::grad.
  void backward();

  Var matmul(Var a, Var b);
  /// x * w + b with b a 1 x out row broadcast over rows.
  Var linear(Var x, Var w, Var b);
  Var add(Var a, Var b);
  Var relu(Var x);
  Var sigmoid(Var x);
  /// Row-wise layer normalization with affine gamma/beta (1 x D each).
  Var layer_norm(Var x, Var gamma, Var beta, Real eps = Real(1e-5));
  /// Multi-head scaled dot-product attention on already projected inputs:
  /// q is n x d, k and v are m x d; heads split the d columns evenly.
  Var attention(Var q, Var k, Var v, int heads);
  /// 2-D convolution on a (height*width) x Cin row-major feature map.
  /// w is (kernel*kernel*Cin) x Cout, b is 1 x Cout. Output is
  /// (out_h*out_w) x Cout with out = (in + 2*pad - kernel) / stride + 1.
  Var conv2d(Var x, int height, int width, Var w, Var b, int kernel, int stride, int pad);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    std::function<void(Graph&, Node&)> backward;
  };

  Var push(Matrix value, bool requires_grad, std::function<void(Graph&, Node&)> backward);
  bool any_requires_grad(std::initializer_list<Var> vars) const;

  std::vector<Node> nodes_;
};

}  // namespace msdetr::nn
