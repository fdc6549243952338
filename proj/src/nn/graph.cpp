// SPDX-License-Identifier: Apache-2.0
#include "msdetr/nn/graph.hpp"

#include <cmath>
#include <stdexcept>

namespace msdetr::nn {

Var Graph::push(Matrix value, bool requires_grad,
                std::function<void(Graph&, Node&)> backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

bool Graph::any_requires_grad(std::initializer_list<Var> vars) const {
  for (Var v : vars) {
    if (nodes_[v.id].requires_grad) return true;
  }
  return false;
}

Var Graph::input(Matrix value) { return push(std::move(value), false, nullptr); }

Var Graph::param(Parameter& p) {
  Node node;
  node.param = &p;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Graph::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.param ? n.param->value : n.value;
}

Matrix& Graph::grad(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.size() == 0) {
    const Matrix& val = n.param ? n.param->value : n.value;
    n.grad.setZero(val.rows(), val.cols());
  }
  return n.grad;
}

void Graph::backward() {
  for (auto i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param) {
      n.param->grad += n.grad;
    } else if (n.backward) {
      n.backward(*this, n);
    }
  }
}

Var Graph::matmul(Var a, Var b) {
  Matrix out;
  out.noalias() = value(a) * value(b);
  return push(std::move(out), any_requires_grad({a, b}), [a, b](Graph& g, Node& n) {
    if (g.requires_grad(a)) g.grad(a).noalias() += n.grad * g.value(b).transpose();
    if (g.requires_grad(b)) g.grad(b).noalias() += g.value(a).transpose() * n.grad;
  });
}

Var Graph::linear(Var x, Var w, Var b) {
  Matrix out;
  out.noalias() = value(x) * value(w);
  out.rowwise() += value(b).row(0);
  return push(std::move(out), any_requires_grad({x, w, b}), [x, w, b](Graph& g, Node& n) {
    if (g.requires_grad(x)) g.grad(x).noalias() += n.grad * g.value(w).transpose();
    if (g.requires_grad(w)) g.grad(w).noalias() += g.value(x).transpose() * n.grad;
    if (g.requires_grad(b)) g.grad(b) += n.grad.colwise().sum();
  });
}

Var Graph::add(Var a, Var b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
    throw std::invalid_argument("add: shape mismatch");
  }
  Matrix out = value(a) + value(b);
  return push(std::move(out), any_requires_grad({a, b}), [a, b](Graph& g, Node& n) {
    if (g.requires_grad(a)) g.grad(a) += n.grad;
    if (g.requires_grad(b)) g.grad(b) += n.grad;
  });
}

Var Graph::relu(Var x) {
  Matrix out = value(x).cwiseMax(Real(0));
  return push(std::move(out), any_requires_grad({x}), [x](Graph& g, Node& n) {
    g.grad(x).array() += (n.value.array() > Real(0)).select(n.grad.array(), Real(0));
  });
}

Var Graph::sigmoid(Var x) {
  Matrix out = value(x).unaryExpr([](Real v) {
    if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
    const Real e = std::exp(v);
    return e / (Real(1) + e);
  });
  return push(std::move(out), any_requires_grad({x}), [x](Graph& g, Node& n) {
    g.grad(x).array() += n.grad.array() * n.value.array() * (Real(1) - n.value.array());
  });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, Real eps) {
  const Matrix& in = value(x);
  const auto rows = in.rows();
  const auto dim = in.cols();
  Matrix xhat(rows, dim);
  Eigen::Matrix<Real, Eigen::Dynamic, 1> inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Real mean = in.row(r).mean();
    const Real var = (in.row(r).array() - mean).square().mean();
    inv_std(r) = Real(1) / std::sqrt(var + eps);
    xhat.row(r) = (in.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = xhat;
  out.array().rowwise() *= value(gamma).row(0).array();
  out.rowwise() += value(beta).row(0);
  return push(std::move(out), any_requires_grad({x, gamma, beta}),
              [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                  Graph& g, Node& n) {
                if (g.requires_grad(gamma)) {
                  g.grad(gamma) += (n.grad.array() * xhat.array()).colwise().sum().matrix();
                }
                if (g.requires_grad(beta)) g.grad(beta) += n.grad.colwise().sum();
                if (!g.requires_grad(x)) return;
                Matrix dxhat = n.grad;
                dxhat.array().rowwise() *= g.value(gamma).row(0).array();
                const auto d = static_cast<Real>(dxhat.cols());
                Matrix& gx = g.grad(x);
                for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                  const Real sum = dxhat.row(r).sum();
                  const Real dot = dxhat.row(r).dot(xhat.row(r));
                  gx.row(r).array() += inv_std(r) / d *
                                       (d * dxhat.row(r).array() - sum -
                                        xhat.row(r).array() * dot);
                }
              });
}

Var Graph::attention(Var q, Var k, Var v, int heads) {
  const Matrix& qv = value(q);
  const Matrix& kv = value(k);
  const Matrix& vv = value(v);
  const auto dim = qv.cols();
  if (heads <= 0 || dim % heads != 0 || kv.cols() != dim || vv.cols() != dim ||
      kv.rows() != vv.rows()) {
    throw std::invalid_argument("attention: inconsistent shapes");
  }
  const auto head_dim = dim / heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  Matrix out(qv.rows(), dim);
  for (int h = 0; h < heads; ++h) {
    const auto c0 = h * head_dim;
    Matrix s;
    s.noalias() = qv.middleCols(c0, head_dim) * kv.middleCols(c0, head_dim).transpose();
    s *= scale;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const Real mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(c0, head_dim).noalias() = s * vv.middleCols(c0, head_dim);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return push(std::move(out), any_requires_grad({q, k, v}),
              [q, k, v, heads, head_dim, scale, probs = std::move(probs)](Graph& g, Node& n) {
                const Matrix& qv = g.value(q);
                const Matrix& kv = g.value(k);
                const Matrix& vv = g.value(v);
                const bool gq = g.requires_grad(q);
                const bool gk = g.requires_grad(k);
                const bool gv = g.requires_grad(v);
                for (int h = 0; h < heads; ++h) {
                  const auto c0 = h * head_dim;
                  const Matrix& p = probs[static_cast<std::size_t>(h)];
                  const auto dout = n.grad.middleCols(c0, head_dim);
                  if (gv) g.grad(v).middleCols(c0, head_dim).noalias() += p.transpose() * dout;
                  Matrix dp;
                  dp.noalias() = dout * vv.middleCols(c0, head_dim).transpose();
                  const Eigen::Matrix<Real, Eigen::Dynamic, 1> rowdot =
                      (dp.array() * p.array()).rowwise().sum();
                  Matrix ds = p.array() * (dp.array().colwise() - rowdot.array());
                  ds *= scale;
                  if (gq) {
                    g.grad(q).middleCols(c0, head_dim).noalias() +=
                        ds * kv.middleCols(c0, head_dim);
                  }
                  if (gk) {
                    g.grad(k).middleCols(c0, head_dim).noalias() +=
                        ds.transpose() * qv.middleCols(c0, head_dim);
                  }
                }
              });
}

Var Graph::conv2d(Var x, int height, int width, Var w, Var b, int kernel, int stride,
                  int pad) {
  const Matrix& in = value(x);
  const auto cin = in.cols();
  if (in.rows() != static_cast<Eigen::Index>(height) * width) {
    throw std::invalid_argument("conv2d: input rows do not match height*width");
  }
  if (value(w).rows() != kernel * kernel * cin) {
    throw std::invalid_argument("conv2d: weight rows do not match kernel*kernel*Cin");
  }
  const int out_h = (height + 2 * pad - kernel) / stride + 1;
  const int out_w = (width + 2 * pad - kernel) / stride + 1;
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(out_h) * out_w, kernel * kernel * cin);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const auto row = static_cast<Eigen::Index>(oy) * out_w + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= width) continue;
          cols.row(row).segment((ky * kernel + kx) * cin, cin) =
              in.row(static_cast<Eigen::Index>(iy) * width + ix);
        }
      }
    }
  }
  Matrix out;
  out.noalias() = cols * value(w);
  out.rowwise() += value(b).row(0);
  return push(std::move(out), any_requires_grad({x, w, b}),
              [=, cols = std::move(cols)](Graph& g, Node& n) {
                if (g.requires_grad(w)) g.grad(w).noalias() += cols.transpose() * n.grad;
                if (g.requires_grad(b)) g.grad(b) += n.grad.colwise().sum();
                if (!g.requires_grad(x)) return;
                Matrix dcols;
                dcols.noalias() = n.grad * g.value(w).transpose();
                Matrix& gx = g.grad(x);
                for (int oy = 0; oy < out_h; ++oy) {
                  for (int ox = 0; ox < out_w; ++ox) {
                    const auto row = static_cast<Eigen::Index>(oy) * out_w + ox;
                    for (int ky = 0; ky < kernel; ++ky) {
                      const int iy = oy * stride - pad + ky;
                      if (iy < 0 || iy >= height) continue;
                      for (int kx = 0; kx < kernel; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= width) continue;
                        gx.row(static_cast<Eigen::Index>(iy) * width + ix) +=
                            dcols.row(row).segment((ky * kernel + kx) * cin, cin);
                      }
                    }
                  }
                }
              });
}

}  // namespace msdetr::nn
