// SPDX-License-Identifier: Apache-2.0
#include "msdetr/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace msdetr::nn {

Matrix xavier_uniform(int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(dist(rng));
  return m;
}

Matrix truncated_normal(int rows, int cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = dist(rng);
    while (std::abs(v) > 2.0) v = dist(rng);
    m.data()[i] = static_cast<Real>(v * stddev);
  }
  return m;
}

Linear::Linear(const std::string& name, int in, int out, Rng& rng)
    : weight(name + ".weight", xavier_uniform(in, out, rng)),
      bias(name + ".bias", Matrix::Zero(1, out)) {}

Var Linear::operator()(Graph& g, Var x) { return g.linear(x, g.param(weight), g.param(bias)); }

void Linear::collect(ParamList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

LayerNorm::LayerNorm(const std::string& name, int dim)
    : gamma(name + ".gamma", Matrix::Ones(1, dim)), beta(name + ".beta", Matrix::Zero(1, dim)) {}

Var LayerNorm::operator()(Graph& g, Var x) {
  return g.layer_norm(x, g.param(gamma), g.param(beta));
}

void LayerNorm::collect(ParamList& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Conv2d::Conv2d(const std::string& name, int in, int out, int k, int s, int p, Rng& rng)
    : kernel(k), stride(s), pad(p) {
  // He-uniform, fan_in = k*k*in.
  const double limit = std::sqrt(6.0 / (k * k * in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix w(k * k * in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Real>(dist(rng));
  weight = Parameter(name + ".weight", std::move(w));
  bias = Parameter(name + ".bias", Matrix::Zero(1, out));
}

Var Conv2d::operator()(Graph& g, Var x, int height, int width) {
  return g.conv2d(x, height, width, g.param(weight), g.param(bias), kernel, stride, pad);
}

void Conv2d::collect(ParamList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, int dim, int h, Rng& rng)
    : q_proj(name + ".q", dim, dim, rng),
      k_proj(name + ".k", dim, dim, rng),
      v_proj(name + ".v", dim, dim, rng),
      out_proj(name + ".out", dim, dim, rng),
      heads(h) {
  if (dim % h != 0) throw std::invalid_argument("embed_dim must be divisible by num_heads");
}

Var MultiHeadAttention::operator()(Graph& g, Var query, Var key, Var value) {
  const Var attended = g.attention(q_proj(g, query), k_proj(g, key), v_proj(g, value), heads);
  return out_proj(g, attended);
}

void MultiHeadAttention::collect(ParamList& out) {
  q_proj.collect(out);
  k_proj.collect(out);
  v_proj.collect(out);
  out_proj.collect(out);
}

FeedForward::FeedForward(const std::string& name, int dim, int hidden, Rng& rng)
    : fc1(name + ".fc1", dim, hidden, rng),
      fc2(name + ".fc2", hidden, dim, rng),
      norm(name + ".norm", dim) {}

Var FeedForward::operator()(Graph& g, Var x) {
  const Var h = fc2(g, g.relu(fc1(g, x)));
  return norm(g, g.add(x, h));
}

void FeedForward::collect(ParamList& out) {
  fc1.collect(out);
  fc2.collect(out);
  norm.collect(out);
}

BoxHead::BoxHead(const std::string& name, int dim, Rng& rng)
    : fc1(name + ".fc1", dim, dim, rng),
      fc2(name + ".fc2", dim, dim, rng),
      fc3(name + ".fc3", dim, 4, rng) {}

Var BoxHead::operator()(Graph& g, Var x) {
  const Var h = g.relu(fc2(g, g.relu(fc1(g, x))));
  return g.sigmoid(fc3(g, h));
}

void BoxHead::collect(ParamList& out) {
  fc1.collect(out);
  fc2.collect(out);
  fc3.collect(out);
}

ClassHead::ClassHead(const std::string& name, int dim, int num_classes, Rng& rng)
    : fc(name + ".fc", dim, num_classes, rng) {
  constexpr double kPrior = 0.01;
  fc.bias.value.setConstant(static_cast<Real>(-std::log((1.0 - kPrior) / kPrior)));
}

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(const ParamList& params) {
  if (m_.empty()) {
    for (const Parameter* p : params) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("AdamW: parameter list changed");
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  const auto b1 = static_cast<Real>(beta1_);
  const auto b2 = static_cast<Real>(beta2_);
  const auto step_size = static_cast<Real>(lr_ / bc1);
  const auto inv_bc2 = static_cast<Real>(1.0 / bc2);
  const auto eps = static_cast<Real>(eps_);
  const auto decay = static_cast<Real>(1.0 - lr_ * weight_decay_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    m_[i] = b1 * m_[i] + (Real(1) - b1) * p.grad;
    v_[i] = b2 * v_[i] + (Real(1) - b2) * p.grad.cwiseProduct(p.grad);
    p.value *= decay;
    p.value.array() -=
        step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
  }
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += static_cast<double>(p->grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<Real>(max_norm / (norm + 1e-6));
    for (Parameter* p : params) p->grad *= scale;
  }
  return norm;
}

void zero_grad(const ParamList& params) {
  for (Parameter* p : params) p->zero_grad();
}

}  // namespace msdetr::nn
