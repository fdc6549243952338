// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <vector>

#include "msdetr/nn/graph.hpp"

namespace msdetr::nn {

using Rng = std::mt19937_64;

/// Non-owning list of the parameters of a module tree.
using ParamList = std::vector<Parameter*>;

Matrix xavier_uniform(int fan_in, int fan_out, Rng& rng);
Matrix truncated_normal(int rows, int cols, double stddev, Rng& rng);

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng);
  Var operator()(Graph& g, Var x);
  void collect(ParamList& out);
};

struct LayerNorm {
  Parameter gamma;
  Parameter beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim);
  Var operator()(Graph& g, Var x);
  void collect(ParamList& out);
};

struct Conv2d {
  Parameter weight;  // (k*k*in) x out
  Parameter bias;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int kernel, int stride, int pad, Rng& rng);
  Var operator()(Graph& g, Var x, int height, int width);
  int out_size(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
  void collect(ParamList& out);
};

struct MultiHeadAttention {
  Linear q_proj, k_proj, v_proj, out_proj;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int dim, int heads, Rng& rng);
  Var operator()(Graph& g, Var query, Var key, Var value);
  void collect(ParamList& out);
};

/// Post-norm residual feed-forward block: norm(x + W2 relu(W1 x)).
struct FeedForward {
  Linear fc1, fc2;
  LayerNorm norm;

  FeedForward() = default;
  FeedForward(const std::string& name, int dim, int hidden, Rng& rng);
  Var operator()(Graph& g, Var x);
  void collect(ParamList& out);
};

/// Three-layer ReLU MLP ending in a sigmoid, emitting (cx, cy, w, h).
struct BoxHead {
  Linear fc1, fc2, fc3;

  BoxHead() = default;
  BoxHead(const std::string& name, int dim, Rng& rng);
  Var operator()(Graph& g, Var x);
  void collect(ParamList& out);
};

/// Single linear layer producing class logits; bias starts at a 1% prior.
struct ClassHead {
  Linear fc;

  ClassHead() = default;
  ClassHead(const std::string& name, int dim, int num_classes, Rng& rng);
  Var operator()(Graph& g, Var x) { return fc(g, x); }
  void collect(ParamList& out) { fc.collect(out); }
};

/// Decoupled-weight-decay Adam.
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void step(const ParamList& params);
  long steps() const { return step_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  long step_ = 0;
  std::vector<Matrix> m_, v_;
};

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

void zero_grad(const ParamList& params);

}  // namespace msdetr::nn
