#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "regenlab/rng.h"

namespace regenlab {

namespace detail {
struct TensorNode;
}

/// Dense row-major tensor of doubles with reverse-mode autodiff.
///
/// A Tensor is a cheap handle to a shared node. Ops record a dynamic graph
/// while any input has requires_grad set (and grad mode is on); backward()
/// on a scalar populates leaf grads and frees the graph. Every forward and
/// backward buffer is checked for NaN/Inf and raises NumericError instead of
/// propagating.
class Tensor {
 public:
  Tensor();  // empty tensor, size 0

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data);
  static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double std = 1.0);
  static Tensor scalar(double value);

  const std::vector<std::size_t>& shape() const;
  std::size_t size() const;
  std::size_t rows() const;  // shape[0] (rank >= 1)
  std::size_t cols() const;  // shape[1] (rank >= 2)
  bool defined() const { return node_ != nullptr; }

  std::span<const double> data() const;
  // Direct mutation; only valid between passes (never on a live graph).
  std::span<double> mutable_data();
  double item() const;  // value of a 1-element tensor
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();   // allocates if needed
  void drop_grad();   // back to the "no grad populated" state

  /// Reverse pass from a scalar. Populates grads of every reachable
  /// requires_grad tensor, then consumes the graph.
  void backward();

  /// Deep copy of values (fresh node, no graph history, keeps requires_grad).
  Tensor clone() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// While alive, ops do not record the graph (inference mode). Nestable.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_mode_enabled();

// ---- differentiable ops ----

Tensor add(const Tensor& a, const Tensor& b);              // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);              // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_rowwise(const Tensor& x, const Tensor& bias);   // [N,C] + [C]
Tensor matmul(const Tensor& a, const Tensor& b);           // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);        // [m,k]x[n,k]^T -> [m,n]
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor embedding(const Tensor& table, std::span<const int> ids);  // [V,C] -> [N,C]
/// Multi-head causal self-attention over q,k,v of shape [batch*seq, d_model].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t batch, std::size_t seq, std::size_t heads);
/// Mean over rows of -log softmax(logits)[target]. Scalar output.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets);
Tensor sum(const Tensor& x);  // scalar

/// Extension point for custom differentiable ops (used by tests to inject a
/// deliberately wrong backward). `backward` receives (grad_out, x_value) and
/// must return the gradient w.r.t. x.
Tensor custom_unary_op(const Tensor& x,
                       std::function<std::vector<double>(std::span<const double>)> forward,
                       std::function<std::vector<double>(std::span<const double>,
                                                         std::span<const double>)> backward);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued f at x. step must be in (0, 1e-2].
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double step = 1e-5);

}  // namespace regenlab
