#include "regenlab/tensor.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "regenlab/errors.h"
#include "regenlab/kernels.h"

namespace regenlab {

namespace detail {

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Receives the node itself; reads this->grad, accumulates into parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  std::size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

using detail::TensorNode;

namespace {

thread_local int g_no_grad_depth = 0;

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::shared_ptr<TensorNode> make_leaf(std::vector<std::size_t> shape,
                                      std::vector<double> data) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  return n;
}

// Builds the output node. The graph is recorded only when grad mode is on and
// some parent requires grad; otherwise the result is a plain value.
Tensor make_op(std::vector<std::size_t> shape, std::vector<double> value,
               std::vector<std::shared_ptr<TensorNode>> parents, const char* op_name,
               std::function<void(TensorNode&)> backward_fn) {
  check_finite(value, op_name);
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (g_no_grad_depth == 0) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || t.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected a rank-2 tensor");
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor() = default;

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data length " +
                     std::to_string(data.size()));
  check_finite(data, "from_data");
  return Tensor(make_leaf(std::move(shape), std::move(data)));
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, double std) {
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& x : data) x = rng.normal(0.0, std);
  return Tensor(make_leaf(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const std::vector<std::size_t>& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_ ? node_->size() : 0; }

std::size_t Tensor::rows() const {
  if (node_->shape.empty()) throw ShapeError("rows: rank-0 tensor");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (node_->shape.size() < 2) throw ShapeError("cols: tensor rank < 2");
  return node_->shape[1];
}

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

double Tensor::at(std::size_t i) const { return node_->value.at(i); }
double Tensor::at(std::size_t i, std::size_t j) const {
  return node_->value.at(i * cols() + j);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  node_->requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad: no gradient populated");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!has_grad()) throw ContractError("grad: no gradient populated");
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->ensure_grad();
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::drop_grad() { node_->grad.clear(); }

Tensor Tensor::clone() const {
  auto n = make_leaf(node_->shape, node_->value);
  n->requires_grad = node_->requires_grad;
  return Tensor(std::move(n));
}

void Tensor::backward() {
  if (!node_) throw ContractError("backward: undefined tensor");
  if (size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(shape()));
  if (!node_->requires_grad)
    throw ContractError("backward: no graph recorded (nothing requires grad)");

  // Iterative post-order DFS; inputs land before the nodes that consume them.
  std::vector<std::shared_ptr<TensorNode>> topo;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<std::shared_ptr<TensorNode>, std::size_t>> stack;
  stack.emplace_back(node_, 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      auto p = top.first->parents[top.second++];
      if (p->requires_grad && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      topo.push_back(top.first);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] = 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
  for (const auto& n : topo) {
    if (!n->grad.empty()) check_finite(n->grad, "backward gradient");
  }
  // Consume the graph.
  for (const auto& n : topo) {
    n->parents.clear();
    n->backward_fn = nullptr;
  }
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_mode_enabled() { return g_no_grad_depth == 0; }

// ---------------------------------------------------------------- ops

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {an, bn}, "add", [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {an, bn}, "sub", [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {an, bn}, "mul", [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw NumericError("scale: non-finite factor");
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {an}, "scale", [an, c](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_rowwise");
  if (bias.shape().size() != 1 || bias.size() != x.cols())
    throw ShapeError("add_rowwise: bias must be rank-1 of length " + std::to_string(x.cols()));
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(x.size());
  const auto xv = x.data(), bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
  auto xn = x.node(), bn = bias.node();
  return make_op(x.shape(), std::move(out), {xn, bn}, "add_rowwise",
                 [xn, bn, rows, cols](TensorNode& self) {
                   if (xn->requires_grad) {
                     xn->ensure_grad();
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       xn->grad[i] += self.grad[i];
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     kernels::column_sum(self.grad.data(), bn->grad.data(), rows, cols);
                   }
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: inner dimensions " + std::to_string(k) + " vs " +
                     std::to_string(b.rows()));
  std::vector<double> out(m * n);
  kernels::matmul_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  auto an = a.node(), bn = b.node();
  return make_op({m, n}, std::move(out), {an, bn}, "matmul", [an, bn, m, k, n](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      // dA = G * B^T
      kernels::matmul_nt(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      // dB = A^T * G
      kernels::matmul_tn(an->value.data(), self.grad.data(), bn->grad.data(), m, k, n, true);
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw ShapeError("matmul_nt: inner dimensions " + std::to_string(k) + " vs " +
                     std::to_string(b.cols()));
  std::vector<double> out(m * n);
  kernels::matmul_nt(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  auto an = a.node(), bn = b.node();
  return make_op({m, n}, std::move(out), {an, bn}, "matmul_nt",
                 [an, bn, m, k, n](TensorNode& self) {
                   if (an->requires_grad) {
                     an->ensure_grad();
                     // dA = G * B
                     kernels::matmul_nn(self.grad.data(), bn->value.data(), an->grad.data(), m, n,
                                        k, true);
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     // dB = G^T * A
                     kernels::matmul_tn(self.grad.data(), an->value.data(), bn->grad.data(), m, n,
                                        k, true);
                   }
                 });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  kernels::relu_forward(x.data().data(), out.data(), x.size());
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {xn}, "relu", [xn](TensorNode& self) {
    xn->ensure_grad();
    kernels::relu_backward(xn->value.data(), self.grad.data(), xn->grad.data(), self.size());
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  kernels::gelu_forward(x.data().data(), out.data(), x.size());
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {xn}, "gelu", [xn](TensorNode& self) {
    xn->ensure_grad();
    kernels::gelu_backward(xn->value.data(), self.grad.data(), xn->grad.data(), self.size());
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.size() != cols || bias.size() != cols)
    throw ShapeError("layer_norm: gain/bias must have length " + std::to_string(cols));
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  kernels::layer_norm_forward(x.data().data(), gain.data().data(), bias.data().data(), out.data(),
                              xhat->data(), inv_std->data(), rows, cols, eps);
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_op(x.shape(), std::move(out), {xn, gn, bn}, "layer_norm",
                 [xn, gn, bn, xhat, inv_std, rows, cols](TensorNode& self) {
                   if (xn->requires_grad) {
                     xn->ensure_grad();
                     kernels::layer_norm_backward_x(self.grad.data(), gn->value.data(),
                                                    xhat->data(), inv_std->data(),
                                                    xn->grad.data(), rows, cols);
                   }
                   if (gn->requires_grad || bn->requires_grad) {
                     gn->ensure_grad();
                     bn->ensure_grad();
                     kernels::layer_norm_backward_params(self.grad.data(), xhat->data(),
                                                         gn->grad.data(), bn->grad.data(), rows,
                                                         cols);
                   }
                 });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t v = table.rows(), c = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw ContractError("embedding: id " + std::to_string(id) + " out of range [0," +
                          std::to_string(v) + ")");
  }
  const std::size_t n = ids.size();
  std::vector<double> out(n * c);
  const auto tv = table.data();
  for (std::size_t i = 0; i < n; ++i)
    std::memcpy(out.data() + i * c, tv.data() + static_cast<std::size_t>(ids[i]) * c,
                c * sizeof(double));
  auto tn = table.node();
  auto ids_copy = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return make_op({n, c}, std::move(out), {tn}, "embedding",
                 [tn, ids_copy, c](TensorNode& self) {
                   tn->ensure_grad();
                   // Scatter-add stays serial: repeated ids would race.
                   for (std::size_t i = 0; i < ids_copy->size(); ++i) {
                     double* dst = tn->grad.data() + static_cast<std::size_t>((*ids_copy)[i]) * c;
                     const double* src = self.grad.data() + i * c;
                     for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                   }
                 });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t batch, std::size_t seq, std::size_t heads) {
  require_matrix(q, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t d_model = q.cols();
  if (q.rows() != batch * seq)
    throw ShapeError("causal_attention: rows != batch*seq");
  if (d_model % heads != 0)
    throw ShapeError("causal_attention: d_model not divisible by heads");
  const std::size_t hd = d_model / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> out(q.size(), 0.0);
  // Softmax probabilities saved for backward: [batch, heads, seq, seq].
  auto probs = std::make_shared<std::vector<double>>(batch * heads * seq * seq, 0.0);
  const auto qv = q.data(), kv = k.data(), vv = v.data();

  const std::size_t tasks = batch * heads;
#pragma omp parallel for schedule(static)
  for (std::size_t task = 0; task < tasks; ++task) {
    const std::size_t b = task / heads, h = task % heads;
    const std::size_t off = h * hd;
    double* p_task = probs->data() + task * seq * seq;
    std::vector<double> row(seq);
    for (std::size_t t1 = 0; t1 < seq; ++t1) {
      const double* qrow = qv.data() + (b * seq + t1) * d_model + off;
      double maxs = -1e300;
      for (std::size_t t2 = 0; t2 <= t1; ++t2) {
        const double* krow = kv.data() + (b * seq + t2) * d_model + off;
        double s = 0.0;
        for (std::size_t j = 0; j < hd; ++j) s += qrow[j] * krow[j];
        s *= att_scale;
        row[t2] = s;
        if (s > maxs) maxs = s;
      }
      double denom = 0.0;
      for (std::size_t t2 = 0; t2 <= t1; ++t2) {
        row[t2] = std::exp(row[t2] - maxs);
        denom += row[t2];
      }
      double* orow = out.data() + (b * seq + t1) * d_model + off;
      double* prow = p_task + t1 * seq;
      for (std::size_t t2 = 0; t2 <= t1; ++t2) {
        const double p = row[t2] / denom;
        prow[t2] = p;
        const double* vrow = vv.data() + (b * seq + t2) * d_model + off;
        for (std::size_t j = 0; j < hd; ++j) orow[j] += p * vrow[j];
      }
    }
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  return make_op(
      q.shape(), std::move(out), {qn, kn, vn}, "causal_attention",
      [qn, kn, vn, probs, batch, seq, heads, hd, d_model, att_scale](TensorNode& self) {
        qn->ensure_grad();
        kn->ensure_grad();
        vn->ensure_grad();
        const std::size_t tasks = batch * heads;
        // Each (batch, head) task touches disjoint column slices of the grads.
#pragma omp parallel for schedule(static)
        for (std::size_t task = 0; task < tasks; ++task) {
          const std::size_t b = task / heads, h = task % heads;
          const std::size_t off = h * hd;
          const double* p_task = probs->data() + task * seq * seq;
          std::vector<double> dp(seq), ds(seq);
          for (std::size_t t1 = 0; t1 < seq; ++t1) {
            const double* grow = self.grad.data() + (b * seq + t1) * d_model + off;
            const double* prow = p_task + t1 * seq;
            // dV and dP
            double dot_pdp = 0.0;
            for (std::size_t t2 = 0; t2 <= t1; ++t2) {
              const double* vrow = vn->value.data() + (b * seq + t2) * d_model + off;
              double* dvrow = vn->grad.data() + (b * seq + t2) * d_model + off;
              double acc = 0.0;
              for (std::size_t j = 0; j < hd; ++j) {
                acc += grow[j] * vrow[j];
                dvrow[j] += prow[t2] * grow[j];
              }
              dp[t2] = acc;
              dot_pdp += prow[t2] * acc;
            }
            // softmax backward, then dQ / dK
            double* dqrow = qn->grad.data() + (b * seq + t1) * d_model + off;
            const double* qrow = qn->value.data() + (b * seq + t1) * d_model + off;
            for (std::size_t t2 = 0; t2 <= t1; ++t2) {
              const double g = prow[t2] * (dp[t2] - dot_pdp) * att_scale;
              const double* krow = kn->value.data() + (b * seq + t2) * d_model + off;
              double* dkrow = kn->grad.data() + (b * seq + t2) * d_model + off;
              for (std::size_t j = 0; j < hd; ++j) {
                dqrow[j] += g * krow[j];
                dkrow[j] += g * qrow[j];
              }
            }
          }
        }
      });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_matrix(logits, "softmax_cross_entropy");
  const std::size_t n = logits.rows(), vsize = logits.cols();
  if (targets.size() != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " rows");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= vsize)
      throw ContractError("softmax_cross_entropy: target id " + std::to_string(t) +
                          " outside vocabulary");
  }
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  const auto lv = logits.data();
  std::vector<double> losses(n);
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = lv.data() + r * vsize;
    double m = row[0];
    for (std::size_t c = 1; c < vsize; ++c) m = std::max(m, row[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < vsize; ++c) denom += std::exp(row[c] - m);
    const double lse = m + std::log(denom);
    double* prow = probs->data() + r * vsize;
    for (std::size_t c = 0; c < vsize; ++c) prow[c] = std::exp(row[c] - lse);
    losses[r] = lse - row[targets[r]];
  }
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) total += losses[r];
  const double mean_loss = total / static_cast<double>(n);

  auto ln = logits.node();
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  return make_op({1}, {mean_loss}, {ln}, "softmax_cross_entropy",
                 [ln, probs, tgt, n, vsize](TensorNode& self) {
                   ln->ensure_grad();
                   const double g = self.grad[0] / static_cast<double>(n);
#pragma omp parallel for schedule(static)
                   for (std::size_t r = 0; r < n; ++r) {
                     const double* prow = probs->data() + r * vsize;
                     double* grow = ln->grad.data() + r * vsize;
                     const std::size_t t = static_cast<std::size_t>((*tgt)[r]);
                     for (std::size_t c = 0; c < vsize; ++c) grow[c] += g * prow[c];
                     grow[t] -= g;
                   }
                 });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  auto xn = x.node();
  return make_op({1}, {total}, {xn}, "sum", [xn](TensorNode& self) {
    xn->ensure_grad();
    const double g = self.grad[0];
    for (auto& gv : xn->grad) gv += g;
  });
}

Tensor custom_unary_op(
    const Tensor& x,
    std::function<std::vector<double>(std::span<const double>)> forward,
    std::function<std::vector<double>(std::span<const double>, std::span<const double>)>
        backward) {
  std::vector<double> out = forward(x.data());
  if (out.size() != x.size())
    throw ShapeError("custom_unary_op: forward changed the element count");
  auto xn = x.node();
  auto bwd = std::make_shared<decltype(backward)>(std::move(backward));
  return make_op(x.shape(), std::move(out), {xn}, "custom_unary_op",
                 [xn, bwd](TensorNode& self) {
                   xn->ensure_grad();
                   std::vector<double> gx = (*bwd)(self.grad, xn->value);
                   if (gx.size() != xn->grad.size())
                     throw ShapeError("custom_unary_op: backward returned wrong size");
                   for (std::size_t i = 0; i < gx.size(); ++i) xn->grad[i] += gx[i];
                 });
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  if (!(step > 0.0) || step > 1e-2)
    throw ContractError("grad_check: step must be in (0, 1e-2]");
  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  Tensor y = f(probe);
  if (y.size() != 1) throw ContractError("grad_check: f must be scalar-valued");
  y.backward();
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  double max_err = 0.0;
  {
    NoGradGuard ng;
    auto vals = probe.mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + step;
      const double fp = f(probe).item();
      vals[i] = orig - step;
      const double fm = f(probe).item();
      vals[i] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      if (!std::isfinite(fd)) throw NumericError("grad_check: non-finite finite-difference value");
      const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace regenlab
