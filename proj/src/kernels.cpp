#include "regenlab/kernels.h"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace regenlab::kernels {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

// One output row of c = a*b, streaming over b rows (ikj order, vectorizes).
inline void nn_row(const double* a_row, const double* b, double* c_row,
                   std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::memset(c_row, 0, n * sizeof(double));
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a_row[p];
    const double* b_row = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

// One dot product. The simd reduction fixes a vector accumulation order at
// compile time, identical for the serial and parallel callers, so results
// stay deterministic for a given binary.
inline double nt_dot(const double* a_row, const double* b_row, std::size_t k) {
  double acc = 0.0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
  return acc;
}

// A 4-row tile of c = a*b^T. Each b row is streamed once per four output
// rows, which is what bounds this kernel. Per-element arithmetic is identical
// for every tile width, so serial and parallel results match bit for bit.
inline void nt_tile(const double* a, const double* b, double* c, std::size_t row0,
                    std::size_t rows, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t j = 0; j < n; ++j) {
    const double* b_row = b + j * k;
    for (std::size_t r = row0; r < row0 + rows; ++r) {
      const double acc = nt_dot(a + r * k, b_row, k);
      c[r * n + j] = accumulate ? c[r * n + j] + acc : acc;
    }
  }
}

// One output row of c = a^T*b (row index runs over a's columns).
inline void tn_row(const double* a, const double* b, double* c_row,
                   std::size_t m, std::size_t k, std::size_t n, std::size_t row,
                   bool accumulate) {
  if (!accumulate) std::memset(c_row, 0, n * sizeof(double));
  for (std::size_t i = 0; i < m; ++i) {
    const double av = a[i * k + row];
    const double* b_row = b + i * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

inline double gelu_one(double x) {
  return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
}

inline double gelu_grad_one(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
         x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline void layer_norm_row(const double* x, const double* gain, const double* bias,
                           double* y, double* xhat, double* inv_std,
                           std::size_t cols, double eps, std::size_t r) {
  const double* xr = x + r * cols;
  double mean = 0.0;
  for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
  mean /= static_cast<double>(cols);
  double var = 0.0;
  for (std::size_t c = 0; c < cols; ++c) {
    const double d = xr[c] - mean;
    var += d * d;
  }
  var /= static_cast<double>(cols);
  const double is = 1.0 / std::sqrt(var + eps);
  inv_std[r] = is;
  double* yr = y + r * cols;
  double* hr = xhat + r * cols;
  for (std::size_t c = 0; c < cols; ++c) {
    const double h = (xr[c] - mean) * is;
    hr[c] = h;
    yr[c] = gain[c] * h + bias[c];
  }
}

inline void layer_norm_bx_row(const double* gy, const double* gain, const double* xhat,
                              const double* inv_std, double* gx,
                              std::size_t cols, std::size_t r) {
  const double* gr = gy + r * cols;
  const double* hr = xhat + r * cols;
  double* or_ = gx + r * cols;
  double sum_g = 0.0, sum_gh = 0.0;
  for (std::size_t c = 0; c < cols; ++c) {
    const double gh = gr[c] * gain[c];
    sum_g += gh;
    sum_gh += gh * hr[c];
  }
  const double inv_n = 1.0 / static_cast<double>(cols);
  const double is = inv_std[r];
  for (std::size_t c = 0; c < cols; ++c) {
    const double gh = gr[c] * gain[c];
    or_[c] += is * (gh - inv_n * sum_g - hr[c] * inv_n * sum_gh);
  }
}

}  // namespace

// ---------------------------------------------------------------- serial

namespace serial {

void matmul_nn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) nn_row(a + i * k, b, c + i * n, k, n, accumulate);
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; i += 4)
    nt_tile(a, b, c, i, std::min<std::size_t>(4, m - i), k, n, accumulate);
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t r = 0; r < k; ++r) tn_row(a, b, c + r * n, m, k, n, r, accumulate);
}

void gelu_forward(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu_backward(const double* x, const double* gy, double* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * gelu_grad_one(x[i]);
}

void relu_forward(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(const double* x, const double* gy, double* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > 0.0 ? gy[i] : 0.0;
}

void layer_norm_forward(const double* x, const double* gain, const double* bias,
                        double* y, double* xhat, double* inv_std,
                        std::size_t rows, std::size_t cols, double eps) {
  for (std::size_t r = 0; r < rows; ++r)
    layer_norm_row(x, gain, bias, y, xhat, inv_std, cols, eps, r);
}

void layer_norm_backward_x(const double* gy, const double* gain, const double* xhat,
                           const double* inv_std, double* gx,
                           std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    layer_norm_bx_row(gy, gain, xhat, inv_std, gx, cols, r);
}

void layer_norm_backward_params(const double* gy, const double* xhat,
                                double* ggain, double* gbias,
                                std::size_t rows, std::size_t cols) {
  for (std::size_t c = 0; c < cols; ++c) {
    double sg = 0.0, sb = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      sg += gy[r * cols + c] * xhat[r * cols + c];
      sb += gy[r * cols + c];
    }
    ggain[c] += sg;
    gbias[c] += sb;
  }
}

void column_sum(const double* x, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t c = 0; c < cols; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) s += x[r * cols + c];
    out[c] += s;
  }
}

}  // namespace serial

// ---------------------------------------------------------------- OpenMP

// Parallel thresholds: below these the loop runs serially to skip the fork
// overhead. Tuned loosely; correctness does not depend on them.
namespace {
constexpr std::size_t kParRows = 8;
constexpr std::size_t kParElems = 4096;
}  // namespace

void matmul_nn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (m < kParRows) {
    serial::matmul_nn(a, b, c, m, k, n, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) nn_row(a + i * k, b, c + i * n, k, n, accumulate);
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (m < kParRows) {
    serial::matmul_nt(a, b, c, m, k, n, accumulate);
    return;
  }
  const std::size_t n_tiles = (m + 3) / 4;
#pragma omp parallel for schedule(static)
  for (std::size_t t = 0; t < n_tiles; ++t) {
    const std::size_t i = t * 4;
    nt_tile(a, b, c, i, std::min<std::size_t>(4, m - i), k, n, accumulate);
  }
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (k < kParRows) {
    serial::matmul_tn(a, b, c, m, k, n, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < k; ++r) tn_row(a, b, c + r * n, m, k, n, r, accumulate);
}

void gelu_forward(const double* x, double* y, std::size_t n) {
  if (n < kParElems) {
    serial::gelu_forward(x, y, n);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu_backward(const double* x, const double* gy, double* gx, std::size_t n) {
  if (n < kParElems) {
    serial::gelu_backward(x, gy, gx, n);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * gelu_grad_one(x[i]);
}

void relu_forward(const double* x, double* y, std::size_t n) {
  if (n < kParElems) {
    serial::relu_forward(x, y, n);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(const double* x, const double* gy, double* gx, std::size_t n) {
  if (n < kParElems) {
    serial::relu_backward(x, gy, gx, n);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > 0.0 ? gy[i] : 0.0;
}

void layer_norm_forward(const double* x, const double* gain, const double* bias,
                        double* y, double* xhat, double* inv_std,
                        std::size_t rows, std::size_t cols, double eps) {
  if (rows < kParRows) {
    serial::layer_norm_forward(x, gain, bias, y, xhat, inv_std, rows, cols, eps);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r)
    layer_norm_row(x, gain, bias, y, xhat, inv_std, cols, eps, r);
}

void layer_norm_backward_x(const double* gy, const double* gain, const double* xhat,
                           const double* inv_std, double* gx,
                           std::size_t rows, std::size_t cols) {
  if (rows < kParRows) {
    serial::layer_norm_backward_x(gy, gain, xhat, inv_std, gx, rows, cols);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r)
    layer_norm_bx_row(gy, gain, xhat, inv_std, gx, cols, r);
}

void layer_norm_backward_params(const double* gy, const double* xhat,
                                double* ggain, double* gbias,
                                std::size_t rows, std::size_t cols) {
  if (cols < kParRows) {
    serial::layer_norm_backward_params(gy, xhat, ggain, gbias, rows, cols);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < cols; ++c) {
    double sg = 0.0, sb = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      sg += gy[r * cols + c] * xhat[r * cols + c];
      sb += gy[r * cols + c];
    }
    ggain[c] += sg;
    gbias[c] += sb;
  }
}

void column_sum(const double* x, double* out, std::size_t rows, std::size_t cols) {
  if (cols < kParRows || rows * cols < kParElems) {
    serial::column_sum(x, out, rows, cols);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < cols; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) s += x[r * cols + c];
    out[c] += s;
  }
}

}  // namespace regenlab::kernels
