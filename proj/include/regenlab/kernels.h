#pragma once

#include <cstddef>

namespace regenlab::kernels {

// Dense double-precision kernels behind the tensor ops. Every kernel exists
// twice: a plain serial reference under kernels::serial, and an OpenMP
// version at namespace scope. The parallel versions split work so that each
// output element is produced by exactly one thread with the same inner
// accumulation order as the serial code, so the two are bit-identical and
// results do not depend on the thread count. tools/bench_kernels.cpp compares
// their throughput.
//
// All matrices are row-major. `accumulate` adds into `c` instead of
// overwriting it (used by gradient accumulation).

namespace serial {

// c[m,n] = a[m,k] * b[k,n]
void matmul_nn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// c[m,n] = a[m,k] * b[n,k]^T
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// c[k,n] = a[m,k]^T * b[m,n]
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate);

void gelu_forward(const double* x, double* y, std::size_t n);
void gelu_backward(const double* x, const double* gy, double* gx, std::size_t n);

void relu_forward(const double* x, double* y, std::size_t n);
void relu_backward(const double* x, const double* gy, double* gx, std::size_t n);

// Per-row normalization over `cols`: y = gain * (x - mean) / sqrt(var + eps) + bias.
// inv_std[rows] and xhat[rows*cols] are saved for the backward pass.
void layer_norm_forward(const double* x, const double* gain, const double* bias,
                        double* y, double* xhat, double* inv_std,
                        std::size_t rows, std::size_t cols, double eps);
void layer_norm_backward_x(const double* gy, const double* gain, const double* xhat,
                           const double* inv_std, double* gx,
                           std::size_t rows, std::size_t cols);
void layer_norm_backward_params(const double* gy, const double* xhat,
                                double* ggain, double* gbias,
                                std::size_t rows, std::size_t cols);

// Column sums: out[c] += sum_r x[r,c]. Used for bias gradients.
void column_sum(const double* x, double* out, std::size_t rows, std::size_t cols);

}  // namespace serial

void matmul_nn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate);

void gelu_forward(const double* x, double* y, std::size_t n);
void gelu_backward(const double* x, const double* gy, double* gx, std::size_t n);

void relu_forward(const double* x, double* y, std::size_t n);
void relu_backward(const double* x, const double* gy, double* gx, std::size_t n);

void layer_norm_forward(const double* x, const double* gain, const double* bias,
                        double* y, double* xhat, double* inv_std,
                        std::size_t rows, std::size_t cols, double eps);
void layer_norm_backward_x(const double* gy, const double* gain, const double* xhat,
                           const double* inv_std, double* gx,
                           std::size_t rows, std::size_t cols);
void layer_norm_backward_params(const double* gy, const double* xhat,
                                double* ggain, double* gbias,
                                std::size_t rows, std::size_t cols);

void column_sum(const double* x, double* out, std::size_t rows, std::size_t cols);

}  // namespace regenlab::kernels
