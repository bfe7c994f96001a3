// Compares the serial reference kernels against the OpenMP versions and
// verifies they produce bit-identical output while timing both.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "regenlab/kernels.h"
#include "regenlab/rng.h"

using namespace regenlab;
using Clock = std::chrono::steady_clock;

namespace {

double time_it(const std::function<void()>& fn, int iters) {
  fn();  // warmup
  const auto start = Clock::now();
  for (int i = 0; i < iters; ++i) fn();
  const auto elapsed = std::chrono::duration<double>(Clock::now() - start).count();
  return elapsed / iters;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void report(const char* name, double flops, double t_serial, double t_omp, bool exact) {
  std::printf("%-22s serial %8.2f ms (%6.2f GF/s)   omp %8.2f ms (%6.2f GF/s)   x%.2f   %s\n",
              name, t_serial * 1e3, flops / t_serial / 1e9, t_omp * 1e3, flops / t_omp / 1e9,
              t_serial / t_omp, exact ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serial vs OpenMP kernel benchmark"};
  std::size_t m = 768, k = 128, n = 512;
  int iters = 10;
  app.add_option("--m", m, "rows of A");
  app.add_option("--k", k, "inner dimension");
  app.add_option("--n", n, "columns of B");
  app.add_option("--iters", iters, "timing iterations");
  CLI11_PARSE(app, argc, argv);

  std::printf("threads: %d   sizes: %zux%zu * %zux%zu\n", omp_get_max_threads(), m, k, k, n);

  Rng rng(1234);
  std::vector<double> a(m * k), b(k * n), bt(n * k), c1(m * n), c2(m * n);
  for (auto& x : a) x = rng.normal();
  for (auto& x : b) x = rng.normal();
  for (auto& x : bt) x = rng.normal();

  const double mm_flops = 2.0 * m * k * n;

  double ts = time_it([&] { kernels::serial::matmul_nn(a.data(), b.data(), c1.data(), m, k, n, false); }, iters);
  double tp = time_it([&] { kernels::matmul_nn(a.data(), b.data(), c2.data(), m, k, n, false); }, iters);
  report("matmul_nn", mm_flops, ts, tp, bits_equal(c1, c2));

  ts = time_it([&] { kernels::serial::matmul_nt(a.data(), bt.data(), c1.data(), m, k, n, false); }, iters);
  tp = time_it([&] { kernels::matmul_nt(a.data(), bt.data(), c2.data(), m, k, n, false); }, iters);
  report("matmul_nt", mm_flops, ts, tp, bits_equal(c1, c2));

  std::vector<double> g(m * n), d1(k * n), d2(k * n);
  for (auto& x : g) x = rng.normal();
  ts = time_it([&] { std::fill(d1.begin(), d1.end(), 0.0); kernels::serial::matmul_tn(a.data(), g.data(), d1.data(), m, k, n, true); }, iters);
  tp = time_it([&] { std::fill(d2.begin(), d2.end(), 0.0); kernels::matmul_tn(a.data(), g.data(), d2.data(), m, k, n, true); }, iters);
  report("matmul_tn (acc)", mm_flops, ts, tp, bits_equal(d1, d2));

  const std::size_t elems = m * n;
  std::vector<double> x(elems), y1(elems), y2(elems);
  for (auto& v : x) v = rng.normal();
  ts = time_it([&] { kernels::serial::gelu_forward(x.data(), y1.data(), elems); }, iters);
  tp = time_it([&] { kernels::gelu_forward(x.data(), y2.data(), elems); }, iters);
  report("gelu_forward", static_cast<double>(elems), ts, tp, bits_equal(y1, y2));

  std::vector<double> gain(n, 1.0), bias(n, 0.0), xh1(m * n), xh2(m * n), is1(m), is2(m);
  std::vector<double> ln_in(m * n);
  for (auto& v : ln_in) v = rng.normal();
  ts = time_it([&] { kernels::serial::layer_norm_forward(ln_in.data(), gain.data(), bias.data(), y1.data(), xh1.data(), is1.data(), m, n, 1e-5); }, iters);
  tp = time_it([&] { kernels::layer_norm_forward(ln_in.data(), gain.data(), bias.data(), y2.data(), xh2.data(), is2.data(), m, n, 1e-5); }, iters);
  report("layer_norm_forward", 8.0 * m * n, ts, tp, bits_equal(y1, y2));

  return 0;
}
