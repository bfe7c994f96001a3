#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "regenlab/checkpoint.h"
#include "regenlab/errors.h"
#include "regenlab/kernels.h"
#include "regenlab/optim.h"
#include "regenlab/rng.h"
#include "regenlab/tensor.h"

using namespace regenlab;

namespace {

// Independent oracle: plain ijk triple loop.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

std::vector<double> random_vec(Rng& rng, std::size_t n, double std = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, std);
  return v;
}

}  // namespace

TEST_CASE("omp kernels are bit-identical to the serial reference") {
  Rng rng(99);
  for (auto [m, k, n] : {std::tuple<std::size_t, std::size_t, std::size_t>{33, 17, 29},
                         {128, 64, 96},
                         {9, 5, 7}}) {
    const auto a = random_vec(rng, m * k);
    const auto b = random_vec(rng, k * n);
    const auto bt = random_vec(rng, n * k);
    const auto g = random_vec(rng, m * n);

    std::vector<double> c1(m * n, 0.5), c2(m * n, 0.5);
    kernels::serial::matmul_nn(a.data(), b.data(), c1.data(), m, k, n, true);
    kernels::matmul_nn(a.data(), b.data(), c2.data(), m, k, n, true);
    CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(double)) == 0);

    kernels::serial::matmul_nt(a.data(), bt.data(), c1.data(), m, k, n, false);
    kernels::matmul_nt(a.data(), bt.data(), c2.data(), m, k, n, false);
    CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(double)) == 0);

    std::vector<double> d1(k * n, 0.25), d2(k * n, 0.25);
    kernels::serial::matmul_tn(a.data(), g.data(), d1.data(), m, k, n, true);
    kernels::matmul_tn(a.data(), g.data(), d2.data(), m, k, n, true);
    CHECK(std::memcmp(d1.data(), d2.data(), d1.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("matmul identity and hand arithmetic") {
  auto i2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from_data({2, 2}, {3, 4, 5, 6});
  auto c = matmul(i2, b);
  CHECK(c.at(0, 0) == 3.0);
  CHECK(c.at(0, 1) == 4.0);
  CHECK(c.at(1, 0) == 5.0);
  CHECK(c.at(1, 1) == 6.0);

  auto row = Tensor::from_data({1, 2}, {1, 2});
  auto col = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == 11.0);
}

TEST_CASE("matmul matches the triple-loop oracle within 1e-12") {
  Rng rng(7);
  const std::size_t m = 4, k = 5, n = 3;
  const auto av = random_vec(rng, m * k);
  const auto bv = random_vec(rng, k * n);
  const auto expected = naive_matmul(av, bv, m, k, n);
  auto c = matmul(Tensor::from_data({m, k}, av), Tensor::from_data({k, n}, bv));
  for (std::size_t i = 0; i < m * n; ++i)
    CHECK(std::abs(c.data()[i] - expected[i]) < 1e-12);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("layer_norm of a constant vector is zero") {
  auto x = Tensor::full({1, 8}, 3.7);
  auto gain = Tensor::full({8}, 1.0);
  auto bias = Tensor::zeros({8});
  auto y = layer_norm(x, gain, bias);
  for (double v : y.data()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("gelu fixes zero") {
  auto y = gelu(Tensor::from_data({1}, {0.0}));
  CHECK(y.item() == 0.0);
}

TEST_CASE("cross entropy of uniform logits is ln V") {
  auto logits = Tensor::full({3, 8}, 0.42);
  const int targets[] = {0, 5, 7};
  auto loss = softmax_cross_entropy(logits, targets);
  CHECK(loss.item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("backward of sum gives ones") {
  auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad(true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum of squares doubles the input") {
  auto x = Tensor::from_data({1}, {3.0});
  x.set_requires_grad(true);
  sum(mul(x, x)).backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("backward requires a scalar with a recorded graph") {
  auto x = Tensor::zeros({2, 2});
  x.set_requires_grad(true);
  auto y = add(x, x);
  CHECK_THROWS_AS(y.backward(), ContractError);  // non-scalar

  auto plain = Tensor::scalar(1.0);
  CHECK_THROWS_AS(plain.backward(), ContractError);  // no graph
}

TEST_CASE("random 3-layer MLP gradients match central differences") {
  Rng rng(21);
  const std::size_t d0 = 5, d1 = 7, d2 = 6, d3 = 1;
  auto w1 = Tensor::randn({d0, d1}, rng, 0.7);
  auto b1 = Tensor::randn({d1}, rng, 0.3);
  auto w2 = Tensor::randn({d1, d2}, rng, 0.7);
  auto b2 = Tensor::randn({d2}, rng, 0.3);
  auto w3 = Tensor::randn({d2, d3}, rng, 0.7);
  auto x = Tensor::randn({4, d0}, rng, 1.0);

  auto net = [&](const Tensor& w1_, const Tensor& b1_, const Tensor& w2_, const Tensor& b2_,
                 const Tensor& w3_) {
    Tensor h1 = gelu(add_rowwise(matmul(x, w1_), b1_));
    Tensor h2 = relu(add_rowwise(matmul(h1, w2_), b2_));
    return sum(matmul(h2, w3_));
  };

  CHECK(grad_check([&](const Tensor& p) { return net(p, b1, w2, b2, w3); }, w1, 1e-5) < 1e-4);
  CHECK(grad_check([&](const Tensor& p) { return net(w1, p, w2, b2, w3); }, b1, 1e-5) < 1e-4);
  CHECK(grad_check([&](const Tensor& p) { return net(w1, b1, p, b2, w3); }, w2, 1e-5) < 1e-4);
  CHECK(grad_check([&](const Tensor& p) { return net(w1, b1, w2, b2, p); }, w3, 1e-5) < 1e-4);
  CHECK(grad_check([&](const Tensor& p) { return net(w1, b1, w2, p, w3); }, b2, 1e-5) < 1e-4);
}

TEST_CASE("grad_check basics") {
  Rng rng(3);
  auto x = Tensor::randn({6}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum(t); }, x, 1e-5) < 1e-10);

  auto logits = Tensor::randn({3, 9}, rng);
  const std::vector<int> targets = {2, 0, 8};
  CHECK(grad_check(
            [&](const Tensor& t) { return softmax_cross_entropy(t, targets); }, logits, 1e-5) <
        1e-4);

  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return sum(t); }, x, 0.5), ContractError);
  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return t; }, Tensor::zeros({2}), 1e-5),
                  ContractError);
}

TEST_CASE("grad_check flags a deliberately wrong backward") {
  Rng rng(5);
  auto x = Tensor::randn({8}, rng);
  // Forward is x^2, backward claims 3x instead of 2x.
  auto broken = [](const Tensor& t) {
    return sum(custom_unary_op(
        t,
        [](std::span<const double> in) {
          std::vector<double> out(in.size());
          for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * in[i];
          return out;
        },
        [](std::span<const double> g, std::span<const double> in) {
          std::vector<double> gx(in.size());
          for (std::size_t i = 0; i < in.size(); ++i) gx[i] = g[i] * 3.0 * in[i];
          return gx;
        }));
  };
  CHECK(grad_check(broken, x, 1e-5) > 1e-1);
}

TEST_CASE("gradient property suite over randomized shapes") {
  // Smaller than the acceptance version of the same property; every
  // differentiable op, random shapes, error < 1e-4.
  Rng rng(1001);
  Rng shape_rng(77);
  auto rand_dim = [&](std::size_t lo, std::size_t hi) {
    return lo + shape_rng.below(hi - lo + 1);
  };

  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t m = rand_dim(2, 5), k = rand_dim(2, 5), n = rand_dim(2, 4);
    auto a = Tensor::randn({m, k}, rng);
    auto b = Tensor::randn({k, n}, rng);
    auto bt = Tensor::randn({n, k}, rng);
    auto same = Tensor::randn({m, k}, rng);
    auto bias = Tensor::randn({k}, rng);
    auto weights = Tensor::randn({m, k}, rng);  // fixed weights make losses scalar

    auto weighted = [&](Tensor t) { return sum(mul(t, weights)); };

    CHECK(grad_check([&](const Tensor& t) { return weighted(add(t, same)); }, a) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return weighted(sub(t, same)); }, a) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return weighted(mul(t, same)); }, a) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return weighted(scale(t, -1.7)); }, a) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return weighted(add_rowwise(t, bias)); }, a) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return weighted(add_rowwise(a, t)); }, bias) < 1e-4);
    auto wmn = Tensor::randn({m, n}, rng);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(matmul(t, b), wmn)); }, a) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(matmul(a, t), wmn)); }, b) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(matmul_nt(t, bt), wmn)); }, a) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(matmul_nt(a, t), wmn)); }, bt) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return weighted(gelu(t)); }, a) < 1e-4);
    // Keep relu inputs away from the kink.
    auto shifted = a.clone();
    for (auto& v : shifted.mutable_data()) v += (v >= 0 ? 0.5 : -0.5);
    CHECK(grad_check([&](const Tensor& t) { return weighted(relu(t)); }, shifted) < 1e-4);
  }
}

TEST_CASE("non-finite values raise instead of propagating") {
  auto x = Tensor::from_data({2}, {1.0, 2.0});
  x.mutable_data()[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(relu(x), NumericError);

  auto big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(mul(big, big), NumericError);
  CHECK_THROWS_AS(scale(big, std::numeric_limits<double>::quiet_NaN()), NumericError);
}

TEST_CASE("adamw zero grads leave params modulo weight decay") {
  auto w = Tensor::from_data({3}, {1.0, -2.0, 0.5});
  w.set_requires_grad(true);
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  AdamW opt({w}, cfg);
  opt.zero_grad();
  opt.step();
  CHECK(w.data()[0] == doctest::Approx(1.0 * (1 - 0.1 * 0.01)).epsilon(1e-14));
  CHECK(w.data()[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.01)).epsilon(1e-14));

  // With zero weight decay, zero grads change nothing at all.
  auto w2 = Tensor::from_data({2}, {0.3, -0.7});
  w2.set_requires_grad(true);
  AdamW opt2({w2}, AdamConfig{.lr = 0.1});
  opt2.zero_grad();
  opt2.step();
  CHECK(w2.data()[0] == 0.3);
  CHECK(w2.data()[1] == -0.7);
}

TEST_CASE("adamw descends on w^2") {
  auto w = Tensor::from_data({1}, {1.0});
  w.set_requires_grad(true);
  AdamW opt({w}, AdamConfig{.lr = 0.1});
  opt.zero_grad();
  sum(mul(w, w)).backward();
  opt.step();
  CHECK(std::abs(w.data()[0]) < 1.0);
}

TEST_CASE("adamw reaches the quadratic minimum in 200 steps") {
  // f(w) = (w0-? ) closed-form minimum at the origin: f = w0^2 + 2.5 w1^2.
  auto w = Tensor::from_data({2}, {1.5, -2.0});
  w.set_requires_grad(true);
  auto coeff = Tensor::from_data({2}, {1.0, 2.5});
  AdamW opt({w}, AdamConfig{.lr = 0.05});
  double loss_val = 0.0;
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    auto loss = sum(mul(coeff, mul(w, w)));
    loss_val = loss.item();
    loss.backward();
    opt.step();
  }
  CHECK(loss_val < 1e-6);
  CHECK(opt.step_count() == 200);
}

TEST_CASE("adamw demands populated gradients") {
  auto w = Tensor::from_data({2}, {1.0, 2.0});
  w.set_requires_grad(true);
  AdamW opt({w}, AdamConfig{});
  CHECK_THROWS_AS(opt.step(), ContractError);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  Rng rng(31337);
  NamedTensors tensors;
  tensors.emplace_back("alpha", Tensor::randn({3, 4}, rng));
  tensors.emplace_back("beta", Tensor::randn({7}, rng, 1e-30));
  tensors.emplace_back("gamma.scalar", Tensor::scalar(-0.0));

  const auto path = std::filesystem::temp_directory_path() / "regenlab_ckpt_test.bin";
  save_checkpoint(path.string(), tensors);
  const auto loaded = load_checkpoint(path.string());

  REQUIRE(loaded.size() == tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    CHECK(loaded[i].first == tensors[i].first);
    CHECK(loaded[i].second.shape() == tensors[i].second.shape());
    const auto a = tensors[i].second.data();
    const auto b = loaded[i].second.data();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  }
  std::filesystem::remove(path);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/file.bin"), Error);
}

TEST_CASE("seeded randn is reproducible") {
  Rng r1(42), r2(42);
  auto a = Tensor::randn({16}, r1);
  auto b = Tensor::randn({16}, r2);
  CHECK(std::memcmp(a.data().data(), b.data().data(), 16 * sizeof(double)) == 0);
}
