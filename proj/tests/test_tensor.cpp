#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "caswit/gradcheck.hpp"
#include "caswit/tensor.hpp"

using namespace caswit;

namespace {

using DT = Tensor<double>;

std::mt19937 rng(12345);

DT random_tensor(Shape shape, double span = 1.0) {
  std::uniform_real_distribution<double> dist(-span, span);
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = dist(rng);
  return DT::from_data(std::move(shape), std::move(d));
}

// Scalarizes an op output with a fixed random weighting so every output
// element influences the objective.
double weighted_sum(const DT& t, const std::vector<double>& w) {
  double acc = 0;
  for (std::size_t i = 0; i < t.numel(); ++i) acc += t.data()[i] * w[i];
  return acc;
}

DT weighted_sum_t(const DT& t, const std::vector<double>& w) {
  auto wt = DT::from_data(t.shape(), w);
  return sum(mul(t, wt));
}

// Gradient of weighted_sum(op(x)) w.r.t. x: backward vs finite differences.
template <typename OpFn>
void check_grad(const char* name, const DT& x0, OpFn op, double rtol = 1e-4,
                double atol = 1e-6) {
  auto probe = DT::from_data(x0.shape(), x0.data(), true);
  auto out = op(probe);
  std::vector<double> w(out.numel());
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (auto& v : w) v = dist(rng);
  auto loss = weighted_sum_t(out, w);
  loss.backward();
  const auto analytic = probe.grad();

  auto fd = finite_diff_grad<double>(
      [&](const DT& x) { return weighted_sum(op(x), w); }, x0, 1e-5);
  auto r = compare_grads(analytic, fd.data(), rtol, atol);
  INFO(name, ": max |analytic-fd| = ", r.max_abs_diff);
  CHECK(r.ok);
}

bool all_finite(const DT& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

TEST_CASE("matmul examples") {
  auto eye = DT::from_data({2, 2}, {1, 0, 0, 1});
  auto b = DT::from_data({2, 2}, {3, 4, 5, 6});
  auto c = matmul(eye, b);
  CHECK(c.data() == std::vector<double>{3, 4, 5, 6});

  auto r = matmul(DT::from_data({1, 2}, {1, 2}), DT::from_data({2, 1}, {3, 4}));
  CHECK(r.at({0, 0}) == doctest::Approx(11.0));

  CHECK_THROWS_AS(matmul(DT::zeros({2, 3}), DT::zeros({2, 3})), Error);
  try {
    matmul(DT::zeros({2, 3}), DT::zeros({2, 3}));
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum equals ones*b^T and finite differences") {
  for (int trial = 0; trial < 5; ++trial) {
    auto a = random_tensor({3, 4});
    auto b = random_tensor({4, 2});
    auto ag = DT::from_data(a.shape(), a.data(), true);
    auto out = sum(matmul(ag, b));
    out.backward();
    // dA = ones(3,2) * B^T
    for (int i = 0; i < 3; ++i)
      for (int l = 0; l < 4; ++l) {
        double expect = 0;
        for (int j = 0; j < 2; ++j) expect += b.at({l, j});
        CHECK(ag.grad()[i * 4 + l] == doctest::Approx(expect).epsilon(1e-10));
      }
    auto fd = finite_diff_grad<double>(
        [&](const DT& x) { return sum(matmul(x, b)).item(); }, a, 1e-5);
    CHECK(compare_grads(ag.grad(), fd.data(), 1e-4, 1e-6).ok);
  }
}

TEST_CASE("softmax examples") {
  auto u = softmax_lastdim(DT::from_data({3}, {0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3));

  auto big = softmax_lastdim(DT::from_data({2}, {1000, 1000}));
  CHECK(all_finite(big));
  CHECK(big.data()[0] == doctest::Approx(0.5));

  CHECK_THROWS_AS(softmax_lastdim(DT::scalar(1.0)), Error);

  // rows sum to one
  auto x = random_tensor({4, 7}, 3.0);
  auto y = softmax_lastdim(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int c = 0; c < 7; ++c) s += y.at({r, c});
    CHECK(std::abs(s - 1.0) <= 1e-6);
    for (int c = 0; c < 7; ++c) CHECK(y.at({r, c}) >= 0.0);
  }
}

TEST_CASE("layer_norm examples") {
  auto gamma = DT::from_data({4}, {1, 1, 1, 1});
  auto beta = DT::zeros({4});
  auto y = layer_norm(DT::from_data({1, 4}, {5, 5, 5, 5}), gamma, beta, 1e-5);
  for (double v : y.data()) CHECK(v == doctest::Approx(0.0));

  auto g2 = DT::from_data({2}, {1, 1});
  auto b2 = DT::zeros({2});
  auto y2 = layer_norm(DT::from_data({1, 2}, {1, -1}), g2, b2, 1e-5);
  CHECK(std::abs(y2.data()[0] - 1.0) < 1e-4);
  CHECK(std::abs(y2.data()[1] + 1.0) < 1e-4);

  CHECK_THROWS_AS(layer_norm(DT::zeros({1, 2}), g2, b2, 0.0), Error);

  // per-token mean 0, variance 1 pre-affine
  auto x = random_tensor({5, 8}, 2.0);
  auto n = layer_norm(x, DT::from_data({8}, std::vector<double>(8, 1.0)),
                      DT::zeros({8}), 1e-5);
  for (int r = 0; r < 5; ++r) {
    double mu = 0, var = 0;
    for (int c = 0; c < 8; ++c) mu += n.at({r, c});
    mu /= 8;
    for (int c = 0; c < 8; ++c)
      var += (n.at({r, c}) - mu) * (n.at({r, c}) - mu);
    var /= 8;
    CHECK(std::abs(mu) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("backward basics") {
  auto x = DT::from_data({}, {3.0}, true);
  auto y = scale(x, 1.0);
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(1.0));

  auto x2 = DT::from_data({}, {3.0}, true);
  auto y2 = add(x2, x2);
  y2.backward();
  CHECK(x2.grad()[0] == doctest::Approx(2.0));

  CHECK_THROWS_AS(DT::from_data({2}, {1, 2}, true).backward(), Error);
}

TEST_CASE("finite_diff_grad examples") {
  auto g = finite_diff_grad<double>(
      [](const DT& x) {
        double acc = 0;
        for (double v : x.data()) acc += v * v;
        return acc;
      },
      DT::from_data({2}, {1, 2}), 1e-4);
  CHECK(g.data()[0] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(g.data()[1] == doctest::Approx(4.0).epsilon(1e-6));

  auto z = finite_diff_grad<double>([](const DT&) { return 7.0; },
                                    DT::from_data({3}, {1, 2, 3}), 1e-4);
  for (double v : z.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(
      finite_diff_grad<double>([](const DT&) { return 0.0; }, DT::zeros({1}), 0.0),
      Error);
}

TEST_CASE("per-op finite difference suite") {
  check_grad("add", random_tensor({3, 4}),
             [&](const DT& x) { return add(x, x); });
  {
    auto other = random_tensor({3, 4});
    check_grad("add_lhs", random_tensor({3, 4}),
               [&](const DT& x) { return add(x, other); });
    check_grad("mul", random_tensor({3, 4}),
               [&](const DT& x) { return mul(x, other); });
    check_grad("sub", random_tensor({3, 4}),
               [&](const DT& x) { return sub(x, other); });
  }
  check_grad("scale", random_tensor({2, 5}),
             [](const DT& x) { return scale(x, -1.7); });
  check_grad("tanh", random_tensor({4, 4}),
             [](const DT& x) { return tanh(x); });
  check_grad("gelu", random_tensor({4, 4}, 2.0),
             [](const DT& x) { return gelu(x); });
  {
    auto b = random_tensor({6, 3});
    check_grad("matmul_a", random_tensor({4, 6}),
               [&](const DT& x) { return matmul(x, b); });
    auto a = random_tensor({4, 6});
    check_grad("matmul_b", random_tensor({6, 3}),
               [&](const DT& x) { return matmul(a, x); });
  }
  {
    auto b = random_tensor({2, 3, 4});
    check_grad("bmm_a", random_tensor({2, 5, 3}),
               [&](const DT& x) { return bmm(x, b); });
    auto a = random_tensor({2, 5, 3});
    check_grad("bmm_b", random_tensor({2, 3, 4}),
               [&](const DT& x) { return bmm(a, x); });
  }
  check_grad("reshape", random_tensor({2, 6}),
             [](const DT& x) { return reshape(x, {3, 4}); });
  check_grad("transpose", random_tensor({2, 3, 4}),
             [](const DT& x) { return transpose(x, 0, 2); });
  {
    auto other = random_tensor({2, 3});
    check_grad("concat", random_tensor({2, 3}), [&](const DT& x) {
      return concat<double>({x, other, x}, 0);
    });
  }
  check_grad("tile0", random_tensor({2, 3}),
             [](const DT& x) { return tile0(x, 3); });
  check_grad("repeat_interleave0", random_tensor({2, 3}),
             [](const DT& x) { return repeat_interleave0(x, 2); });
  check_grad("gather_rows", random_tensor({5, 3}), [](const DT& x) {
    return gather_rows(x, {0, 4, 2, 2, 1});
  });
  check_grad("roll2d", random_tensor({4, 3, 2}),
             [](const DT& x) { return roll2d(x, 1, 2); });
  check_grad("sum", random_tensor({3, 3}),
             [](const DT& x) { return sum(x); });
  check_grad("mean", random_tensor({3, 3}),
             [](const DT& x) { return mean(x); });
  check_grad("softmax", random_tensor({2, 5}, 2.0),
             [](const DT& x) { return softmax_lastdim(x); });
  {
    auto gamma = random_tensor({8}, 0.5);
    auto beta = random_tensor({8}, 0.5);
    check_grad("layer_norm_x", random_tensor({4, 8}), [&](const DT& x) {
      return layer_norm(x, gamma, beta, 1e-5);
    });
    auto x0 = random_tensor({4, 8});
    check_grad("layer_norm_gamma", random_tensor({8}), [&](const DT& g) {
      return layer_norm(x0, g, beta, 1e-5);
    });
    check_grad("layer_norm_beta", random_tensor({8}), [&](const DT& b) {
      return layer_norm(x0, gamma, b, 1e-5);
    });
  }
  check_grad("avg_pool2x2", random_tensor({4, 6, 2}),
             [](const DT& x) { return avg_pool2x2(x); });
  check_grad("adaptive_avg_pool2d", random_tensor({6, 4, 2}),
             [](const DT& x) { return adaptive_avg_pool2d(x, 3, 2); });
  check_grad("upsample_nearest2d", random_tensor({3, 2, 2}),
             [](const DT& x) { return upsample_nearest2d(x, 2); });
  check_grad("upsample_bilinear2d", random_tensor({3, 3, 2}),
             [](const DT& x) { return upsample_bilinear2d(x, 7, 5); });
  check_grad("unfold3x3", random_tensor({3, 4, 2}),
             [](const DT& x) { return unfold3x3(x); });
  check_grad("pixel_shuffle", random_tensor({2, 2, 8}),
             [](const DT& x) { return pixel_shuffle(x, 2); });
  check_grad("space_to_depth", random_tensor({4, 4, 2}),
             [](const DT& x) { return space_to_depth(x, 2); });
  {
    auto w = random_tensor({3, 4});
    auto b = random_tensor({4});
    check_grad("linear_x", random_tensor({5, 3}),
               [&](const DT& x) { return linear(x, w, b); });
    auto x0 = random_tensor({5, 3});
    check_grad("linear_w", random_tensor({3, 4}),
               [&](const DT& ww) { return linear(x0, ww, b); });
    check_grad("linear_b", random_tensor({4}),
               [&](const DT& bb) { return linear(x0, w, bb); });
  }
  {
    auto w = random_tensor({18, 3});
    auto b = random_tensor({3});
    check_grad("conv3x3_x", random_tensor({3, 3, 2}),
               [&](const DT& x) { return conv3x3(x, w, b); });
    auto x0 = random_tensor({3, 3, 2});
    check_grad("conv3x3_w", random_tensor({18, 3}),
               [&](const DT& ww) { return conv3x3(x0, ww, b); });
  }
  {
    auto s = DT::from_data({}, {0.7});
    check_grad("scale_t_x", random_tensor({3, 3}),
               [&](const DT& x) { return scale_t(x, s); });
    auto x0 = random_tensor({3, 3});
    check_grad("scale_t_s", DT::from_data({}, {0.7}),
               [&](const DT& sv) { return scale_t(x0, sv); });
  }
  {
    std::vector<bool> m{true, false, true, false};
    auto tok = random_tensor({3});
    check_grad("mask_rows_x", random_tensor({4, 3}),
               [&](const DT& x) { return mask_rows(x, m, tok); });
    auto x0 = random_tensor({4, 3});
    check_grad("mask_rows_token", random_tensor({3}),
               [&](const DT& t) { return mask_rows(x0, m, t); });
  }
  {
    auto b = random_tensor({4});
    check_grad("add_rowwise", random_tensor({3, 4}),
               [&](const DT& x) { return add_rowwise(x, b); });
  }
}

TEST_CASE("shape op round trips are bit exact") {
  auto x = random_tensor({3, 4, 5});
  auto r = reshape(reshape(x, {60}), {3, 4, 5});
  CHECK(r.data() == x.data());

  auto t = transpose(transpose(x, 0, 2), 0, 2);
  CHECK(t.data() == x.data());

  auto a = random_tensor({2, 3});
  auto b = random_tensor({4, 3});
  auto c = concat<double>({a, b}, 0);
  CHECK(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
  CHECK(std::equal(b.data().begin(), b.data().end(), c.data().begin() + 6));
}

TEST_CASE("pixel_shuffle and space_to_depth are inverses") {
  auto x = random_tensor({2, 3, 12});
  auto y = space_to_depth(pixel_shuffle(x, 2), 2);
  CHECK(y.data() == x.data());

  auto m = random_tensor({4, 6, 3});
  auto z = pixel_shuffle(space_to_depth(m, 2), 2);
  CHECK(z.data() == m.data());
}

TEST_CASE("pixel_shuffle placement") {
  // channel block (i*s+j) of cell (p,q) lands at pixel (p*s+i, q*s+j)
  const int s = 2, c = 3;
  for (int block = 0; block < s * s; ++block) {
    std::vector<double> d(2 * 2 * s * s * c, 0.0);
    // impulse in cell (1,0), block `block`, channel 1
    d[(1 * 2 + 0) * (s * s * c) + block * c + 1] = 5.0;
    auto y = pixel_shuffle(DT::from_data({2, 2, s * s * c}, d), s);
    const int i = block / s, j = block % s;
    CHECK(y.at({1 * s + i, 0 * s + j, 1}) == 5.0);
    double total = 0;
    for (double v : y.data()) total += std::abs(v);
    CHECK(total == 5.0);
  }
}

TEST_CASE("average pooling of constant image is that constant") {
  auto x = DT::full({4, 4, 3}, 3.25);
  auto y = avg_pool2x2(x);
  for (double v : y.data()) CHECK(v == 3.25);
  auto z = adaptive_avg_pool2d(random_tensor({4, 4, 1}), 1, 1);
  double m = 0;
  CHECK(z.numel() == 1);
  (void)m;
}

TEST_CASE("adaptive pool bin-1 equals mean") {
  auto x = random_tensor({2, 2, 1});
  auto y = adaptive_avg_pool2d(x, 1, 1);
  double m = (x.at({0, 0, 0}) + x.at({0, 1, 0}) + x.at({1, 0, 0}) +
              x.at({1, 1, 0})) /
             4.0;
  CHECK(y.item() == doctest::Approx(m).epsilon(1e-12));
}

TEST_CASE("upsample shapes and values") {
  auto x = DT::from_data({1, 2, 1}, {1.0, 3.0});
  auto n = upsample_nearest2d(x, 2);
  CHECK(n.shape() == Shape{2, 4, 1});
  CHECK(n.at({0, 0, 0}) == 1.0);
  CHECK(n.at({1, 3, 0}) == 3.0);

  auto b = upsample_bilinear2d(DT::full({2, 2, 1}, 2.5), 4, 4);
  for (double v : b.data()) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("no NaN on random finite inputs") {
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 4, 4}, 50.0);
    CHECK(all_finite(gelu(reshape(x, {8, 8}))));
    CHECK(all_finite(tanh(x)));
    CHECK(all_finite(softmax_lastdim(reshape(x, {16, 4}))));
    CHECK(all_finite(layer_norm(reshape(x, {16, 4}),
                                DT::from_data({4}, {1, 1, 1, 1}),
                                DT::zeros({4}), 1e-5)));
    CHECK(all_finite(avg_pool2x2(x)));
    CHECK(all_finite(upsample_bilinear2d(x, 7, 9)));
  }
}

TEST_CASE("fan-out accumulation through a diamond") {
  auto x = DT::from_data({2}, {1.0, 2.0}, true);
  auto a = scale(x, 2.0);
  auto b = tanh(x);
  auto y = sum(mul(a, b));
  y.backward();
  auto fd = finite_diff_grad<double>(
      [](const DT& v) {
        double acc = 0;
        for (std::size_t i = 0; i < v.numel(); ++i)
          acc += 2.0 * v.data()[i] * std::tanh(v.data()[i]);
        return acc;
      },
      DT::from_data({2}, {1.0, 2.0}), 1e-5);
  CHECK(compare_grads(x.grad(), fd.data(), 1e-4, 1e-6).ok);
}

TEST_CASE("grad mode off builds no graph") {
  auto x = DT::from_data({2}, {1.0, 2.0}, true);
  {
    NoGradGuard ng;
    auto y = scale(x, 3.0);
    CHECK(!y.requires_grad());
    CHECK(y.node()->parents.empty());
  }
  auto y = scale(x, 3.0);
  CHECK(y.requires_grad());
}
