#include <cmath>
#include <vector>

#include "doctest.h"
#include "rrvq/grad_check.hpp"
#include "rrvq/random.hpp"
#include "rrvq/tensor.hpp"

using namespace rrvq;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(d));
}

// Random values bounded away from zero, for ops with kinks or poles there.
Tensor random_tensor_away_from_zero(Shape shape, Rng& rng) {
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) {
    double m = 0.2 + rng.uniform();
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return Tensor::from(std::move(shape), std::move(d));
}

// Reduces op(x) to a scalar through fixed random weights so the upstream
// gradient is non-uniform.
std::function<Tensor(const Tensor&)> weighted(const std::function<Tensor(const Tensor&)>& op,
                                              const Tensor& probe) {
  return [op, probe](const Tensor& x) { return sum(mul(op(x), probe)); };
}

void expect_grad_ok(const std::function<Tensor(const Tensor&)>& op, const Tensor& point, Rng& rng,
                    double tol = 1e-4) {
  Tensor probe = random_tensor(op(point).shape(), rng);
  auto rep = grad_check(weighted(op, probe), point, 1e-4, tol);
  INFO("max_rel_dev=" << rep.max_rel_dev << " analytic=" << rep.worst_analytic
                      << " numeric=" << rep.worst_numeric);
  CHECK(rep.pass);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

TEST_CASE("log_sum_exp of uniform logits") {
  Tensor x = Tensor::zeros({1, 4});
  CHECK(log_sum_exp(x, 1).value() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("elu definition") {
  Tensor x = Tensor::from({3}, {2.0, 0.0, -1.0});
  Tensor y = elu(x);
  CHECK(y[0] == 2.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-15));
}

TEST_CASE("conv2d with identity kernel is the identity map") {
  Rng rng(1);
  Tensor x = random_tensor({2, 3, 5, 5}, rng);
  Tensor w = Tensor::zeros({3, 3, 1, 1});
  auto& wv = w.leaf_values();
  for (int c = 0; c < 3; ++c) wv[c * 3 + c] = 1.0;
  Tensor y = conv2d(x, w, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("backward of sum of squares") {
  Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
  backward(sum(mul(w, w)));
  CHECK(w.grad()[0] == doctest::Approx(2.0));
  CHECK(w.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward of log_sum_exp is softmax") {
  Rng rng(2);
  Tensor v = Tensor::from({1, 5}, {0.3, -1.2, 0.7, 2.0, -0.5}, true);
  backward(log_sum_exp(v, 1));
  Tensor s = softmax(Tensor::from({1, 5}, v.values()), 1);
  for (int k = 0; k < 5; ++k) CHECK(v.grad()[k] == doctest::Approx(s[k]).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar") {
  Tensor x = Tensor::zeros({2, 2}, true);
  CHECK_THROWS_AS(backward(add_scalar(x, 1.0)), Error);
}

TEST_CASE("fan-out accumulates gradients additively") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  Tensor y = add(mul(x, x), x);  // x^2 + x
  backward(sum(y));
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("shape mismatch reports op and both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("elementwise and scalar op gradients match finite differences") {
  Rng rng(3);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor_away_from_zero({3, 4}, rng);
  expect_grad_ok([&](const Tensor& x) { return add(x, b); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return sub(b, x); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return mul(x, b); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return div(x, b); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return div(b, x); }, random_tensor_away_from_zero({3, 4}, rng), rng);
  expect_grad_ok([&](const Tensor& x) { return add_scalar(x, 0.7); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return mul_scalar(x, -1.3); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return exp(x); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return log(x); }, random_tensor({3, 4}, rng, 0.2, 2.0), rng);
  expect_grad_ok([&](const Tensor& x) { return square(x); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return neg(x); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return elu(x); }, random_tensor_away_from_zero({3, 4}, rng), rng);
  expect_grad_ok([&](const Tensor& x) { return sigmoid(x); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return max_scalar(x, 0.0); },
                 random_tensor_away_from_zero({3, 4}, rng), rng);
  expect_grad_ok([&](const Tensor& x) { return min_scalar(x, 0.0); },
                 random_tensor_away_from_zero({3, 4}, rng), rng);
}

TEST_CASE("reduction and axis op gradients match finite differences") {
  Rng rng(4);
  Tensor a = random_tensor({2, 3, 4}, rng);
  expect_grad_ok([](const Tensor& x) { return sum(x); }, a, rng);
  expect_grad_ok([](const Tensor& x) { return mean(x); }, a, rng);
  for (int axis = 0; axis < 3; ++axis) {
    expect_grad_ok([axis](const Tensor& x) { return sum_axis(x, axis); }, a, rng);
    expect_grad_ok([axis](const Tensor& x) { return log_sum_exp(x, axis); }, a, rng);
    expect_grad_ok([axis](const Tensor& x) { return softmax(x, axis); }, a, rng);
    expect_grad_ok([axis](const Tensor& x) { return log_softmax(x, axis); }, a, rng);
  }
}

TEST_CASE("shape op gradients match finite differences") {
  Rng rng(5);
  Tensor a = random_tensor({2, 3, 2, 2}, rng);
  Tensor b = random_tensor({2, 2, 2, 2}, rng);
  expect_grad_ok([](const Tensor& x) { return reshape(x, {6, 4}); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return concat_channels(x, b); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return concat_channels(b, x); }, a, rng);
  expect_grad_ok([](const Tensor& x) { return nchw_to_rows(x); }, a, rng);
  Tensor rows = random_tensor({8, 3}, rng);
  expect_grad_ok([](const Tensor& x) { return rows_to_nchw(x, 2, 3, 2, 2); }, rows, rng);
  expect_grad_ok([](const Tensor& x) { return nearest_rescale(x, 4, 4); }, a, rng);
  expect_grad_ok([](const Tensor& x) { return nearest_rescale(x, 1, 1); }, a, rng);
  expect_grad_ok([](const Tensor& x) { return gather_rows(x, {1, 0, 1, 2}); },
                 random_tensor({3, 4}, rng), rng);
}

TEST_CASE("nchw_to_rows round trip") {
  Rng rng(6);
  Tensor a = random_tensor({2, 5, 3, 4}, rng);
  Tensor back = rows_to_nchw(nchw_to_rows(a), 2, 5, 3, 4);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(back[i] == a[i]);
}

TEST_CASE("matmul and linear gradients match finite differences") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor bias = random_tensor({2}, rng);
  expect_grad_ok([&](const Tensor& x) { return matmul(x, b); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return matmul(a, x); }, b, rng);
  expect_grad_ok([&](const Tensor& x) { return linear(x, b, bias); }, a, rng);
  expect_grad_ok([&](const Tensor& x) { return linear(a, x, bias); }, b, rng);
  expect_grad_ok([&](const Tensor& x) { return linear(a, b, x); }, bias, rng);
}

TEST_CASE("conv gradients match finite differences") {
  Rng rng(8);
  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  for (int stride : {1, 2}) {
    expect_grad_ok([&](const Tensor& t) { return conv2d(t, w, b, stride, 1); }, x, rng);
    expect_grad_ok([&](const Tensor& t) { return conv2d(x, t, b, stride, 1); }, w, rng);
    expect_grad_ok([&](const Tensor& t) { return conv2d(x, w, t, stride, 1); }, b, rng);
  }
  Tensor y = random_tensor({2, 4, 3, 3}, rng);
  Tensor cb = random_tensor({3}, rng);
  expect_grad_ok([&](const Tensor& t) { return conv2d_transpose(t, w, cb, 2, 1, 6, 6); }, y, rng);
  expect_grad_ok([&](const Tensor& t) { return conv2d_transpose(y, t, cb, 2, 1, 6, 6); }, w, rng);
  expect_grad_ok([&](const Tensor& t) { return conv2d_transpose(y, w, t, 2, 1, 6, 6); }, cb, rng);
}

TEST_CASE("conv2d_transpose is the exact adjoint of conv2d") {
  Rng rng(9);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      Tensor x = random_tensor({2, 3, 6, 6}, rng);
      Tensor w = random_tensor({4, 3, 3, 3}, rng);
      Tensor cx = conv2d(x, w, stride, pad);
      Tensor y = random_tensor(cx.shape(), rng);
      Tensor ty = conv2d_transpose(y, w, stride, pad, 6, 6);
      double lhs = dot(cx.values(), y.values());
      double rhs = dot(x.values(), ty.values());
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
  }
}

TEST_CASE("quantisation primitive gradients match finite differences") {
  Rng rng(10);
  Tensor e = random_tensor({5, 3}, rng);
  Tensor mu = random_tensor({4, 3}, rng);
  Tensor lv = random_tensor({4, 3}, rng, -0.5, 0.5);
  Tensor lv_shared = random_tensor({4, 1}, rng, -0.5, 0.5);
  expect_grad_ok([&](const Tensor& t) { return pairwise_sq_dist(t, mu); }, e, rng);
  expect_grad_ok([&](const Tensor& t) { return pairwise_sq_dist(e, t); }, mu, rng);
  expect_grad_ok([&](const Tensor& t) { return pairwise_gaussian_logpdf(t, mu, lv); }, e, rng);
  expect_grad_ok([&](const Tensor& t) { return pairwise_gaussian_logpdf(e, t, lv); }, mu, rng);
  expect_grad_ok([&](const Tensor& t) { return pairwise_gaussian_logpdf(e, mu, t); }, lv, rng);
  expect_grad_ok([&](const Tensor& t) { return pairwise_gaussian_logpdf(e, mu, t); }, lv_shared, rng);
}

TEST_CASE("softmax rows sum to one and log_softmax rows log-sum-exp to zero") {
  Rng rng(11);
  Tensor x = random_tensor({40, 9}, rng, -30.0, 30.0);
  Tensor s = softmax(x, 1);
  Tensor ls = log_softmax(x, 1);
  for (int m = 0; m < 40; ++m) {
    double acc = 0.0;
    for (int k = 0; k < 9; ++k) acc += s[m * 9 + k];
    CHECK(std::abs(acc - 1.0) < 1e-12);
    double mx = -1e300;
    for (int k = 0; k < 9; ++k) mx = std::max(mx, ls[m * 9 + k]);
    double z = 0.0;
    for (int k = 0; k < 9; ++k) z += std::exp(ls[m * 9 + k] - mx);
    CHECK(std::abs(mx + std::log(z)) < 1e-10);
  }
}

TEST_CASE("grad_check on sum of squares is near machine precision") {
  Rng rng(12);
  Tensor p = random_tensor({6}, rng);
  auto rep = grad_check([](const Tensor& x) { return sum(square(x)); }, p, 1e-4, 1e-8);
  CHECK(rep.pass);
  CHECK(rep.max_rel_dev < 1e-8);
}

TEST_CASE("grad_check rejects a deliberately wrong backward rule") {
  Rng rng(13);
  Tensor p = random_tensor({4}, rng);
  auto bad_square = [](const Tensor& x) {
    Tensor y = custom_unary(
        x, "bad_square", x.shape(),
        [](const std::vector<double>& v) {
          std::vector<double> out(v.size());
          for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * v[i];
          return out;
        },
        [](const std::vector<double>& v, const std::vector<double>&,
           const std::vector<double>& g) {
          std::vector<double> gx(v.size());
          for (std::size_t i = 0; i < v.size(); ++i) gx[i] = g[i] * 3.0 * v[i];  // wrong factor
          return gx;
        });
    return sum(y);
  };
  auto rep = grad_check(bad_square, p, 1e-4, 1e-4);
  CHECK_FALSE(rep.pass);
}

TEST_CASE("grad_check refuses non-finite objectives") {
  Tensor p = Tensor::from({1}, {-1.0});
  CHECK_THROWS_AS(grad_check([](const Tensor& x) { return log(x); }, p, 1e-4, 1e-4), Error);
}

TEST_CASE("leaf mutation is rejected on interior nodes") {
  Tensor x = Tensor::zeros({2});
  Tensor y = add_scalar(x, 1.0);
  CHECK_THROWS_AS(y.leaf_values(), Error);
}
