#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "rrvq/entropy_analysis.hpp"
#include "rrvq/random.hpp"

using namespace rrvq;
using namespace rrvq::entropy;

namespace {

// Worst-case entropy by literal summation of -sum pi log pi in long double.
double exact_rvq_direct(int K, double d, double delta) {
  long double a1 = -0.5L * d * d;
  long double a2 = -0.5L * (d + delta) * (d + delta);
  long double z = expl(a1) + (K - 1) * expl(a2);
  long double p1 = expl(a1) / z;
  long double p2 = expl(a2) / z;
  long double h = -p1 * logl(p1) - (K - 1) * p2 * logl(p2);
  return static_cast<double>(h);
}

double exact_softmax_direct(int K, double l, double c) {
  long double z = expl((long double)(c + l)) + (K - 1) * expl((long double)c);
  long double p1 = expl((long double)(c + l)) / z;
  long double p2 = expl((long double)c) / z;
  long double h = -p1 * logl(p1) - (K - 1) * p2 * logl(p2);
  return static_cast<double>(h);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("exact rVQ entropy is log K for delta = 0") {
  CHECK(exact_rvq_entropy(256, 5.0, 0.0) == doctest::Approx(std::log(256.0)).epsilon(1e-14));
  CHECK(exact_rvq_entropy(7, 0.0, 0.0) == doctest::Approx(std::log(7.0)).epsilon(1e-14));
}

TEST_CASE("exact rVQ entropy vanishes as the separation grows") {
  CHECK(exact_rvq_entropy(256, 0.0, 50.0) < 1e-100);
}

TEST_CASE("exact rVQ entropy matches direct summation") {
  CHECK(std::abs(exact_rvq_entropy(256, 10.0, 1.0) - exact_rvq_direct(256, 10.0, 1.0)) < 1e-12);
  CHECK(std::abs(exact_rvq_entropy(16, 2.0, 0.5) - exact_rvq_direct(16, 2.0, 0.5)) < 1e-12);
  CHECK(std::abs(exact_rvq_entropy(256, 1.0, 1.0) - exact_rvq_direct(256, 1.0, 1.0)) < 1e-12);
}

TEST_CASE("approx rVQ entropy evaluates the first-order formula") {
  double g = 10.5;  // d=10, delta=1
  CHECK(approx_rvq_entropy(256, 10.0, 1.0) ==
        doctest::Approx(255.0 * 11.5 * std::exp(-g)).epsilon(1e-14));
  // g = 0 collapses the formula to K-1; the approximation only holds for
  // large g, so this is a formula check, not an accuracy claim.
  CHECK(approx_rvq_entropy(256, 0.0, 0.0) == doctest::Approx(255.0).epsilon(1e-14));
}

TEST_CASE("rVQ approximation error decays with distance") {
  // First-order truncation: the proportional error is ~(K-1)exp(-g), so it
  // is a few permil at d=10 and only crosses 1e-5 near d=17; the useful
  // guarantee is monotone decay and high accuracy from d=20 on.
  double prev = 1e300;
  for (double d : {10.0, 15.0, 20.0, 25.0, 30.0}) {
    double e = exact_rvq_entropy(256, d, 1.0);
    double a = approx_rvq_entropy(256, d, 1.0);
    double err = std::abs(a - e) / e;
    CHECK(err < prev);
    prev = err;
  }
  for (double d : {20.0, 25.0, 30.0}) {
    double e = exact_rvq_entropy(256, d, 1.0);
    double a = approx_rvq_entropy(256, d, 1.0);
    CHECK(std::abs(a - e) / e <= 1e-5);
  }
}

TEST_CASE("exact softmax entropy at zero gap is log K") {
  CHECK(exact_softmax_entropy(256, 0.0, 0.0) == doctest::Approx(std::log(256.0)).epsilon(1e-14));
}

TEST_CASE("exact softmax entropy is invariant to the base logit") {
  for (double l : {0.5, 5.0, 20.0}) {
    double h0 = exact_softmax_entropy(256, l, 0.0);
    double h5 = exact_softmax_entropy(256, l, 5.0);
    CHECK(std::abs(h0 - h5) < 1e-12);
    CHECK(std::abs(h0 - exact_softmax_direct(256, l, 3.0)) < 1e-12);
  }
}

TEST_CASE("softmax approximation is accurate at large gaps") {
  double e = exact_softmax_entropy(256, 20.0, 0.0);
  double a = approx_softmax_entropy(256, 20.0);
  CHECK(std::abs(a - e) / e <= 1e-5);
}

TEST_CASE("both approximations converge as the gap grows") {
  double prev_r = 1e300, prev_s = 1e300;
  for (double gap : {12.0, 18.0, 27.0, 40.0}) {
    double er = std::abs(approx_rvq_entropy(256, gap, 1.0) - exact_rvq_entropy(256, gap, 1.0)) /
                exact_rvq_entropy(256, gap, 1.0);
    double es = std::abs(approx_softmax_entropy(256, gap) - exact_softmax_entropy(256, gap)) /
                exact_softmax_entropy(256, gap);
    CHECK(er < prev_r);
    CHECK(es < prev_s);
    prev_r = er;
    prev_s = es;
  }
  CHECK(prev_r < 1e-9);
  CHECK(prev_s < 1e-9);
}

TEST_CASE("exact entropies stay within [0, log K]") {
  for (int K : {2, 16, 256})
    for (double d : {0.0, 0.5, 2.0, 10.0, 40.0})
      for (double delta : {0.0, 0.3, 1.0, 3.0}) {
        double h = exact_rvq_entropy(K, d, delta);
        CHECK(h >= 0.0);
        CHECK(h <= std::log(static_cast<double>(K)) + 1e-12);
      }
}

TEST_CASE("exact rVQ entropy is monotone non-increasing in d") {
  for (double delta : {0.25, 1.0, 2.0}) {
    double prev = 1e300;
    for (double d = 0.0; d <= 12.0; d += 0.5) {
      double h = exact_rvq_entropy(256, d, delta);
      CHECK(h <= prev + 1e-15);
      prev = h;
    }
  }
}

TEST_CASE("corollary ordering flips around delta = 1") {
  auto low = corollary_compare(256, 20.0, 0.5);
  CHECK(low.ordering == 1);
  CHECK(low.h_rvq > low.h_softmax);

  auto high = corollary_compare(256, 20.0, 1.5);
  CHECK(high.ordering == -1);
  CHECK(high.h_rvq < high.h_softmax);

  // boundary case: report the gap, assert nothing about its sign
  auto boundary = corollary_compare(256, 20.0, 1.0);
  CHECK(std::isfinite(boundary.relative_gap));
}

TEST_CASE("corollary comparison refuses small distances") {
  CHECK_THROWS_AS(corollary_compare(256, 9.9, 0.5), Error);
}

TEST_CASE("sphere sampler places points on the surface") {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    auto v = sample_sphere_surface(32, 0.5, rng);
    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    CHECK(std::abs(std::sqrt(norm2) - 0.5) < 1e-12);
  }
}

TEST_CASE("sphere sampler directions have near-zero mean") {
  Rng rng(2);
  const int n = 100000;
  std::vector<double> mean(8, 0.0);
  for (int i = 0; i < n; ++i) {
    auto v = sample_sphere_surface(8, 1.0, rng);
    for (int d = 0; d < 8; ++d) mean[d] += v[d];
  }
  double norm = 0.0;
  for (double m : mean) norm += (m / n) * (m / n);
  CHECK(std::sqrt(norm) < 3.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("ball sampler stays inside the radius") {
  Rng rng(3);
  double max_norm = 0.0;
  for (int i = 0; i < 500; ++i) {
    auto v = sample_ball(16, 0.5, rng);
    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    max_norm = std::max(max_norm, std::sqrt(norm2));
  }
  CHECK(max_norm <= 0.5 + 1e-12);
  CHECK(max_norm > 0.3);  // interior points do occur
}

TEST_CASE("simulation approaches log K when the codebook collapses") {
  auto rows = mc_codebook_entropy({0.0}, 50, 16, 4, 1e-9, 7);
  CHECK(rows[0].mean_entropy == doctest::Approx(std::log(16.0)).epsilon(1e-6));
}

TEST_CASE("simulated entropy dominates the worst case") {
  auto rows = mc_codebook_entropy({1.0, 2.0, 3.0}, 200, 64, 16, 0.5, 11);
  for (const auto& r : rows) {
    CHECK(r.mean_entropy > r.worst_exact);
    CHECK(r.min_entropy >= r.worst_exact);
  }
}

TEST_CASE("simulation CSV is byte-identical across reruns") {
  auto rows1 = mc_codebook_entropy({0.5, 1.5}, 100, 8, 4, 0.5, 21);
  auto rows2 = mc_codebook_entropy({0.5, 1.5}, 100, 8, 4, 0.5, 21);
  write_mc_csv("mc_a.csv", rows1);
  write_mc_csv("mc_b.csv", rows2);
  std::string a = read_file("mc_a.csv");
  std::string b = read_file("mc_b.csv");
  CHECK(a == b);
  CHECK(a.rfind("d,mean_H_nats,min_H_nats,worst_exact_nats,worst_approx_nats\n", 0) == 0);
  std::remove("mc_a.csv");
  std::remove("mc_b.csv");
}

TEST_CASE("worst-case curve rows carry both parameterisations") {
  auto rows = worst_case_curve(256, 1.0, {10.0, 20.0});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].exact_rvq == doctest::Approx(exact_rvq_entropy(256, 10.0, 1.0)));
  CHECK(rows[1].exact_softmax == doctest::Approx(exact_softmax_entropy(256, 20.0, 0.0)));
  write_curve_csv("curve.csv", rows);
  std::string text = read_file("curve.csv");
  CHECK(text.find("exact_rvq_bits") != std::string::npos);
  std::remove("curve.csv");
}

TEST_CASE("config validation") {
  WorstCaseConfig bad;
  bad.K = 1;
  CHECK_THROWS_AS(bad.validate(), Error);
  WorstCaseConfig neg;
  neg.delta = -0.5;
  CHECK_THROWS_AS(neg.validate(), Error);
  WorstCaseConfig ok{256, 10.0, 1.0, 0.0, 0.0};
  CHECK(ok.g() == doctest::Approx(10.5));
}
