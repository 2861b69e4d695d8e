#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "rrvq/random.hpp"
#include "rrvq/tensor.hpp"

namespace rrvq {
namespace entropy {

/// Worst-case geometry for a single large-magnitude network output: one
/// codebook entry at distance d from the embedding, the remaining K-1 at
/// d + delta along the same line; for the softmax counterpart, one logit at
/// c + gap and K-1 at c.
struct WorstCaseConfig {
  int K = 2;
  double d = 0.0;
  double delta = 0.0;
  double logit_gap = 0.0;
  double base_logit = 0.0;

  double g() const { return 0.5 * delta * delta + delta * d; }

  void validate() const {
    if (K < 2) throw Error("WorstCaseConfig: K must be >= 2");
    if (delta < 0.0) throw Error("WorstCaseConfig: delta must be >= 0");
    if (logit_gap < 0.0) throw Error("WorstCaseConfig: logit gap must be >= 0");
  }
};

namespace detail {

/// Two-level categorical entropy: one category with relative log weight 0,
/// K-1 with relative log weight -gap. Evaluated via log1p so results stay
/// relatively accurate when gap is large.
inline double two_level_entropy(int K, double gap) {
  double t = std::log1p(static_cast<double>(K - 1) * std::exp(-gap));
  double lp1 = -t;
  double lp2 = -gap - t;
  double h = -std::exp(lp1) * lp1;
  double p2 = std::exp(lp2);
  if (p2 > 0.0) h -= static_cast<double>(K - 1) * p2 * lp2;
  return h;
}

}  // namespace detail

inline double exact_rvq_entropy(const WorstCaseConfig& cfg) {
  cfg.validate();
  return detail::two_level_entropy(cfg.K, cfg.g());
}
inline double exact_rvq_entropy(int K, double d, double delta) {
  return exact_rvq_entropy(WorstCaseConfig{K, d, delta, 0.0, 0.0});
}

/// First-order approximation (K-1)(1+g)exp(-g); accurate only for large g.
inline double approx_rvq_entropy(const WorstCaseConfig& cfg) {
  cfg.validate();
  double g = cfg.g();
  return static_cast<double>(cfg.K - 1) * (1.0 + g) * std::exp(-g);
}
inline double approx_rvq_entropy(int K, double d, double delta) {
  return approx_rvq_entropy(WorstCaseConfig{K, d, delta, 0.0, 0.0});
}

/// Exact worst-case softmax entropy. The base logit c shifts every category
/// equally and cancels in normalization; the cancellation is algebraic here,
/// and asserted by test against explicit evaluation at several c.
inline double exact_softmax_entropy(const WorstCaseConfig& cfg) {
  cfg.validate();
  return detail::two_level_entropy(cfg.K, cfg.logit_gap);
}
inline double exact_softmax_entropy(int K, double logit_gap, double base_logit = 0.0) {
  return exact_softmax_entropy(WorstCaseConfig{K, 0.0, 0.0, logit_gap, base_logit});
}

inline double approx_softmax_entropy(const WorstCaseConfig& cfg) {
  cfg.validate();
  double l = cfg.logit_gap;
  return static_cast<double>(cfg.K - 1) * (1.0 + l) * std::exp(-l);
}
inline double approx_softmax_entropy(int K, double logit_gap) {
  return approx_softmax_entropy(WorstCaseConfig{K, 0.0, 0.0, logit_gap, 0.0});
}

struct CorollaryReport {
  double h_rvq = 0.0;
  double h_softmax = 0.0;
  // +1: rVQ larger, -1: softmax larger, 0: equal.
  int ordering = 0;
  double relative_gap = 0.0;
};

/// Compares the exact worst-case entropies with the network-output scale
/// identified across parameterisations (logit gap = d, base logit 0).
/// Refuses d below 10, where the large-output regime does not apply.
inline CorollaryReport corollary_compare(int K, double d, double delta) {
  if (d < 10.0) throw Error("corollary_compare: requires d >= 10 (large-output regime)");
  CorollaryReport r;
  r.h_rvq = exact_rvq_entropy(K, d, delta);
  r.h_softmax = exact_softmax_entropy(K, d, 0.0);
  r.ordering = r.h_rvq > r.h_softmax ? 1 : (r.h_rvq < r.h_softmax ? -1 : 0);
  double denom = std::max(r.h_rvq, r.h_softmax);
  r.relative_gap = denom > 0.0 ? (r.h_rvq - r.h_softmax) / denom : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Randomized-codebook simulation
// ---------------------------------------------------------------------------

/// Point uniform on the surface of the radius-r hypersphere.
inline std::vector<double> sample_sphere_surface(int dim, double radius, Rng& rng) {
  std::vector<double> v(dim);
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm2 += x * x;
    }
  } while (norm2 == 0.0);
  double scale = radius / std::sqrt(norm2);
  for (double& x : v) x *= scale;
  return v;
}

/// Point uniform in the solid ball of radius r.
inline std::vector<double> sample_ball(int dim, double radius, Rng& rng) {
  auto v = sample_sphere_surface(dim, radius, rng);
  double scale = std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
  for (double& x : v) x *= scale;
  return v;
}

/// Entropy of the unit-variance responsibility row for a query point against
/// a set of codebook points.
inline double rvq_point_entropy(const std::vector<double>& query,
                                const std::vector<std::vector<double>>& codebook) {
  std::size_t K = codebook.size();
  std::vector<double> logits(K);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < K; ++k) {
    double acc = 0.0;
    for (std::size_t d = 0; d < query.size(); ++d) {
      double t = query[d] - codebook[k][d];
      acc += t * t;
    }
    logits[k] = -0.5 * acc;
    mx = std::max(mx, logits[k]);
  }
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  double lz = mx + std::log(z);
  double h = 0.0;
  for (double l : logits) {
    double lp = l - lz;
    double p = std::exp(lp);
    if (p > 0.0) h -= p * lp;
  }
  return h;
}

struct McRow {
  double d = 0.0;
  double mean_entropy = 0.0;
  double min_entropy = 0.0;
  double worst_exact = 0.0;
  double worst_approx = 0.0;
};

/// For each query distance d: draws `trials` random codebooks of K points on
/// the radius-r hypersphere (surface by default, solid ball optionally),
/// places the query at distance d from the centre along a fresh random
/// direction, and records the mean and minimum responsibility entropy.
/// The worst-case columns use the sphere diameter as the separation delta.
/// Each trial runs on its own derived stream, so results are independent of
/// any partitioning of trials and merge deterministically by trial index.
inline std::vector<McRow> mc_codebook_entropy(const std::vector<double>& d_grid, int trials, int K,
                                              int d_e, double radius, std::uint64_t seed,
                                              bool ball = false) {
  if (trials < 1) throw Error("mc_codebook_entropy: trials must be >= 1");
  if (!(radius > 0.0)) throw Error("mc_codebook_entropy: radius must be positive");
  std::vector<McRow> rows;
  rows.reserve(d_grid.size());
  for (std::size_t di = 0; di < d_grid.size(); ++di) {
    double d = d_grid[di];
    double mean = 0.0;
    double mn = std::numeric_limits<double>::infinity();
    for (int t = 0; t < trials; ++t) {
      Rng rng = Rng::stream(seed, di * static_cast<std::size_t>(trials) + t);
      std::vector<std::vector<double>> cb(K);
      for (int k = 0; k < K; ++k)
        cb[k] = ball ? sample_ball(d_e, radius, rng) : sample_sphere_surface(d_e, radius, rng);
      auto dir = sample_sphere_surface(d_e, 1.0, rng);
      for (double& x : dir) x *= d;
      double h = rvq_point_entropy(dir, cb);
      mean += h;
      mn = std::min(mn, h);
    }
    mean /= trials;
    McRow row;
    row.d = d;
    row.mean_entropy = mean;
    row.min_entropy = mn;
    row.worst_exact = exact_rvq_entropy(K, d, 2.0 * radius);
    row.worst_approx = approx_rvq_entropy(K, d, 2.0 * radius);
    rows.push_back(row);
  }
  return rows;
}

inline std::string format_e12(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12e", v);
  return buf;
}

inline void write_mc_csv(const std::string& path, const std::vector<McRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path + " for writing");
  f << "d,mean_H_nats,min_H_nats,worst_exact_nats,worst_approx_nats\n";
  for (const auto& r : rows)
    f << format_e12(r.d) << ',' << format_e12(r.mean_entropy) << ',' << format_e12(r.min_entropy)
      << ',' << format_e12(r.worst_exact) << ',' << format_e12(r.worst_approx) << '\n';
}

struct CurveRow {
  double d = 0.0;
  double exact_rvq = 0.0, approx_rvq = 0.0;
  double exact_softmax = 0.0, approx_softmax = 0.0;
};

inline std::vector<CurveRow> worst_case_curve(int K, double delta, const std::vector<double>& d_grid) {
  std::vector<CurveRow> rows;
  rows.reserve(d_grid.size());
  for (double d : d_grid) {
    CurveRow r;
    r.d = d;
    r.exact_rvq = exact_rvq_entropy(K, d, delta);
    r.approx_rvq = approx_rvq_entropy(K, d, delta);
    r.exact_softmax = exact_softmax_entropy(K, d, 0.0);
    r.approx_softmax = approx_softmax_entropy(K, d);
    rows.push_back(r);
  }
  return rows;
}

inline void write_curve_csv(const std::string& path, const std::vector<CurveRow>& rows) {
  constexpr double kLn2 = 0.6931471805599453094;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path + " for writing");
  f << "d,exact_rvq_nats,approx_rvq_nats,exact_softmax_nats,approx_softmax_nats,"
       "exact_rvq_bits,approx_rvq_bits,exact_softmax_bits,approx_softmax_bits\n";
  for (const auto& r : rows)
    f << format_e12(r.d) << ',' << format_e12(r.exact_rvq) << ',' << format_e12(r.approx_rvq)
      << ',' << format_e12(r.exact_softmax) << ',' << format_e12(r.approx_softmax) << ','
      << format_e12(r.exact_rvq / kLn2) << ',' << format_e12(r.approx_rvq / kLn2) << ','
      << format_e12(r.exact_softmax / kLn2) << ',' << format_e12(r.approx_softmax / kLn2) << '\n';
}

}  // namespace entropy
}  // namespace rrvq
