#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "rrvq/random.hpp"
#include "rrvq/tensor.hpp"

namespace rrvq {

/// Log probability assigned to the never-chosen categories of a one-hot row.
/// Finite, and exp() of it is exactly zero in double precision.
constexpr double kOneHotLogZero = -1e9;

/// Normalized per-position categorical distributions: log_probs is [M,K]
/// with every row log-sum-exping to zero.
struct CategoricalParams {
  Tensor log_probs;

  int rows() const { return log_probs.dim(0); }
  int categories() const { return log_probs.dim(1); }

  void validate(double tol = 1e-9) const {
    if (log_probs.rank() != 2)
      throw ShapeError("CategoricalParams: log_probs must be [M,K], got " +
                       shape_str(log_probs.shape()));
    const auto& v = log_probs.values();
    int M = rows(), K = categories();
    for (int m = 0; m < M; ++m) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) {
        if (!std::isfinite(v[m * K + k])) throw Error("CategoricalParams: non-finite log prob");
        mx = std::max(mx, v[m * K + k]);
      }
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += std::exp(v[m * K + k] - mx);
      if (std::abs(mx + std::log(acc)) > tol)
        throw Error("CategoricalParams: row " + std::to_string(m) + " is not normalized");
    }
  }
};

inline CategoricalParams categorical_from_logits(const Tensor& logits) {
  return CategoricalParams{log_softmax(logits, 1)};
}

inline CategoricalParams one_hot_categorical(const std::vector<int>& indices, int K) {
  std::vector<double> lp(indices.size() * static_cast<std::size_t>(K), kOneHotLogZero);
  for (std::size_t m = 0; m < indices.size(); ++m) lp[m * K + indices[m]] = 0.0;
  return CategoricalParams{Tensor::from({static_cast<int>(indices.size()), K}, std::move(lp))};
}

/// Simplex weights produced by a relaxed categorical sample.
struct RelaxedSample {
  Tensor weights;  // [M,K], rows on the simplex
  double temperature = 1.0;
};

/// Per-row entropy in nats.
inline std::vector<double> categorical_entropy(const CategoricalParams& p) {
  int M = p.rows(), K = p.categories();
  const auto& v = p.log_probs.values();
  std::vector<double> h(M, 0.0);
  for (int m = 0; m < M; ++m) {
    double acc = 0.0;
    for (int k = 0; k < K; ++k) {
      double lp = v[m * K + k];
      double pr = std::exp(lp);
      if (pr > 0.0) acc -= pr * lp;
    }
    h[m] = acc;
  }
  return h;
}

/// Per-row cross entropy H(q,p) in nats.
inline std::vector<double> categorical_cross_entropy(const CategoricalParams& q,
                                                     const CategoricalParams& p) {
  detail::check_same_shape("categorical_cross_entropy", q.log_probs, p.log_probs);
  int M = q.rows(), K = q.categories();
  const auto& qv = q.log_probs.values();
  const auto& pv = p.log_probs.values();
  std::vector<double> h(M, 0.0);
  for (int m = 0; m < M; ++m) {
    double acc = 0.0;
    for (int k = 0; k < K; ++k) {
      double pr = std::exp(qv[m * K + k]);
      if (pr > 0.0) acc -= pr * pv[m * K + k];
    }
    h[m] = acc;
  }
  return h;
}

/// Per-row KL(q||p) in nats, differentiable w.r.t. both log-prob tensors.
inline Tensor kl_categorical(const CategoricalParams& q, const CategoricalParams& p) {
  detail::check_same_shape("kl_categorical", q.log_probs, p.log_probs);
  return sum_axis(mul(exp(q.log_probs), sub(q.log_probs, p.log_probs)), 1);
}

/// Gumbel-Softmax sample: softmax((log pi + g)/tau) with g standard Gumbel.
/// Differentiable w.r.t. the log probabilities.
inline RelaxedSample gumbel_softmax_sample(const CategoricalParams& p, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw Error("gumbel_softmax_sample: temperature must be positive");
  std::vector<double> g(p.log_probs.size());
  for (double& v : g) v = rng.gumbel();
  Tensor noise = Tensor::from(p.log_probs.shape(), std::move(g));
  Tensor weights = softmax(mul_scalar(add(p.log_probs, noise), 1.0 / tau), 1);
  return RelaxedSample{weights, tau};
}

/// One draw per row, distributed per the row's probabilities.
inline std::vector<int> hard_sample(const CategoricalParams& p, Rng& rng) {
  int M = p.rows(), K = p.categories();
  const auto& v = p.log_probs.values();
  std::vector<int> idx(M);
  for (int m = 0; m < M; ++m) {
    double u = rng.uniform();
    double acc = 0.0;
    int chosen = K - 1;
    for (int k = 0; k < K; ++k) {
      acc += std::exp(v[m * K + k]);
      if (u < acc) {
        chosen = k;
        break;
      }
    }
    idx[m] = chosen;
  }
  return idx;
}

/// Argmax per row; ties resolve to the lowest index.
inline std::vector<int> mode(const CategoricalParams& p) {
  int M = p.rows(), K = p.categories();
  const auto& v = p.log_probs.values();
  std::vector<int> idx(M);
  for (int m = 0; m < M; ++m) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (v[m * K + k] > v[m * K + best]) best = k;
    idx[m] = best;
  }
  return idx;
}

inline Tensor one_hot_rows(const std::vector<int>& indices, int K) {
  std::vector<double> w(indices.size() * static_cast<std::size_t>(K), 0.0);
  for (std::size_t m = 0; m < indices.size(); ++m) w[m * K + indices[m]] = 1.0;
  return Tensor::from({static_cast<int>(indices.size()), K}, std::move(w));
}

// ---------------------------------------------------------------------------
// Diagonal Gaussians
// ---------------------------------------------------------------------------

constexpr double kLogStdClampLo = -7.0;
constexpr double kLogStdClampHi = 7.0;

struct DiagonalGaussianParams {
  Tensor mean;
  Tensor log_std;  // clamped to [-7,7] at construction
};

inline DiagonalGaussianParams make_gaussian(const Tensor& mean, const Tensor& log_std_raw) {
  detail::check_same_shape("make_gaussian", mean, log_std_raw);
  return DiagonalGaussianParams{mean, clamp(log_std_raw, kLogStdClampLo, kLogStdClampHi)};
}

/// Total KL(N(mu,sigma) || N(0,I)) = 1/2 sum(mu^2 + sigma^2 - 1 - 2 log sigma).
inline Tensor gaussian_kl_std_normal(const DiagonalGaussianParams& g) {
  Tensor var = exp(mul_scalar(g.log_std, 2.0));
  Tensor per = add_scalar(sub(add(square(g.mean), var), mul_scalar(g.log_std, 2.0)), -1.0);
  return mul_scalar(sum(per), 0.5);
}

/// Total KL between two diagonal Gaussians.
inline Tensor kl_diag_gaussians(const DiagonalGaussianParams& q, const DiagonalGaussianParams& p) {
  detail::check_same_shape("kl_diag_gaussians", q.mean, p.mean);
  Tensor var_ratio = exp(mul_scalar(sub(q.log_std, p.log_std), 2.0));
  Tensor md = square(sub(q.mean, p.mean));
  Tensor inv_pvar = exp(mul_scalar(p.log_std, -2.0));
  Tensor per = add_scalar(add(sub(p.log_std, q.log_std),
                              mul_scalar(add(var_ratio, mul(md, inv_pvar)), 0.5)),
                          -0.5);
  return sum(per);
}

/// Reparameterized sample mu + sigma*eps, differentiable through mu, sigma.
inline Tensor gaussian_rsample(const DiagonalGaussianParams& g, Rng& rng) {
  std::vector<double> e(g.mean.size());
  for (double& v : e) v = rng.normal();
  Tensor eps = Tensor::from(g.mean.shape(), std::move(e));
  return add(g.mean, mul(exp(g.log_std), eps));
}

// ---------------------------------------------------------------------------
// Discretized logistic pixel likelihood
// ---------------------------------------------------------------------------

/// Half-width of one intensity bin with pixels mapped to [0,1]; this choice
/// makes the 256 bin probabilities sum to one exactly.
constexpr double kHalfBin = 1.0 / 510.0;
constexpr double kPmfFloor = 1e-12;

/// Pixel likelihood parameters: per-subpixel mean in [0,1] ([N,C,H,W]) and
/// one log scale per channel ([C]).
struct DiscretizedLogisticParams {
  Tensor mean;
  Tensor log_scale;
};

/// Log pmf of 8-bit levels under a discretized logistic with per-subpixel
/// mean in [0,1] and per-channel log scale. mean is [N,C,H,W], log_scale is
/// [C], levels are the raw 0..255 values in the same layout as mean.
/// Differentiable w.r.t. mean and log_scale.
inline Tensor discretized_logistic_logpmf(const Tensor& mean, const Tensor& log_scale,
                                          const std::vector<std::uint8_t>& levels) {
  if (mean.rank() != 4) throw ShapeError("discretized_logistic_logpmf: mean must be [N,C,H,W]");
  int C = mean.dim(1);
  if (log_scale.rank() != 1 || log_scale.dim(0) != C)
    throw ShapeError("discretized_logistic_logpmf: log_scale " + shape_str(log_scale.shape()) +
                     " does not match C=" + std::to_string(C));
  if (levels.size() != mean.size())
    throw Error("discretized_logistic_logpmf: level count " + std::to_string(levels.size()) +
                " does not match mean size " + std::to_string(mean.size()));

  auto sig = [](double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
  };

  int N = mean.dim(0), H = mean.dim(2), W = mean.dim(3);
  std::size_t hw = static_cast<std::size_t>(H) * W;
  auto out = detail::new_node(mean.shape(), "discretized_logistic_logpmf",
                              {mean.node(), log_scale.node()});
  const auto& mv = mean.values();
  const auto& sv = log_scale.values();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double s = std::exp(sv[c]);
      for (std::size_t p = 0; p < hw; ++p) {
        std::size_t i = (n * C + c) * hw + p;
        int x = levels[i];
        double u = x / 255.0;
        double a = (u + kHalfBin - mv[i]) / s;
        double b = (u - kHalfBin - mv[i]) / s;
        double pmf;
        if (x == 0)
          pmf = sig(a);
        else if (x == 255)
          pmf = 1.0 - sig(b);
        else
          pmf = sig(a) - sig(b);
        out->val[i] = std::log(std::max(pmf, kPmfFloor));
      }
    }

  if (out->requires_grad) {
    detail::Node* pm = mean.node().get();
    detail::Node* ps = log_scale.node().get();
    auto lv = levels;
    out->backprop = [pm, ps, lv, sig, N, C, hw](detail::Node& n) {
      if (pm->requires_grad) pm->ensure_grad();
      if (ps->requires_grad) ps->ensure_grad();
      for (int b_ = 0; b_ < N; ++b_)
        for (int c = 0; c < C; ++c) {
          double s = std::exp(ps->val[c]);
          for (std::size_t p = 0; p < hw; ++p) {
            std::size_t i = (b_ * C + c) * hw + p;
            double g = n.grad[i];
            if (g == 0.0) continue;
            int x = lv[i];
            double u = x / 255.0;
            double a = (u + kHalfBin - pm->val[i]) / s;
            double b = (u - kHalfBin - pm->val[i]) / s;
            double sa = sig(a), sb = sig(b);
            double da = sa * (1.0 - sa), db = sb * (1.0 - sb);
            double pmf, dmu, dls;
            if (x == 0) {
              pmf = sa;
              dmu = -da / s;
              dls = -a * da;
            } else if (x == 255) {
              pmf = 1.0 - sb;
              dmu = db / s;
              dls = b * db;
            } else {
              pmf = sa - sb;
              dmu = (db - da) / s;
              dls = b * db - a * da;
            }
            if (pmf <= kPmfFloor) continue;  // clamped bins carry no gradient
            if (pm->requires_grad) pm->grad[i] += g * dmu / pmf;
            if (ps->requires_grad) ps->grad[c] += g * dls / pmf;
          }
        }
    };
  }
  return Tensor(out);
}

inline Tensor discretized_logistic_logpmf(const DiscretizedLogisticParams& p,
                                          const std::vector<std::uint8_t>& levels) {
  return discretized_logistic_logpmf(p.mean, p.log_scale, levels);
}

/// Picks log_probs[o, idx, i] along the given axis: t has the axis of length
/// Q, indices has one entry per remaining position (outer-major, inner-minor).
inline Tensor take_along_axis(const Tensor& t, int axis, const std::vector<int>& indices) {
  auto sp = detail::axis_split(t.shape(), axis);
  if (indices.size() != sp.outer * sp.inner)
    throw Error("take_along_axis: need " + std::to_string(sp.outer * sp.inner) + " indices, got " +
                std::to_string(indices.size()));
  auto out = detail::new_node(detail::drop_axis(t.shape(), axis), "take_along_axis", {t.node()});
  const auto& tv = t.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      int k = indices[o * sp.inner + i];
      if (k < 0 || k >= static_cast<int>(sp.len))
        throw Error("take_along_axis: index " + std::to_string(k) + " out of range");
      out->val[o * sp.inner + i] = tv[(o * sp.len + k) * sp.inner + i];
    }
  if (out->requires_grad) {
    detail::Node* pt = t.node().get();
    auto idx = indices;
    out->backprop = [pt, idx, sp](detail::Node& n) {
      pt->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i)
          pt->grad[(o * sp.len + idx[o * sp.inner + i]) * sp.inner + i] +=
              n.grad[o * sp.inner + i];
    };
  }
  return Tensor(out);
}

/// Per-subpixel categorical likelihood over the 256 levels. logits is
/// [N, C*256, H, W] from a decoder head; levels as for the logistic.
inline Tensor categorical_pixel_logpmf(const Tensor& logits, const std::vector<std::uint8_t>& levels) {
  if (logits.rank() != 4 || logits.dim(1) % 256 != 0)
    throw ShapeError("categorical_pixel_logpmf: logits must be [N,C*256,H,W], got " +
                     shape_str(logits.shape()));
  int N = logits.dim(0), C = logits.dim(1) / 256, H = logits.dim(2), W = logits.dim(3);
  if (levels.size() != static_cast<std::size_t>(N) * C * H * W)
    throw Error("categorical_pixel_logpmf: level count does not match logits");
  Tensor lp = log_softmax(reshape(logits, {N, C, 256, H, W}), 2);
  std::vector<int> idx(levels.begin(), levels.end());
  return reshape(take_along_axis(lp, 2, idx), {N, C, H, W});
}

}  // namespace rrvq
