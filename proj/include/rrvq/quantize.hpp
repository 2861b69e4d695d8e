#pragma once

#include <cmath>
#include <vector>

#include "rrvq/distributions.hpp"
#include "rrvq/random.hpp"
#include "rrvq/tensor.hpp"

namespace rrvq {

constexpr double kLogVarClampLo = -7.0;
constexpr double kLogVarClampHi = 7.0;

/// Paired tables of component means and diagonal log variances over K
/// entries in embedding dimension d_e. With sigma_fixed the variances are
/// pinned to one and excluded from training. With scalar_sigma the table
/// holds one log variance per entry instead of one per dimension.
struct Codebook {
  Tensor means;     // [K, d_e]
  Tensor log_vars;  // [K, d_e] or [K, 1]
  bool sigma_fixed = false;

  int entries() const { return means.dim(0); }
  int embed_dim() const { return means.dim(1); }
};

inline Codebook init_codebook(int K, int d_e, Rng& rng, bool sigma_fixed = false,
                              bool scalar_sigma = false) {
  if (K < 1 || d_e < 1) throw Error("init_codebook: K and d_e must be >= 1");
  double half = 0.5 / std::sqrt(static_cast<double>(d_e));
  std::vector<double> m(static_cast<std::size_t>(K) * d_e);
  for (double& v : m) v = rng.uniform(-half, half);
  Codebook cb;
  cb.means = Tensor::from({K, d_e}, std::move(m), true);
  cb.log_vars = Tensor::zeros({K, scalar_sigma ? 1 : d_e}, !sigma_fixed);
  cb.sigma_fixed = sigma_fixed;
  return cb;
}

namespace detail {

inline void check_embed_dim(const char* op, const Tensor& e, const Codebook& cb) {
  if (e.rank() != 2 || e.dim(1) != cb.embed_dim())
    throw ShapeError(std::string(op) + ": embeddings " + shape_str(e.shape()) +
                     " do not match codebook dimension " + std::to_string(cb.embed_dim()));
}

}  // namespace detail

struct NearestLookup {
  std::vector<int> indices;
  CategoricalParams one_hot;
};

/// Deterministic nearest-neighbour assignment; ties resolve to the lowest
/// index. Not differentiable.
inline NearestLookup nearest_lookup(const Tensor& e, const Codebook& cb) {
  detail::check_embed_dim("nearest_lookup", e, cb);
  int M = e.dim(0), D = cb.embed_dim(), K = cb.entries();
  const auto& ev = e.values();
  const auto& cv = cb.means.values();
  std::vector<int> idx(M);
  for (int m = 0; m < M; ++m) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      double acc = 0.0;
      for (int d = 0; d < D; ++d) {
        double t = ev[m * D + d] - cv[k * D + d];
        acc += t * t;
      }
      if (acc < best_d) {
        best_d = acc;
        best = k;
      }
    }
    idx[m] = best;
  }
  return NearestLookup{idx, one_hot_categorical(idx, K)};
}

/// Responsibilities under unit-variance components:
/// log pi_{m,k} = -|e_m - mu_k|^2 / 2, row-normalized.
inline CategoricalParams rvq_responsibilities(const Tensor& e, const Codebook& cb) {
  detail::check_embed_dim("rvq_responsibilities", e, cb);
  return CategoricalParams{log_softmax(mul_scalar(pairwise_sq_dist(e, cb.means), -0.5), 1)};
}

/// Responsibilities under components with learnt diagonal variances. With
/// log_vars identically zero the rows coincide with rvq_responsibilities:
/// the Gaussian normalizer is constant across entries and cancels.
inline CategoricalParams rrvq_responsibilities(const Tensor& e, const Codebook& cb) {
  detail::check_embed_dim("rrvq_responsibilities", e, cb);
  Tensor lv = clamp(cb.log_vars, kLogVarClampLo, kLogVarClampHi);
  return CategoricalParams{log_softmax(pairwise_gaussian_logpdf(e, cb.means, lv), 1)};
}

inline CategoricalParams responsibilities(const Tensor& e, const Codebook& cb) {
  return cb.sigma_fixed ? rvq_responsibilities(e, cb) : rrvq_responsibilities(e, cb);
}

/// Convex combination of codebook means: one row of E_mu per one-hot row,
/// a blend for relaxed weights.
inline Tensor embed(const Tensor& weights, const Codebook& cb) {
  if (weights.rank() != 2 || weights.dim(1) != cb.entries())
    throw ShapeError("embed: weights " + shape_str(weights.shape()) +
                     " do not match codebook entries " + std::to_string(cb.entries()));
  return matmul(weights, cb.means);
}

inline Tensor embed(const RelaxedSample& s, const Codebook& cb) { return embed(s.weights, cb); }

/// Exact codebook rows for hard indices.
inline Tensor embed_hard(const std::vector<int>& indices, const Codebook& cb) {
  return gather_rows(cb.means, indices);
}

}  // namespace rrvq
