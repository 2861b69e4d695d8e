#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rrvq/tensor.hpp"

namespace rrvq {

struct GradCheckReport {
  double max_rel_dev = 0.0;
  std::size_t worst_index = 0;
  std::string worst_param;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double tol = 0.0;
  bool pass = false;
};

namespace detail {

// |a-n| / max(1, |a|, |n|): relative where gradients are large, absolute
// where they vanish.
inline double rel_dev(double a, double n) {
  return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

}  // namespace detail

/// Compares the analytic gradient of a scalar-valued f at `point` against
/// central finite differences with the given step.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& point, double step, double tol) {
  Tensor x = Tensor::from(point.shape(), point.values(), true);
  Tensor loss = f(x);
  if (loss.size() != 1) throw Error("grad_check: f must be scalar-valued");
  if (!std::isfinite(loss.value())) throw Error("grad_check: f(point) is not finite");
  backward(loss);
  std::vector<double> analytic = x.grad();

  GradCheckReport rep;
  rep.tol = tol;
  std::vector<double> v = point.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    double orig = v[i];
    v[i] = orig + step;
    double fp = f(Tensor::from(point.shape(), v)).value();
    v[i] = orig - step;
    double fm = f(Tensor::from(point.shape(), v)).value();
    v[i] = orig;
    double numeric = (fp - fm) / (2.0 * step);
    double dev = detail::rel_dev(analytic[i], numeric);
    if (dev >= rep.max_rel_dev) {
      rep.max_rel_dev = dev;
      rep.worst_index = i;
      rep.worst_analytic = analytic[i];
      rep.worst_numeric = numeric;
    }
  }
  rep.pass = rep.max_rel_dev < tol;
  return rep;
}

/// Finite-difference check over a set of named parameter tensors against a
/// loss closure that re-runs the forward pass (the closure must be
/// deterministic, e.g. by reseeding its noise source on every call).
inline GradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn,
                                         const std::vector<std::pair<std::string, Tensor>>& params,
                                         double step, double tol) {
  for (auto& [name, p] : params) p.zero_grad();
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.value())) throw Error("grad_check_params: loss is not finite");
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, p] : params) analytic.push_back(p.grad());

  GradCheckReport rep;
  rep.tol = tol;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi].second;
    auto& v = p.leaf_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      double orig = v[i];
      v[i] = orig + step;
      double fp = loss_fn().value();
      v[i] = orig - step;
      double fm = loss_fn().value();
      v[i] = orig;
      double numeric = (fp - fm) / (2.0 * step);
      double dev = detail::rel_dev(analytic[pi][i], numeric);
      if (dev >= rep.max_rel_dev) {
        rep.max_rel_dev = dev;
        rep.worst_index = i;
        rep.worst_param = params[pi].first;
        rep.worst_analytic = analytic[pi][i];
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.pass = rep.max_rel_dev < tol;
  return rep;
}

}  // namespace rrvq
