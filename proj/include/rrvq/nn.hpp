#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rrvq/random.hpp"
#include "rrvq/tensor.hpp"

namespace rrvq {
namespace nn {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline Tensor init_weight(Shape shape, int fan_in, Rng& rng) {
  double half = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = rng.uniform(-half, half);
  return Tensor::from(std::move(shape), std::move(d), true);
}

}  // namespace detail

struct Conv2d {
  Tensor w;  // [Co,Ci,k,k]
  Tensor b;  // [Co]
  int stride = 1;
  int pad = 1;

  static Conv2d make(int ci, int co, int k, int stride, Rng& rng) {
    Conv2d c;
    c.w = detail::init_weight({co, ci, k, k}, ci * k * k, rng);
    c.b = Tensor::zeros({co}, true);
    c.stride = stride;
    c.pad = k / 2;
    return c;
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

struct ConvT2d {
  Tensor w;  // [Co,Ci,k,k]; maps Co channels to Ci channels
  Tensor b;  // [Ci]
  int stride = 2;
  int pad = 1;

  static ConvT2d make(int c_in, int c_out, int k, int stride, Rng& rng) {
    ConvT2d c;
    c.w = detail::init_weight({c_in, c_out, k, k}, c_in * k * k, rng);
    c.b = Tensor::zeros({c_out}, true);
    c.stride = stride;
    c.pad = k / 2;
    return c;
  }

  Tensor operator()(const Tensor& x, int out_h, int out_w) const {
    return conv2d_transpose(x, w, b, stride, pad, out_h, out_w);
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

struct Dense {
  Tensor w;  // [In,Out]
  Tensor b;  // [Out]

  static Dense make(int in, int out, Rng& rng) {
    Dense d;
    d.w = detail::init_weight({in, out}, in, rng);
    d.b = Tensor::zeros({out}, true);
    return d;
  }

  Tensor operator()(const Tensor& rows) const { return linear(rows, w, b); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

/// Two convolutions with ELU activations and an additive skip. The first
/// convolution carries the stride; when the block resizes, the identity path
/// rescales by nearest neighbour. `up` selects a transposed first convolution
/// that doubles the extent instead of halving it.
struct ResBlock {
  Conv2d c1;        // used when !up
  ConvT2d t1;       // used when up
  Conv2d c2;
  bool up = false;
  int stride = 1;

  static ResBlock down(int channels, int stride, Rng& rng) {
    ResBlock r;
    r.c1 = Conv2d::make(channels, channels, 3, stride, rng);
    r.c2 = Conv2d::make(channels, channels, 3, 1, rng);
    r.up = false;
    r.stride = stride;
    return r;
  }

  static ResBlock upsample(int channels, Rng& rng) {
    ResBlock r;
    r.t1 = ConvT2d::make(channels, channels, 3, 2, rng);
    r.c2 = Conv2d::make(channels, channels, 3, 1, rng);
    r.up = true;
    r.stride = 2;
    return r;
  }

  Tensor operator()(const Tensor& x) const {
    int H = x.dim(2), W = x.dim(3);
    int oh = up ? H * 2 : (stride == 1 ? H : H / stride);
    int ow = up ? W * 2 : (stride == 1 ? W : W / stride);
    Tensor h = elu(x);
    h = up ? t1(h, oh, ow) : c1(h);
    h = c2(elu(h));
    Tensor skip = (oh == H && ow == W) ? x : nearest_rescale(x, oh, ow);
    return add(skip, h);
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    if (up)
      t1.collect(prefix + ".t1", out);
    else
      c1.collect(prefix + ".c1", out);
    c2.collect(prefix + ".c2", out);
  }
};

}  // namespace nn
}  // namespace rrvq
