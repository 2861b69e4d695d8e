#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rrvq/config.hpp"
#include "rrvq/distributions.hpp"
#include "rrvq/image.hpp"
#include "rrvq/nn.hpp"
#include "rrvq/quantize.hpp"
#include "rrvq/random.hpp"
#include "rrvq/tensor.hpp"

namespace rrvq {

enum class PassMode { Relaxed, HardSample, ModeArgmax };

/// Hierarchical VAE with a shared downward chain: the posterior conditions
/// lower layers on the same decoder features the generative model uses, so
/// those networks exist once and appear in both passes.
struct Model {
  ModelConfig cfg;

  // convolutional backbone
  std::vector<nn::Conv2d> stem;        // image -> bottom grid, stride 2 each
  std::vector<nn::ResBlock> enc;       // [i]: grid i -> grid i+1
  std::vector<nn::Conv2d> qladder;     // per layer, backbone -> embedding
  std::vector<nn::Conv2d> qladder_ls;  // gaussian second head
  std::vector<nn::ConvT2d> qstrap;     // [l]: d-feature l+1 -> embedding at l
  std::vector<nn::ConvT2d> qstrap_ls;
  std::vector<nn::Conv2d> pladder;     // embedding -> backbone
  std::vector<nn::ResBlock> dec;       // [l]: d-feature l+1 -> grid l
  std::vector<nn::ConvT2d> pstrap;     // [l]: d-feature l+1 -> embedding at l
  std::vector<nn::ConvT2d> pstrap_ls;
  std::vector<nn::ConvT2d> direct_head;  // [l]: d-feature l+1 -> K_l logits
  std::vector<nn::ConvT2d> dstem;        // bottom grid -> image extent
  nn::Conv2d like_head;
  // learnt top prior
  Tensor d_top;
  nn::ResBlock dec_top;
  nn::Conv2d pstrap_top, pstrap_top_ls, direct_top;

  // dense backbone
  nn::Dense mstem;
  std::vector<nn::Dense> menc, mdec;
  std::vector<nn::Dense> mqladder, mqladder_ls, mqstrap, mqstrap_ls;
  std::vector<nn::Dense> mpladder, mpstrap, mpstrap_ls, mdirect;
  nn::Dense mdec_top, mpstrap_top, mpstrap_top_ls, mdirect_top, mlike;

  Tensor dl_log_scale;  // [3], discretized-logistic scales
  std::vector<Codebook> codebooks;

  int layers() const { return cfg.num_layers(); }
  bool conv() const { return cfg.encoder_kind == EncoderKind::ConvResnet; }
  bool discrete() const { return cfg.latent_kind == LatentKind::Discrete; }
  bool gaussian() const { return cfg.latent_kind == LatentKind::Gaussian; }
  bool learnt_top() const { return cfg.top_prior == TopPrior::Learnt; }
  int grid(int l) const { return cfg.layers[l].grid_side; }
  int cats(int l) const { return cfg.layers[l].K; }

  static Model init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    int L = cfg.num_layers();
    int C = cfg.channels, de = cfg.d_e, H = cfg.hidden;
    bool g = cfg.latent_kind == LatentKind::Gaussian;
    bool direct = !g && cfg.p_param == PParam::DirectCat;

    if (cfg.encoder_kind == EncoderKind::ConvResnet) {
      int in_ch = cfg.image_channels;
      for (int i = 0; i < cfg.stem_depth(); ++i) {
        m.stem.push_back(nn::Conv2d::make(in_ch, C, 3, 2, rng));
        in_ch = C;
      }
      for (int i = 0; i + 1 < L; ++i) {
        m.enc.push_back(nn::ResBlock::down(C, 2, rng));
        m.dec.push_back(nn::ResBlock::upsample(C, rng));
        m.qstrap.push_back(nn::ConvT2d::make(C, de, 3, 2, rng));
        if (g) m.qstrap_ls.push_back(nn::ConvT2d::make(C, de, 3, 2, rng));
        if (direct)
          m.direct_head.push_back(nn::ConvT2d::make(C, cfg.layers[i].K, 3, 2, rng));
        else
          m.pstrap.push_back(nn::ConvT2d::make(C, de, 3, 2, rng));
        if (g) m.pstrap_ls.push_back(nn::ConvT2d::make(C, de, 3, 2, rng));
      }
      for (int l = 0; l < L; ++l) {
        m.qladder.push_back(nn::Conv2d::make(C, de, 3, 1, rng));
        if (g) m.qladder_ls.push_back(nn::Conv2d::make(C, de, 3, 1, rng));
        m.pladder.push_back(nn::Conv2d::make(de, C, 3, 1, rng));
      }
      for (int i = 0; i < cfg.stem_depth(); ++i) m.dstem.push_back(nn::ConvT2d::make(C, C, 3, 2, rng));
      int out_ch = cfg.likelihood == Likelihood::Categorical256 ? cfg.image_channels * 256
                                                                : cfg.image_channels;
      m.like_head = nn::Conv2d::make(C, out_ch, 3, 1, rng);
      if (cfg.top_prior == TopPrior::Learnt) {
        int gL = cfg.layers[L - 1].grid_side;
        m.d_top = nn::detail::init_weight({1, C, gL, gL}, C, rng);
        m.dec_top = nn::ResBlock::down(C, 1, rng);
        if (g) {
          m.pstrap_top = nn::Conv2d::make(C, de, 3, 1, rng);
          m.pstrap_top_ls = nn::Conv2d::make(C, de, 3, 1, rng);
        } else if (direct) {
          m.direct_top = nn::Conv2d::make(C, cfg.layers[L - 1].K, 3, 1, rng);
        } else {
          m.pstrap_top = nn::Conv2d::make(C, de, 3, 1, rng);
        }
      }
    } else {
      int in = cfg.subpixels();
      m.mstem = nn::Dense::make(in, H, rng);
      for (int i = 0; i + 1 < L; ++i) {
        m.menc.push_back(nn::Dense::make(H, H, rng));
        m.mdec.push_back(nn::Dense::make(H, H, rng));
        m.mqstrap.push_back(nn::Dense::make(H, cfg.latents_at(i) * de, rng));
        if (g) m.mqstrap_ls.push_back(nn::Dense::make(H, cfg.latents_at(i) * de, rng));
        if (direct)
          m.mdirect.push_back(nn::Dense::make(H, cfg.latents_at(i) * cfg.layers[i].K, rng));
        else
          m.mpstrap.push_back(nn::Dense::make(H, cfg.latents_at(i) * de, rng));
        if (g) m.mpstrap_ls.push_back(nn::Dense::make(H, cfg.latents_at(i) * de, rng));
      }
      for (int l = 0; l < L; ++l) {
        m.mqladder.push_back(nn::Dense::make(H, cfg.latents_at(l) * de, rng));
        if (g) m.mqladder_ls.push_back(nn::Dense::make(H, cfg.latents_at(l) * de, rng));
        m.mpladder.push_back(nn::Dense::make(cfg.latents_at(l) * de, H, rng));
      }
      int out = cfg.subpixels() * (cfg.likelihood == Likelihood::Categorical256 ? 256 : 1);
      m.mlike = nn::Dense::make(H, out, rng);
      if (cfg.top_prior == TopPrior::Learnt) {
        m.d_top = nn::detail::init_weight({1, H}, H, rng);
        m.mdec_top = nn::Dense::make(H, H, rng);
        if (g) {
          m.mpstrap_top = nn::Dense::make(H, cfg.latents_at(L - 1) * de, rng);
          m.mpstrap_top_ls = nn::Dense::make(H, cfg.latents_at(L - 1) * de, rng);
        } else if (direct) {
          m.mdirect_top = nn::Dense::make(H, cfg.latents_at(L - 1) * cfg.layers[L - 1].K, rng);
        } else {
          m.mpstrap_top = nn::Dense::make(H, cfg.latents_at(L - 1) * de, rng);
        }
      }
    }

    if (cfg.likelihood == Likelihood::DiscretizedLogistic)
      m.dl_log_scale = Tensor::zeros({cfg.image_channels}, true);
    if (!g) {
      for (int l = 0; l < L; ++l)
        m.codebooks.push_back(init_codebook(cfg.layers[l].K, de, rng,
                                            cfg.sigma_mode == SigmaMode::FixedOne,
                                            cfg.scalar_sigma));
    }
    return m;
  }

  nn::NamedParams parameters() const {
    nn::NamedParams p;
    auto num = [](const std::string& base, std::size_t i) { return base + "." + std::to_string(i); };
    for (std::size_t i = 0; i < stem.size(); ++i) stem[i].collect(num("stem", i), p);
    for (std::size_t i = 0; i < enc.size(); ++i) enc[i].collect(num("enc", i), p);
    for (std::size_t i = 0; i < qladder.size(); ++i) qladder[i].collect(num("qladder", i), p);
    for (std::size_t i = 0; i < qladder_ls.size(); ++i) qladder_ls[i].collect(num("qladder_ls", i), p);
    for (std::size_t i = 0; i < qstrap.size(); ++i) qstrap[i].collect(num("qstrap", i), p);
    for (std::size_t i = 0; i < qstrap_ls.size(); ++i) qstrap_ls[i].collect(num("qstrap_ls", i), p);
    for (std::size_t i = 0; i < pladder.size(); ++i) pladder[i].collect(num("pladder", i), p);
    for (std::size_t i = 0; i < dec.size(); ++i) dec[i].collect(num("dec", i), p);
    for (std::size_t i = 0; i < pstrap.size(); ++i) pstrap[i].collect(num("pstrap", i), p);
    for (std::size_t i = 0; i < pstrap_ls.size(); ++i) pstrap_ls[i].collect(num("pstrap_ls", i), p);
    for (std::size_t i = 0; i < direct_head.size(); ++i) direct_head[i].collect(num("direct", i), p);
    for (std::size_t i = 0; i < dstem.size(); ++i) dstem[i].collect(num("dstem", i), p);
    if (conv()) like_head.collect("like_head", p);
    if (learnt_top()) {
      p.emplace_back("d_top", d_top);
      if (conv()) {
        dec_top.collect("dec_top", p);
        if (gaussian()) {
          pstrap_top.collect("pstrap_top", p);
          pstrap_top_ls.collect("pstrap_top_ls", p);
        } else if (cfg.p_param == PParam::DirectCat) {
          direct_top.collect("direct_top", p);
        } else {
          pstrap_top.collect("pstrap_top", p);
        }
      } else {
        mdec_top.collect("mdec_top", p);
        if (gaussian()) {
          mpstrap_top.collect("mpstrap_top", p);
          mpstrap_top_ls.collect("mpstrap_top_ls", p);
        } else if (cfg.p_param == PParam::DirectCat) {
          mdirect_top.collect("mdirect_top", p);
        } else {
          mpstrap_top.collect("mpstrap_top", p);
        }
      }
    }
    if (!conv()) {
      mstem.collect("mstem", p);
      for (std::size_t i = 0; i < menc.size(); ++i) menc[i].collect(num("menc", i), p);
      for (std::size_t i = 0; i < mdec.size(); ++i) mdec[i].collect(num("mdec", i), p);
      for (std::size_t i = 0; i < mqladder.size(); ++i) mqladder[i].collect(num("mqladder", i), p);
      for (std::size_t i = 0; i < mqladder_ls.size(); ++i)
        mqladder_ls[i].collect(num("mqladder_ls", i), p);
      for (std::size_t i = 0; i < mqstrap.size(); ++i) mqstrap[i].collect(num("mqstrap", i), p);
      for (std::size_t i = 0; i < mqstrap_ls.size(); ++i)
        mqstrap_ls[i].collect(num("mqstrap_ls", i), p);
      for (std::size_t i = 0; i < mpladder.size(); ++i) mpladder[i].collect(num("mpladder", i), p);
      for (std::size_t i = 0; i < mpstrap.size(); ++i) mpstrap[i].collect(num("mpstrap", i), p);
      for (std::size_t i = 0; i < mpstrap_ls.size(); ++i)
        mpstrap_ls[i].collect(num("mpstrap_ls", i), p);
      for (std::size_t i = 0; i < mdirect.size(); ++i) mdirect[i].collect(num("mdirect", i), p);
      mlike.collect("mlike", p);
    }
    if (dl_log_scale.defined()) p.emplace_back("dl_log_scale", dl_log_scale);
    for (std::size_t l = 0; l < codebooks.size(); ++l) {
      p.emplace_back(num("codebook", l) + ".means", codebooks[l].means);
      if (!codebooks[l].sigma_fixed) p.emplace_back(num("codebook", l) + ".log_vars", codebooks[l].log_vars);
    }
    return p;
  }
};

// ---------------------------------------------------------------------------
// Pass results
// ---------------------------------------------------------------------------

struct LayerLatent {
  /// Discrete: [N*M, K] relaxed weights or one-hot rows. Gaussian: z itself
  /// as [N*M, d_e] rows.
  Tensor weights;
  std::vector<int> indices;  // populated for hard/mode discrete latents
};

struct LayerPosterior {
  CategoricalParams q;
  DiagonalGaussianParams q_gauss;
  LayerLatent latent;
  Tensor embedding;  // rows fed into the downward chain
};

struct PosteriorResult {
  std::vector<LayerPosterior> layers;  // [0] = bottom
  std::vector<Tensor> d_feats;         // shared downward features per layer

  std::vector<LayerLatent> latents() const {
    std::vector<LayerLatent> out;
    out.reserve(layers.size());
    for (const auto& l : layers) out.push_back(l.latent);
    return out;
  }
};

struct LayerPrior {
  CategoricalParams p;
  DiagonalGaussianParams p_gauss;
};

struct LikelihoodOut {
  Tensor dl_mean;     // [N,3,s,s] in [0,1]
  Tensor cat_logits;  // [N,3*256,s,s]
};

struct GenerativeResult {
  std::vector<LayerPrior> layers;
  std::vector<LayerLatent> latents;
  LikelihoodOut like;
  std::vector<Tensor> d_feats;
};

namespace detail_model {

// qladder/qstrap/pstrap application, conv and dense
inline Tensor head_rows_conv(const nn::Conv2d& head, const Tensor& feat) {
  return nchw_to_rows(head(feat));
}
inline Tensor head_rows_convt(const nn::ConvT2d& head, const Tensor& feat, int out_grid) {
  return nchw_to_rows(head(feat, out_grid, out_grid));
}
inline Tensor head_rows_dense(const nn::Dense& head, const Tensor& feat, int n, int M, int width) {
  return reshape(head(feat), {n * M, width});
}

inline Tensor uniform_log_rows(int rows, int K) {
  return Tensor::full({rows, K}, -std::log(static_cast<double>(K)));
}

}  // namespace detail_model

/// Chooses the latent for a layer during a top-down generative descent.
using LatentChooser = std::function<LayerLatent(int layer, const LayerPrior& prior)>;

inline LayerLatent choose_from_prior(const Model& m, int l, const LayerPrior& prior,
                                     PassMode pass_mode, double tau, Rng& rng) {
  LayerLatent lat;
  if (m.discrete()) {
    switch (pass_mode) {
      case PassMode::Relaxed:
        lat.weights = gumbel_softmax_sample(prior.p, tau, rng).weights;
        break;
      case PassMode::HardSample:
        lat.indices = hard_sample(prior.p, rng);
        lat.weights = one_hot_rows(lat.indices, m.cats(l));
        break;
      case PassMode::ModeArgmax:
        lat.indices = mode(prior.p);
        lat.weights = one_hot_rows(lat.indices, m.cats(l));
        break;
    }
  } else {
    lat.weights = pass_mode == PassMode::ModeArgmax ? prior.p_gauss.mean
                                                    : gaussian_rsample(prior.p_gauss, rng);
  }
  return lat;
}

// ---------------------------------------------------------------------------
// Posterior pass
// ---------------------------------------------------------------------------

inline PosteriorResult posterior_pass(const Model& m, const ImageBatch& x, PassMode pass_mode,
                                      double tau, Rng& rng) {
  const ModelConfig& cfg = m.cfg;
  if (x.side != cfg.image_side || x.channels != cfg.image_channels)
    throw ShapeError("posterior_pass: batch " + std::to_string(x.side) + "x" +
                     std::to_string(x.side) + " does not match config side " +
                     std::to_string(cfg.image_side));
  int L = m.layers(), n = x.n, de = cfg.d_e;

  // bottom-up deterministic chain
  std::vector<Tensor> dhat(L);
  if (m.conv()) {
    Tensor h = x.unit_tensor();
    for (std::size_t i = 0; i < m.stem.size(); ++i) {
      h = m.stem[i](h);
      if (i + 1 < m.stem.size()) h = elu(h);
    }
    dhat[0] = h;
    for (int i = 0; i + 1 < L; ++i) dhat[i + 1] = m.enc[i](dhat[i]);
  } else {
    Tensor h = elu(m.mstem(reshape(x.unit_tensor(), {n, cfg.subpixels()})));
    dhat[0] = h;
    for (int i = 0; i + 1 < L; ++i) dhat[i + 1] = elu(m.menc[i](dhat[i]));
  }

  PosteriorResult res;
  res.layers.resize(L);
  res.d_feats.resize(L);

  for (int l = L - 1; l >= 0; --l) {
    int M = cfg.latents_at(l);
    Tensor e = m.conv() ? detail_model::head_rows_conv(m.qladder[l], dhat[l])
                        : detail_model::head_rows_dense(m.mqladder[l], dhat[l], n, M, de);
    Tensor e_ls;
    if (m.gaussian())
      e_ls = m.conv() ? detail_model::head_rows_conv(m.qladder_ls[l], dhat[l])
                      : detail_model::head_rows_dense(m.mqladder_ls[l], dhat[l], n, M, de);
    if (l + 1 < L) {
      Tensor skip = m.conv()
                        ? detail_model::head_rows_convt(m.qstrap[l], res.d_feats[l + 1], m.grid(l))
                        : detail_model::head_rows_dense(m.mqstrap[l], res.d_feats[l + 1], n, M, de);
      e = add(e, skip);
      if (m.gaussian()) {
        Tensor skip_ls =
            m.conv() ? detail_model::head_rows_convt(m.qstrap_ls[l], res.d_feats[l + 1], m.grid(l))
                     : detail_model::head_rows_dense(m.mqstrap_ls[l], res.d_feats[l + 1], n, M, de);
        e_ls = add(e_ls, skip_ls);
      }
    }

    LayerPosterior& lp = res.layers[l];
    if (m.discrete()) {
      lp.q = responsibilities(e, m.codebooks[l]);
      switch (pass_mode) {
        case PassMode::Relaxed:
          lp.latent.weights = gumbel_softmax_sample(lp.q, tau, rng).weights;
          lp.embedding = embed(lp.latent.weights, m.codebooks[l]);
          break;
        case PassMode::HardSample:
          lp.latent.indices = hard_sample(lp.q, rng);
          lp.latent.weights = one_hot_rows(lp.latent.indices, m.cats(l));
          lp.embedding = embed_hard(lp.latent.indices, m.codebooks[l]);
          break;
        case PassMode::ModeArgmax:
          lp.latent.indices = mode(lp.q);
          lp.latent.weights = one_hot_rows(lp.latent.indices, m.cats(l));
          lp.embedding = embed_hard(lp.latent.indices, m.codebooks[l]);
          break;
      }
    } else {
      lp.q_gauss = make_gaussian(e, e_ls);
      lp.latent.weights = pass_mode == PassMode::ModeArgmax ? lp.q_gauss.mean
                                                            : gaussian_rsample(lp.q_gauss, rng);
      lp.embedding = lp.latent.weights;
    }

    // shared downward chain
    Tensor down;
    if (m.conv()) {
      down = m.pladder[l](rows_to_nchw(lp.embedding, n, de, m.grid(l), m.grid(l)));
      if (l + 1 < L)
        down = add(down, m.dec[l](res.d_feats[l + 1]));
      else if (m.learnt_top())
        down = add(down, m.dec_top(repeat_batch(m.d_top, n)));
    } else {
      down = m.mpladder[l](reshape(lp.embedding, {n, M * de}));
      if (l + 1 < L)
        down = add(down, elu(m.mdec[l](res.d_feats[l + 1])));
      else if (m.learnt_top())
        down = add(down, elu(m.mdec_top(repeat_batch(m.d_top, n))));
    }
    res.d_feats[l] = down;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Generative pass
// ---------------------------------------------------------------------------

namespace detail_model {

inline LayerPrior prior_at(const Model& m, int l, const Tensor& d_above, int n) {
  const ModelConfig& cfg = m.cfg;
  int L = m.layers(), M = cfg.latents_at(l), de = cfg.d_e;
  LayerPrior pr;
  bool top = (l == L - 1);
  if (top && !m.learnt_top()) {
    if (m.discrete())
      pr.p = CategoricalParams{uniform_log_rows(n * M, m.cats(l))};
    else
      pr.p_gauss = make_gaussian(Tensor::zeros({n * M, de}), Tensor::zeros({n * M, de}));
    return pr;
  }
  // d_above: for the top layer this is the raw learnt feature, otherwise the
  // d-feature of layer l+1.
  if (m.discrete() && cfg.p_param == PParam::EmbedCat) {
    Tensor e = top ? (m.conv() ? head_rows_conv(m.pstrap_top, d_above)
                               : head_rows_dense(m.mpstrap_top, d_above, n, M, de))
                   : (m.conv() ? head_rows_convt(m.pstrap[l], d_above, m.grid(l))
                               : head_rows_dense(m.mpstrap[l], d_above, n, M, de));
    pr.p = responsibilities(e, m.codebooks[l]);
  } else if (m.discrete()) {
    int K = m.cats(l);
    Tensor logits = top ? (m.conv() ? head_rows_conv(m.direct_top, d_above)
                                    : head_rows_dense(m.mdirect_top, d_above, n, M, K))
                        : (m.conv() ? head_rows_convt(m.direct_head[l], d_above, m.grid(l))
                                    : head_rows_dense(m.mdirect[l], d_above, n, M, K));
    pr.p = categorical_from_logits(logits);
  } else {
    Tensor mu = top ? (m.conv() ? head_rows_conv(m.pstrap_top, d_above)
                                : head_rows_dense(m.mpstrap_top, d_above, n, M, de))
                    : (m.conv() ? head_rows_convt(m.pstrap[l], d_above, m.grid(l))
                                : head_rows_dense(m.mpstrap[l], d_above, n, M, de));
    Tensor ls = top ? (m.conv() ? head_rows_conv(m.pstrap_top_ls, d_above)
                                : head_rows_dense(m.mpstrap_top_ls, d_above, n, M, de))
                    : (m.conv() ? head_rows_convt(m.pstrap_ls[l], d_above, m.grid(l))
                                : head_rows_dense(m.mpstrap_ls[l], d_above, n, M, de));
    pr.p_gauss = make_gaussian(mu, ls);
  }
  return pr;
}

inline Tensor embed_latent(const Model& m, int l, const LayerLatent& lat) {
  if (!m.discrete()) return lat.weights;
  if (!lat.indices.empty()) return embed_hard(lat.indices, m.codebooks[l]);
  return embed(lat.weights, m.codebooks[l]);
}

inline LikelihoodOut likelihood_from(const Model& m, const Tensor& d0, int n) {
  const ModelConfig& cfg = m.cfg;
  LikelihoodOut out;
  Tensor h;
  if (m.conv()) {
    h = d0;
    int extent = cfg.layers[0].grid_side;
    for (std::size_t i = 0; i < m.dstem.size(); ++i) {
      extent *= 2;
      h = m.dstem[i](elu(h), extent, extent);
    }
    h = m.like_head(elu(h));
  } else {
    int chans = cfg.image_channels * (cfg.likelihood == Likelihood::Categorical256 ? 256 : 1);
    h = reshape(m.mlike(d0), {n, chans, cfg.image_side, cfg.image_side});
  }
  if (cfg.likelihood == Likelihood::DiscretizedLogistic)
    out.dl_mean = sigmoid(h);
  else
    out.cat_logits = h;
  return out;
}

}  // namespace detail_model

/// Top-down generative descent. The chooser supplies each layer's latent,
/// enabling teacher-forced scoring, ancestral sampling and layerwise
/// resampling through one code path.
inline GenerativeResult generative_descend(const Model& m, int n, const LatentChooser& choose) {
  const ModelConfig& cfg = m.cfg;
  int L = m.layers(), de = cfg.d_e;
  GenerativeResult res;
  res.layers.resize(L);
  res.latents.resize(L);
  res.d_feats.resize(L);

  Tensor top_raw;
  if (m.learnt_top()) {
    top_raw = repeat_batch(m.d_top, n);
  }

  for (int l = L - 1; l >= 0; --l) {
    Tensor d_above;
    if (l == L - 1)
      d_above = top_raw;  // undefined tensor for the uniform prior
    else
      d_above = res.d_feats[l + 1];
    res.layers[l] = detail_model::prior_at(m, l, d_above, n);
    res.latents[l] = choose(l, res.layers[l]);
    Tensor emb = detail_model::embed_latent(m, l, res.latents[l]);

    Tensor down;
    if (m.conv()) {
      down = m.pladder[l](rows_to_nchw(emb, n, de, m.grid(l), m.grid(l)));
      if (l + 1 < L)
        down = add(down, m.dec[l](res.d_feats[l + 1]));
      else if (m.learnt_top())
        down = add(down, m.dec_top(top_raw));
    } else {
      down = m.mpladder[l](reshape(emb, {n, cfg.latents_at(l) * de}));
      if (l + 1 < L)
        down = add(down, elu(m.mdec[l](res.d_feats[l + 1])));
      else if (m.learnt_top())
        down = add(down, elu(m.mdec_top(top_raw)));
    }
    res.d_feats[l] = down;
  }
  res.like = detail_model::likelihood_from(m, res.d_feats[0], n);
  return res;
}

/// Scores given latents: every layer's conditional prior plus the likelihood
/// parameters they decode to.
inline GenerativeResult generative_pass(const Model& m, const std::vector<LayerLatent>& latents,
                                        int n) {
  if (static_cast<int>(latents.size()) != m.layers())
    throw Error("generative_pass: expected " + std::to_string(m.layers()) + " latent layers, got " +
                std::to_string(latents.size()));
  return generative_descend(m, n, [&](int l, const LayerPrior&) { return latents[l]; });
}

inline GenerativeResult ancestral_sample(const Model& m, int n, Rng& rng,
                                         PassMode mode = PassMode::HardSample, double tau = 1.0) {
  return generative_descend(
      m, n, [&](int l, const LayerPrior& pr) { return choose_from_prior(m, l, pr, mode, tau, rng); });
}

// ---------------------------------------------------------------------------
// Likelihood scoring and the ELBO
// ---------------------------------------------------------------------------

inline Tensor reconstruction_loglik(const Model& m, const LikelihoodOut& like,
                                    const ImageBatch& x) {
  Tensor per;
  if (m.cfg.likelihood == Likelihood::DiscretizedLogistic)
    per = discretized_logistic_logpmf(like.dl_mean, m.dl_log_scale, x.levels);
  else
    per = categorical_pixel_logpmf(like.cat_logits, x.levels);
  return mul_scalar(sum(per), 1.0 / x.n);  // nats per image
}

/// Likelihood mean as unit-interval pixel values.
inline std::vector<double> likelihood_mean_unit(const Model& m, const LikelihoodOut& like) {
  if (m.cfg.likelihood == Likelihood::DiscretizedLogistic) return like.dl_mean.values();
  // categorical: expected level
  const Tensor& logits = like.cat_logits;
  int n = logits.dim(0), C = logits.dim(1) / 256, H = logits.dim(2), W = logits.dim(3);
  Tensor probs = softmax(reshape(logits, {n, C, 256, H, W}), 2);
  std::vector<double> out(static_cast<std::size_t>(n) * C * H * W, 0.0);
  const auto& pv = probs.values();
  std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int b = 0; b < n; ++b)
    for (int c = 0; c < C; ++c)
      for (std::size_t p = 0; p < hw; ++p) {
        double acc = 0.0;
        for (int lev = 0; lev < 256; ++lev)
          acc += lev / 255.0 * pv[((b * C + c) * 256 + lev) * hw + p];
        out[(b * C + c) * hw + p] = acc;
      }
  return out;
}

struct ElboReport {
  double recon_loglik = 0.0;           // nats per image
  std::vector<double> per_layer_kl;    // nats per image
  double total_elbo = 0.0;
  double bpd = 0.0;
  std::vector<double> per_layer_cross_entropy;
  std::vector<double> per_layer_entropy;
};

struct ElboOutcome {
  Tensor recon;                  // scalar, nats per image
  std::vector<Tensor> layer_kl;  // scalars, nats per image
  Tensor total;                  // recon - sum kl
  ElboReport report;
  PosteriorResult posterior;
  GenerativeResult generative;
};

inline double gaussian_entropy_total(const DiagonalGaussianParams& g) {
  constexpr double kHalfLog2PiE = 1.4189385332046727418;
  double acc = 0.0;
  for (double ls : g.log_std.values()) acc += ls + kHalfLog2PiE;
  return acc;
}

/// The training estimate (relaxed mode) scores analytic KLs between the soft
/// posterior and prior rows. Hard and mode evaluation treat the realized
/// latents as degenerate one-hot posteriors, so each KL term is -log p at
/// the chosen index and the total is log p(x, z): a bound on log p(x) that
/// holds pointwise, not just in expectation.
inline ElboOutcome elbo(const Model& m, const ImageBatch& x, PassMode pass_mode, double tau,
                        Rng& rng, int n_samples = 1) {
  if (n_samples < 1) throw Error("elbo: n_samples must be >= 1");
  ElboOutcome out;
  int L = m.layers();
  bool hard_eval = m.discrete() && pass_mode != PassMode::Relaxed;
  std::vector<Tensor> recons;
  std::vector<std::vector<Tensor>> kls(L);
  std::vector<CategoricalParams> q_scored(L);

  for (int s = 0; s < n_samples; ++s) {
    PosteriorResult post = posterior_pass(m, x, pass_mode, tau, rng);
    GenerativeResult gen = generative_pass(m, post.latents(), x.n);
    recons.push_back(reconstruction_loglik(m, gen.like, x));
    for (int l = 0; l < L; ++l) {
      Tensor kl;
      if (m.discrete()) {
        CategoricalParams q_use =
            hard_eval ? one_hot_categorical(post.layers[l].latent.indices, m.cats(l))
                      : post.layers[l].q;
        kl = mul_scalar(sum(kl_categorical(q_use, gen.layers[l].p)), 1.0 / x.n);
        if (s + 1 == n_samples) q_scored[l] = q_use;
      } else {
        kl = mul_scalar(kl_diag_gaussians(post.layers[l].q_gauss, gen.layers[l].p_gauss), 1.0 / x.n);
      }
      kls[l].push_back(kl);
    }
    if (s + 1 == n_samples) {
      out.posterior = std::move(post);
      out.generative = std::move(gen);
    }
  }

  auto average = [&](std::vector<Tensor>& parts) {
    Tensor acc = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
    return mul_scalar(acc, 1.0 / static_cast<double>(parts.size()));
  };
  out.recon = average(recons);
  Tensor total = out.recon;
  for (int l = 0; l < L; ++l) {
    out.layer_kl.push_back(average(kls[l]));
    total = sub(total, out.layer_kl[l]);
  }
  out.total = total;

  ElboReport& r = out.report;
  r.recon_loglik = out.recon.value();
  for (int l = 0; l < L; ++l) r.per_layer_kl.push_back(out.layer_kl[l].value());
  r.total_elbo = out.total.value();
  r.bpd = -r.total_elbo / (m.cfg.subpixels() * std::log(2.0));
  for (int l = 0; l < L; ++l) {
    if (m.discrete()) {
      auto h = categorical_entropy(q_scored[l]);
      auto ce = categorical_cross_entropy(q_scored[l], out.generative.layers[l].p);
      double hs = 0.0, ces = 0.0;
      for (double v : h) hs += v;
      for (double v : ce) ces += v;
      r.per_layer_entropy.push_back(hs / x.n);
      r.per_layer_cross_entropy.push_back(ces / x.n);
    } else {
      double hs = gaussian_entropy_total(out.posterior.layers[l].q_gauss) / x.n;
      r.per_layer_entropy.push_back(hs);
      r.per_layer_cross_entropy.push_back(hs + r.per_layer_kl[l]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layerwise resampling
// ---------------------------------------------------------------------------

struct LayerwiseResult {
  std::vector<Image> images;
  std::vector<LayerLatent> latents;  // as used in the decode, batch = n
};

/// Infers mode latents for layers above `layer` (1-based), draws that layer
/// from its conditional prior n times, and propagates modes below.
inline LayerwiseResult layerwise_resample(const Model& m, const Image& img, int layer, int n,
                                          Rng& rng) {
  int L = m.layers();
  if (layer < 1 || layer > L)
    throw Error("layerwise_resample: layer " + std::to_string(layer) + " outside 1.." +
                std::to_string(L));
  int l0 = layer - 1;
  ImageBatch batch = ImageBatch::of({img});
  PosteriorResult post = posterior_pass(m, batch, PassMode::ModeArgmax, 1.0, rng);

  auto tile_indices = [&](const std::vector<int>& idx) {
    std::vector<int> out;
    out.reserve(idx.size() * static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.insert(out.end(), idx.begin(), idx.end());
    return out;
  };

  GenerativeResult gen = generative_descend(m, n, [&](int l, const LayerPrior& pr) {
    LayerLatent lat;
    if (l > l0) {
      if (m.discrete()) {
        lat.indices = tile_indices(post.layers[l].latent.indices);
        lat.weights = one_hot_rows(lat.indices, m.cats(l));
      } else {
        lat.weights = repeat_batch(reshape(post.layers[l].latent.weights,
                                           {1, m.cfg.latents_at(l) * m.cfg.d_e}),
                                   n);
        lat.weights = reshape(lat.weights, {n * m.cfg.latents_at(l), m.cfg.d_e});
      }
      return lat;
    }
    PassMode pm = (l == l0) ? PassMode::HardSample : PassMode::ModeArgmax;
    return choose_from_prior(m, l, pr, pm, 1.0, rng);
  });

  LayerwiseResult res;
  res.latents = gen.latents;
  std::vector<double> unit = likelihood_mean_unit(m, gen.like);
  std::size_t per = static_cast<std::size_t>(m.cfg.subpixels());
  for (int i = 0; i < n; ++i) {
    std::vector<double> one(unit.begin() + i * per, unit.begin() + (i + 1) * per);
    res.images.push_back(image_from_unit(one, m.cfg.image_channels, m.cfg.image_side));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Mixture-view consistency check
// ---------------------------------------------------------------------------

struct MixtureCheckReport {
  double max_term_diff = 0.0;
  double max_embedding_diff = 0.0;
  bool pass = false;
};

/// Recomputes every ELBO term through the mixture view of the model, where
/// embeddings are explicit variables pinned to codebook combinations: latent
/// embeddings are reassembled positionally from the codebook tables, the KLs
/// re-derived as cross entropy minus entropy, and the reconstruction term
/// re-evaluated directly from the likelihood parameters. All of it in plain
/// doubles, then compared term-by-term against the graph path.
inline MixtureCheckReport mixture_elbo_equivalence_check(const Model& m, const ImageBatch& x,
                                                         Rng& rng, double tol = 1e-9) {
  if (!m.discrete())
    throw Error("mixture_elbo_equivalence_check: only defined for discrete latents");
  ElboOutcome oc = elbo(m, x, PassMode::Relaxed, 1.0, rng);
  MixtureCheckReport rep;
  int L = m.layers(), de = m.cfg.d_e;

  for (int l = 0; l < L; ++l) {
    // embeddings as explicit codebook mixtures
    const auto& w = oc.posterior.layers[l].latent.weights.values();
    const auto& means = m.codebooks[l].means.values();
    const auto& emb = oc.posterior.layers[l].embedding.values();
    int rows = oc.posterior.layers[l].latent.weights.dim(0);
    int K = m.cats(l);
    for (int r = 0; r < rows; ++r)
      for (int d = 0; d < de; ++d) {
        double acc = 0.0;
        for (int k = 0; k < K; ++k) acc += w[r * K + k] * means[k * de + d];
        rep.max_embedding_diff = std::max(rep.max_embedding_diff, std::abs(acc - emb[r * de + d]));
      }

    // KL as cross entropy minus entropy
    auto ce = categorical_cross_entropy(oc.posterior.layers[l].q, oc.generative.layers[l].p);
    auto h = categorical_entropy(oc.posterior.layers[l].q);
    double kl_b = 0.0;
    for (std::size_t i = 0; i < ce.size(); ++i) kl_b += ce[i] - h[i];
    kl_b /= x.n;
    rep.max_term_diff = std::max(rep.max_term_diff, std::abs(kl_b - oc.report.per_layer_kl[l]));
  }

  // reconstruction term recomputed from the likelihood parameters
  double recon_b = 0.0;
  if (m.cfg.likelihood == Likelihood::DiscretizedLogistic) {
    const auto& mean = oc.generative.like.dl_mean.values();
    const auto& lsv = m.dl_log_scale.values();
    int C = m.cfg.image_channels, side = m.cfg.image_side;
    std::size_t hw = static_cast<std::size_t>(side) * side;
    auto sig = [](double z) {
      return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    };
    for (int b = 0; b < x.n; ++b)
      for (int c = 0; c < C; ++c) {
        double s = std::exp(lsv[c]);
        for (std::size_t p = 0; p < hw; ++p) {
          std::size_t i = (b * C + c) * hw + p;
          int lev = x.levels[i];
          double u = lev / 255.0;
          double a = (u + kHalfBin - mean[i]) / s;
          double bb = (u - kHalfBin - mean[i]) / s;
          double pmf = lev == 0 ? sig(a) : (lev == 255 ? 1.0 - sig(bb) : sig(a) - sig(bb));
          recon_b += std::log(std::max(pmf, kPmfFloor));
        }
      }
  } else {
    const auto& logits = oc.generative.like.cat_logits.values();
    int C = m.cfg.image_channels, side = m.cfg.image_side;
    std::size_t hw = static_cast<std::size_t>(side) * side;
    for (int b = 0; b < x.n; ++b)
      for (int c = 0; c < C; ++c)
        for (std::size_t p = 0; p < hw; ++p) {
          std::size_t base = ((static_cast<std::size_t>(b) * C + c) * 256) * hw + p;
          double mx = -1e300;
          for (int lev = 0; lev < 256; ++lev) mx = std::max(mx, logits[base + lev * hw]);
          double z = 0.0;
          for (int lev = 0; lev < 256; ++lev) z += std::exp(logits[base + lev * hw] - mx);
          int lev = x.levels[(b * C + c) * hw + p];
          recon_b += logits[base + lev * hw] - mx - std::log(z);
        }
  }
  recon_b /= x.n;
  rep.max_term_diff = std::max(rep.max_term_diff, std::abs(recon_b - oc.report.recon_loglik));

  double total_b = recon_b;
  for (int l = 0; l < L; ++l) {
    auto ce = categorical_cross_entropy(oc.posterior.layers[l].q, oc.generative.layers[l].p);
    auto h = categorical_entropy(oc.posterior.layers[l].q);
    for (std::size_t i = 0; i < ce.size(); ++i) total_b -= (ce[i] - h[i]) / x.n;
  }
  rep.max_term_diff = std::max(rep.max_term_diff, std::abs(total_b - oc.report.total_elbo));
  rep.pass = rep.max_term_diff < tol && rep.max_embedding_diff < tol;
  return rep;
}

}  // namespace rrvq
