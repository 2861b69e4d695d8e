// Acceptance suite: one pass/fail line per criterion, exit code = number of
// failed criteria. An optional argv[1] runs a single criterion by number.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "rrvq/data_codec.hpp"
#include "rrvq/entropy_analysis.hpp"
#include "rrvq/grad_check.hpp"
#include "rrvq/model.hpp"
#include "rrvq/random.hpp"
#include "rrvq/training.hpp"

using namespace rrvq;

namespace {

struct Criterion {
  int id = 0;
  std::string name;
  bool pass = true;
  double seconds = 0.0;
  std::vector<std::string> details;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    details.push_back(std::string(ok ? "ok    " : "FAIL  ") + what);
  }
  void note(const std::string& what) { details.push_back("      " + what); }
};

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

ImageBatch random_batch(const ModelConfig& cfg, int n, Rng& rng) {
  std::vector<Image> images;
  for (int i = 0; i < n; ++i) {
    Image img;
    img.channels = cfg.image_channels;
    img.side = cfg.image_side;
    img.levels.resize(cfg.subpixels());
    for (auto& v : img.levels) v = static_cast<std::uint8_t>(rng.uniform_int(256));
    images.push_back(std::move(img));
  }
  return ImageBatch::of(images);
}

// ---------------------------------------------------------------------------

Criterion criterion1() {
  Criterion c{1, "worst-case entropy approximations within 1e-5 of exact for d in {10..30}"};
  for (double d : {10.0, 15.0, 20.0, 25.0, 30.0}) {
    double er = std::abs(entropy::approx_rvq_entropy(256, d, 1.0) -
                         entropy::exact_rvq_entropy(256, d, 1.0)) /
                entropy::exact_rvq_entropy(256, d, 1.0);
    double es = std::abs(entropy::approx_softmax_entropy(256, d) -
                         entropy::exact_softmax_entropy(256, d, 0.0)) /
                entropy::exact_softmax_entropy(256, d, 0.0);
    c.check(er <= 1e-5, "rVQ proportional error at d=" + fmt(d) + " is " + fmt(er));
    c.check(es <= 1e-5, "softmax proportional error at d=" + fmt(d) + " is " + fmt(es));
  }
  return c;
}

Criterion criterion2() {
  Criterion c{2, "exact worst-case ordering flips around delta = 1 at d = 20"};
  auto low = entropy::corollary_compare(256, 20.0, 0.5);
  c.check(low.h_rvq > low.h_softmax, "delta=0.5: H_rvq=" + fmt(low.h_rvq) +
                                         " > H_softmax=" + fmt(low.h_softmax));
  auto high = entropy::corollary_compare(256, 20.0, 1.5);
  c.check(high.h_rvq < high.h_softmax, "delta=1.5: H_rvq=" + fmt(high.h_rvq) +
                                           " < H_softmax=" + fmt(high.h_softmax));
  return c;
}

Criterion criterion3() {
  Criterion c{3, "randomized-codebook entropy dominates the worst case"};
  auto rows = entropy::mc_codebook_entropy({1.0, 2.0, 3.0, 4.0, 5.0}, 1000, 256, 32, 0.5, 2024);
  for (const auto& r : rows) {
    c.check(r.min_entropy >= r.worst_exact,
            "d=" + fmt(r.d) + ": simulated min " + fmt(r.min_entropy) + " >= worst exact " +
                fmt(r.worst_exact));
    if (r.d == 3.0) {
      double factor = r.mean_entropy / r.worst_exact;
      c.check(r.mean_entropy >= 10.0 * r.worst_exact,
              "d=3: simulated mean " + fmt(r.mean_entropy) + " >= 10 x worst exact " +
                  fmt(r.worst_exact) + " (factor " + fmt(factor) + ")");
    }
  }
  return c;
}

Criterion criterion4() {
  Criterion c{4, "full-model elbo gradients match finite differences to 1e-4"};
  ModelConfig cfg;
  cfg.image_side = 4;
  cfg.layers = {{2, 4}, {1, 4}};
  cfg.d_e = 3;
  cfg.channels = 4;
  cfg.sigma_mode = SigmaMode::Learnt;  // gradients reach both codebooks
  Rng mrng(5);
  Model m = Model::init(cfg, mrng);
  Rng drng(6);
  ImageBatch x = random_batch(cfg, 2, drng);
  auto loss_fn = [&]() {
    Rng rng(77);  // common random numbers
    return neg(elbo(m, x, PassMode::Relaxed, 1.0, rng).total);
  };
  auto params = m.parameters();
  std::size_t count = 0;
  bool has_means = false, has_vars = false;
  for (auto& [name, p] : params) {
    count += p.size();
    if (name.find("codebook") != std::string::npos && name.find("means") != std::string::npos)
      has_means = true;
    if (name.find("log_vars") != std::string::npos) has_vars = true;
  }
  c.check(has_means && has_vars, "parameter set includes both codebook tables (" +
                                     std::to_string(count) + " scalars total)");
  auto rep = grad_check_params(loss_fn, params, 1e-4, 1e-4);
  c.check(rep.pass, "max relative deviation " + fmt(rep.max_rel_dev) + " (worst " +
                        rep.worst_param + "[" + std::to_string(rep.worst_index) + "], analytic " +
                        fmt(rep.worst_analytic) + " vs numeric " + fmt(rep.worst_numeric) + ")");
  return c;
}

Criterion criterion5() {
  Criterion c{5, "hard-mode elbo lower-bounds the enumerated log likelihood"};
  ModelConfig cfg;
  cfg.image_side = 4;
  cfg.layers = {{2, 3}, {1, 3}};
  cfg.d_e = 2;
  cfg.channels = 4;
  double worst_margin = std::numeric_limits<double>::infinity();
  for (int draw = 0; draw < 10; ++draw) {
    Rng mrng(300 + draw);
    Model m = Model::init(cfg, mrng);
    Rng drng(400 + draw);
    ImageBatch x = random_batch(cfg, 1, drng);
    Rng r(0);
    double bound = elbo(m, x, PassMode::ModeArgmax, 1.0, r).report.total_elbo;

    // exact log p(x) by summing over all 3^4 * 3 latent configurations
    double lse = -std::numeric_limits<double>::infinity();
    for (int c2 = 0; c2 < 3; ++c2)
      for (int i0 = 0; i0 < 3; ++i0)
        for (int i1 = 0; i1 < 3; ++i1)
          for (int i2 = 0; i2 < 3; ++i2)
            for (int i3 = 0; i3 < 3; ++i3) {
              std::vector<LayerLatent> lat(2);
              lat[0].indices = {i0, i1, i2, i3};
              lat[0].weights = one_hot_rows(lat[0].indices, 3);
              lat[1].indices = {c2};
              lat[1].weights = one_hot_rows(lat[1].indices, 3);
              GenerativeResult gen = generative_pass(m, lat, 1);
              double joint = reconstruction_loglik(m, gen.like, x).value();
              joint += gen.layers[1].p.log_probs[c2];
              const auto& p0 = gen.layers[0].p.log_probs;
              joint += p0[0 * 3 + i0] + p0[1 * 3 + i1] + p0[2 * 3 + i2] + p0[3 * 3 + i3];
              double hi = std::max(lse, joint), lo = std::min(lse, joint);
              lse = hi + std::log1p(std::exp(lo - hi));
            }
    worst_margin = std::min(worst_margin, lse - bound);
    if (bound > lse + 1e-9)
      c.check(false, "draw " + std::to_string(draw) + ": elbo " + fmt(bound) + " exceeds log p(x) " +
                         fmt(lse));
  }
  c.check(worst_margin >= -1e-9,
          "10 random draws: worst margin log p(x) - elbo = " + fmt(worst_margin));
  return c;
}

Criterion criterion6() {
  Criterion c{6, "bit accounting and codec round trip on the 64x64 five-layer shape"};
  ModelConfig cfg;
  cfg.image_side = 64;
  cfg.layers = {{16, 128}, {8, 64}, {4, 32}, {2, 16}, {1, 8}};
  cfg.d_e = 32;
  cfg.channels = 6;

  std::size_t bits = bitstream_bits(cfg);
  c.check(bits == 2275, "coded size is " + std::to_string(bits) + " bits per image");
  double cr = (64.0 * 64.0 * 3.0 * 8.0) / static_cast<double>(bits);
  c.check(std::abs(cr - 43.2) < 0.1, "compression ratio " + fmt(cr) + " within 0.1 of 43.2");

  Rng mrng(9);
  Model m = Model::init(cfg, mrng);
  Image x;
  x.channels = 3;
  x.side = 64;
  x.levels.resize(cfg.subpixels());
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < 64; ++i)
      for (int j = 0; j < 64; ++j)
        x.levels[ch * 4096 + i * 64 + j] =
            static_cast<std::uint8_t>((ch == 0 ? 4 * i : ch == 1 ? 4 * j : 2 * (i + j)) & 0xff);

  LatentBitstream b1 = compress(m, x);
  c.check(b1.payload_bits() == 2275, "compressed payload is " + std::to_string(b1.payload_bits()) +
                                         " bits");
  Image xhat = decompress(m, b1);
  c.check(xhat.side == 64, "decode yields a 64x64 image");
  LatentBitstream b2 = compress(m, xhat);
  auto i1 = unpack_indices(b1);
  auto i2 = unpack_indices(b2);
  std::size_t diffs = 0, total = 0;
  for (std::size_t l = 0; l < i1.size(); ++l)
    for (std::size_t k = 0; k < i1[l].size(); ++k) {
      ++total;
      if (i1[l][k] != i2[l][k]) ++diffs;
    }
  c.check(encode_bitstream(b1) == encode_bitstream(b2),
          "compress-decompress-compress reproduces the bitstream (" + std::to_string(diffs) + "/" +
              std::to_string(total) + " indices changed)");
  return c;
}

Criterion criterion7() {
  Criterion c{7, "toy reproduction: patchwork conv samples vs colour-cast mlp samples"};
  Rng drng(42);
  std::vector<Image> data = gen_swatches(512, 8, drng);
  std::vector<Image> evald = gen_swatches(64, 8, drng);

  TrainSchedule sched;
  sched.batch_size = 64;
  sched.max_epochs = 300;
  sched.lr_init = 2e-2;  // desk-scale step budget
  sched.patience = 20;
  sched.stop_recon_bpd = 1.5;

  auto recon_bpd = [&](Model& m) {
    Rng r(5);
    ImageBatch b = ImageBatch::of(evald);
    double recon = elbo(m, b, PassMode::ModeArgmax, 1.0, r).report.recon_loglik;
    return -recon / (m.cfg.subpixels() * std::log(2.0));
  };
  auto sample_spread = [&](Model& m, std::uint64_t seed) {
    Rng r(seed);
    GenerativeResult gen = ancestral_sample(m, 64, r);
    auto unit = likelihood_mean_unit(m, gen.like);
    std::size_t per = m.cfg.subpixels();
    double acc = 0.0;
    for (int i = 0; i < 64; ++i) {
      double mean = 0.0, var = 0.0;
      for (std::size_t j = 0; j < per; ++j) mean += unit[i * per + j];
      mean /= static_cast<double>(per);
      for (std::size_t j = 0; j < per; ++j) {
        double d = unit[i * per + j] - mean;
        var += d * d;
      }
      acc += std::sqrt(var / static_cast<double>(per));
    }
    return acc / 64.0;
  };

  ModelConfig conv_cfg;
  conv_cfg.image_side = 8;
  conv_cfg.layers = {{4, 16}};  // one latent per 2x2 pixel patch
  conv_cfg.d_e = 16;
  conv_cfg.channels = 32;
  conv_cfg.sigma_mode = SigmaMode::FixedOne;
  Rng m1(7);
  Model conv_model = Model::init(conv_cfg, m1);
  TrainResult tr1 = train(conv_model, sched, data, evald, 11, ".");
  double conv_bpd = recon_bpd(conv_model);
  c.check(conv_bpd < 2.0, "conv reconstruction bpd " + fmt(conv_bpd) + " after " +
                              std::to_string(tr1.epochs_run) + " epochs");

  ModelConfig mlp_cfg = conv_cfg;
  mlp_cfg.encoder_kind = EncoderKind::Mlp;
  mlp_cfg.hidden = 128;
  Rng m2(8);
  Model mlp_model = Model::init(mlp_cfg, m2);
  TrainResult tr2 = train(mlp_model, sched, data, evald, 12, ".");
  double mlp_bpd = recon_bpd(mlp_model);
  c.check(mlp_bpd < 2.0, "mlp reconstruction bpd " + fmt(mlp_bpd) + " after " +
                             std::to_string(tr2.epochs_run) + " epochs");

  double conv_spread = sample_spread(conv_model, 100);
  double mlp_spread = sample_spread(mlp_model, 200);
  c.check(mlp_spread < conv_spread,
          "mean intra-image pixel std over 64 ancestral samples: mlp " + fmt(mlp_spread) +
              " < conv " + fmt(conv_spread));
  std::remove("./best.ckpt");
  std::remove("./train_log.csv");
  return c;
}

Criterion criterion8() {
  Criterion c{8, "ablation grid trains without NaN and emits a bpd table"};
  Rng drng(50);
  std::vector<Image> data = gen_swatches(256, 8, drng);
  std::vector<Image> evald = gen_swatches(64, 8, drng);

  TrainSchedule sched;
  sched.batch_size = 64;
  sched.max_epochs = 10;
  sched.patience = 20;

  struct Variant {
    PParam p;
    SigmaMode s;
    const char* label;
    bool may_halt;
  };
  std::vector<Variant> variants = {
      {PParam::DirectCat, SigmaMode::FixedOne, "direct_cat/sigma=1", false},
      {PParam::DirectCat, SigmaMode::Learnt, "direct_cat/sigma-learnt", true},
      {PParam::EmbedCat, SigmaMode::FixedOne, "embed_cat/sigma=1", false},
      {PParam::EmbedCat, SigmaMode::Learnt, "embed_cat/sigma-learnt", false},
  };

  std::vector<std::string> table;
  table.push_back("variant,train_bpd,eval_bpd,status");
  for (const auto& v : variants) {
    ModelConfig cfg;
    cfg.image_side = 8;
    cfg.layers = {{2, 16}, {1, 16}};
    cfg.d_e = 8;
    cfg.channels = 16;
    cfg.p_param = v.p;
    cfg.sigma_mode = v.s;
    Rng mrng(60);
    Model m = Model::init(cfg, mrng);
    try {
      TrainResult tr = train(m, sched, data, evald, 70, ".");
      double train_bpd = 0.0, eval_bpd = 0.0;
      for (const auto& row : tr.log) {
        if (row.split == "train") train_bpd = row.bpd;
        if (row.split == "eval") eval_bpd = row.bpd;
      }
      table.push_back(std::string(v.label) + "," + fmt(train_bpd) + "," + fmt(eval_bpd) + ",ok");
      c.check(tr.epochs_run == 10, std::string(v.label) + ": 10 epochs, final train bpd " +
                                       fmt(train_bpd));
    } catch (const TrainingHalted& e) {
      table.push_back(std::string(v.label) + ",,,halted");
      c.check(v.may_halt, std::string(v.label) + ": halted on non-finite numbers (" +
                              std::string(v.may_halt ? "permitted" : "not permitted") + ")");
      std::remove("./halt.ckpt");
    }
  }
  {
    std::ofstream f("acceptance_ablation.csv", std::ios::binary);
    for (const auto& line : table) f << line << "\n";
  }
  c.note("comparative table written to acceptance_ablation.csv");
  for (const auto& line : table) c.note(line);
  std::remove("./best.ckpt");
  std::remove("./train_log.csv");
  return c;
}

Criterion criterion9() {
  Criterion c{9, "distribution property suite"};
  Rng rng(90);

  // responsibility rows normalize
  Codebook cb = init_codebook(16, 4, rng);
  std::vector<double> ev(32 * 4);
  for (double& v : ev) v = rng.uniform(-1.5, 1.5);
  Tensor e = Tensor::from({32, 4}, ev);
  double worst_row = 0.0;
  for (const CategoricalParams& q : {rvq_responsibilities(e, cb), rrvq_responsibilities(e, cb)}) {
    for (int m = 0; m < 32; ++m) {
      double acc = 0.0;
      for (int k = 0; k < 16; ++k) acc += std::exp(q.log_probs[m * 16 + k]);
      worst_row = std::max(worst_row, std::abs(acc - 1.0));
    }
  }
  c.check(worst_row <= 1e-12, "responsibility rows sum to 1 (worst |sum-1| = " + fmt(worst_row) + ")");

  // KL >= 0 and KL(q,q) = 0
  auto rand_cat = [&](int M, int K) {
    std::vector<double> logits(static_cast<std::size_t>(M) * K);
    for (double& v : logits) v = rng.uniform(-3.0, 3.0);
    return categorical_from_logits(Tensor::from({M, K}, std::move(logits)));
  };
  CategoricalParams q = rand_cat(20, 12), p = rand_cat(20, 12);
  Tensor kl = kl_categorical(q, p);
  double min_kl = 1e300;
  for (int m = 0; m < 20; ++m) min_kl = std::min(min_kl, kl[m]);
  Tensor self = kl_categorical(q, q);
  double max_self = 0.0;
  for (int m = 0; m < 20; ++m) max_self = std::max(max_self, std::abs(self[m]));
  c.check(min_kl >= 0.0, "KL(q,p) >= 0 (min " + fmt(min_kl) + ")");
  c.check(max_self <= 1e-12, "KL(q,q) = 0 (max " + fmt(max_self) + ")");

  // RRVQ reduces to rVQ at unit variances
  CategoricalParams soft = rvq_responsibilities(e, cb);
  CategoricalParams rich = rrvq_responsibilities(e, cb);  // log_vars are zero at init
  double reduce_diff = 0.0;
  for (std::size_t i = 0; i < soft.log_probs.size(); ++i)
    reduce_diff = std::max(reduce_diff, std::abs(soft.log_probs[i] - rich.log_probs[i]));
  c.check(reduce_diff <= 1e-12, "RRVQ at unit variance matches rVQ (max diff " + fmt(reduce_diff) + ")");

  // Gumbel-Softmax argmax statistics at low temperature
  std::vector<double> logits = {0.4, -0.6, 1.2, 0.0};
  CategoricalParams cat = categorical_from_logits(Tensor::from({1, 4}, logits));
  const int n = 100000;
  std::vector<int> counts(4, 0);
  for (int i = 0; i < n; ++i) {
    RelaxedSample s = gumbel_softmax_sample(cat, 0.05, rng);
    int best = 0;
    for (int k = 1; k < 4; ++k)
      if (s.weights[k] > s.weights[best]) best = k;
    counts[best]++;
  }
  for (int k = 0; k < 4; ++k) {
    double pk = std::exp(cat.log_probs[k]);
    double freq = static_cast<double>(counts[k]) / n;
    double se = std::sqrt(pk * (1.0 - pk) / n);
    c.check(std::abs(freq - pk) < 3.0 * se, "argmax frequency of category " + std::to_string(k) +
                                                ": " + fmt(freq) + " vs pi " + fmt(pk) +
                                                " (3 s.e. = " + fmt(3.0 * se) + ")");
  }
  return c;
}

Criterion criterion10() {
  Criterion c{10, "mixture-view elbo recomputation agrees within 1e-9"};
  double worst = 0.0;
  for (int seed = 0; seed < 10; ++seed) {
    ModelConfig cfg;
    cfg.image_side = 4;
    cfg.layers = seed % 2 ? std::vector<LayerSpec>{{2, 5}} : std::vector<LayerSpec>{{2, 3}, {1, 4}};
    cfg.d_e = 2 + seed % 3;
    cfg.channels = 4;
    cfg.top_prior = seed % 3 == 0 ? TopPrior::Learnt : TopPrior::Uniform;
    Rng mrng(500 + seed);
    Model m = Model::init(cfg, mrng);
    Rng drng(600 + seed);
    ImageBatch x = random_batch(cfg, 2, drng);
    Rng r(seed);
    auto rep = mixture_elbo_equivalence_check(m, x, r);
    worst = std::max({worst, rep.max_term_diff, rep.max_embedding_diff});
    if (!rep.pass)
      c.check(false, "model " + std::to_string(seed) + ": max term diff " + fmt(rep.max_term_diff));
  }
  c.check(worst <= 1e-9, "10 random models: worst term/embedding difference " + fmt(worst));
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::function<Criterion()>> criteria = {
      criterion1, criterion2, criterion3, criterion4, criterion5,
      criterion6, criterion7, criterion8, criterion9, criterion10};
  // stated runtime budgets in seconds; 0 = none stated
  std::vector<double> limits = {1, 1, 300, 60, 120, 60, 1800, 0, 120, 60};

  int only = argc > 1 ? std::atoi(argv[1]) : 0;
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && static_cast<int>(i + 1) != only) continue;
    auto start = std::chrono::steady_clock::now();
    Criterion c = criteria[i]();
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (limits[i] > 0.0 && c.seconds > limits[i]) {
      c.pass = false;
      c.details.push_back("FAIL  exceeded the " + fmt(limits[i]) + "s runtime budget");
    }
    std::printf("[%s] criterion %d: %s (%.2fs)\n", c.pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                c.seconds);
    for (const auto& d : c.details) std::printf("    %s\n", d.c_str());
    if (!c.pass) ++failures;
    std::fflush(stdout);
  }
  if (failures) std::printf("%d criterion(s) failed\n", failures);
  return failures;
}
