#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "rrvq/config.hpp"
#include "rrvq/image.hpp"
#include "rrvq/model.hpp"
#include "rrvq/nn.hpp"
#include "rrvq/random.hpp"

namespace rrvq {

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error(what) {}
};

/// Raised when training hits a non-finite loss or gradient; the last good
/// parameter state has already been written to `checkpoint_path`.
class TrainingHalted : public Error {
 public:
  TrainingHalted(const std::string& what, std::string path)
      : Error(what), checkpoint_path(std::move(path)) {}
  std::string checkpoint_path;
};

// ---------------------------------------------------------------------------
// AdaMax
// ---------------------------------------------------------------------------

struct AdaMaxState {
  std::vector<std::vector<double>> m;  // first moment
  std::vector<std::vector<double>> u;  // infinity norm
  long long t = 0;
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdaMaxState init(const nn::NamedParams& params, double lr) {
    AdaMaxState st;
    st.lr = lr;
    for (const auto& [name, p] : params) {
      st.m.emplace_back(p.size(), 0.0);
      st.u.emplace_back(p.size(), 0.0);
    }
    return st;
  }
};

/// One AdaMax update over the parameter set, reading each tensor's
/// accumulated gradient. Aborts without touching any parameter if a
/// gradient is non-finite.
inline void adamax_step(const nn::NamedParams& params, AdaMaxState& st) {
  if (params.size() != st.m.size())
    throw Error("adamax_step: state tracks " + std::to_string(st.m.size()) + " tensors, got " +
                std::to_string(params.size()));
  for (const auto& [name, p] : params)
    for (double g : p.grad())
      if (!std::isfinite(g)) throw Error("adamax_step: non-finite gradient in " + name);

  st.t += 1;
  double correction = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    const auto& g = p.grad();
    auto& v = p.leaf_values();
    auto& m = st.m[i];
    auto& u = st.u[i];
    for (std::size_t j = 0; j < v.size(); ++j) {
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
      u[j] = std::max(st.beta2 * u[j], std::abs(g[j]));
      v[j] -= (st.lr / correction) * m[j] / (u[j] + st.eps);
    }
  }
}

inline void zero_grads(const nn::NamedParams& params) {
  for (const auto& [name, p] : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Free-bits objective
// ---------------------------------------------------------------------------

/// loss = -recon + sum_l max(KL_l, lambda); lambda = 0 recovers the negative
/// ELBO. Layers whose batch-mean KL sits below the floor contribute the
/// constant lambda and no KL gradient.
inline Tensor free_bits_objective(const ElboOutcome& outcome, double lambda) {
  if (lambda < 0.0) throw Error("free_bits_objective: lambda must be >= 0");
  Tensor loss = neg(outcome.recon);
  for (const Tensor& kl : outcome.layer_kl) loss = add(loss, max_scalar(kl, lambda));
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail_ckpt {

constexpr char kMagic[4] = {'R', 'R', 'V', 'Q'};
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw CheckpointError("checkpoint truncated reading u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

inline void put_doubles(std::string& out, const std::vector<double>& v) {
  static_assert(sizeof(double) == 8);
  std::size_t base = out.size();
  out.resize(base + v.size() * 8);
  std::memcpy(out.data() + base, v.data(), v.size() * 8);
}

}  // namespace detail_ckpt

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  std::string config_text;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  using namespace detail_ckpt;
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(ck.config_text.size()));
  out += ck.config_text;
  put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    out.push_back(0);  // dtype tag: f64
    out.push_back(static_cast<char>(t.shape.size()));
    for (int e : t.shape) put_u32(out, static_cast<std::uint32_t>(e));
    put_doubles(out, t.data);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& in) {
  using namespace detail_ckpt;
  std::size_t pos = 0;
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0)
    throw CheckpointError("checkpoint: bad magic");
  pos = 4;
  std::uint32_t version = get_u32(in, pos);
  if (version != kVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  std::uint32_t cfg_len = get_u32(in, pos);
  if (pos + cfg_len > in.size()) throw CheckpointError("checkpoint truncated reading config");
  Checkpoint ck;
  ck.config_text = in.substr(pos, cfg_len);
  pos += cfg_len;
  std::uint32_t count = get_u32(in, pos);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    std::uint32_t name_len = get_u32(in, pos);
    if (pos + name_len > in.size()) throw CheckpointError("checkpoint truncated reading name");
    t.name = in.substr(pos, name_len);
    pos += name_len;
    if (pos + 2 > in.size()) throw CheckpointError("checkpoint truncated reading tensor header");
    char dtype = in[pos++];
    if (dtype != 0) throw CheckpointError("checkpoint: unknown dtype tag");
    int rank = static_cast<unsigned char>(in[pos++]);
    std::size_t numel = 1;
    for (int r = 0; r < rank; ++r) {
      std::uint32_t e = get_u32(in, pos);
      if (e == 0 || e > (1u << 30)) throw CheckpointError("checkpoint: corrupt extent");
      t.shape.push_back(static_cast<int>(e));
      numel *= e;
    }
    if (pos + numel * 8 > in.size()) throw CheckpointError("checkpoint truncated reading payload");
    t.data.resize(numel);
    std::memcpy(t.data.data(), in.data() + pos, numel * 8);
    pos += numel * 8;
    ck.tensors.push_back(std::move(t));
  }
  if (pos != in.size()) throw CheckpointError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const TrainSchedule& sched, const nn::NamedParams& params,
                            const AdaMaxState* optim = nullptr) {
  Checkpoint ck;
  ck.config_text = config_to_text(cfg, sched);
  for (const auto& [name, p] : params) ck.tensors.push_back({name, p.shape(), p.values()});
  if (optim) {
    ck.tensors.push_back({"optim.step", {1}, {static_cast<double>(optim->t)}});
    ck.tensors.push_back({"optim.lr", {1}, {optim->lr}});
    for (std::size_t i = 0; i < params.size(); ++i) {
      ck.tensors.push_back({"optim.m." + params[i].first, params[i].second.shape(), optim->m[i]});
      ck.tensors.push_back({"optim.u." + params[i].first, params[i].second.shape(), optim->u[i]});
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");
  std::string bytes = encode_checkpoint(ck);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

struct RestoredModel {
  ParsedConfig parsed;
  Model model;
  AdaMaxState optim;
  bool has_optim = false;
};

/// Rebuilds a model from a checkpoint. When `expected_config` is supplied,
/// a differing embedded configuration is refused, listing every mismatched
/// field.
inline RestoredModel restore_model(const std::string& path,
                                   const std::string* expected_config = nullptr) {
  Checkpoint ck = load_checkpoint(path);
  if (expected_config && *expected_config != ck.config_text) {
    auto diff = config_diff(*expected_config, ck.config_text);
    std::string msg = "checkpoint config mismatch:";
    for (const auto& d : diff) msg += "\n  " + d;
    throw CheckpointError(msg);
  }
  RestoredModel rm{parse_config_text(ck.config_text), Model{}, AdaMaxState{}, false};
  Rng rng(0);
  rm.model = Model::init(rm.parsed.model, rng);
  nn::NamedParams params = rm.model.parameters();
  for (auto& [name, p] : params) {
    const CheckpointTensor* t = ck.find(name);
    if (!t) throw CheckpointError("checkpoint missing tensor " + name);
    if (t->shape != p.shape())
      throw CheckpointError("checkpoint tensor " + name + " has shape " + shape_str(t->shape) +
                            ", expected " + shape_str(p.shape()));
    p.leaf_values() = t->data;
  }
  if (ck.find("optim.step")) {
    rm.has_optim = true;
    rm.optim = AdaMaxState::init(params, ck.find("optim.lr")->data[0]);
    rm.optim.t = static_cast<long long>(ck.find("optim.step")->data[0]);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const CheckpointTensor* tm = ck.find("optim.m." + params[i].first);
      const CheckpointTensor* tu = ck.find("optim.u." + params[i].first);
      if (!tm || !tu) throw CheckpointError("checkpoint missing optimizer state for " + params[i].first);
      rm.optim.m[i] = tm->data;
      rm.optim.u[i] = tu->data;
    }
  }
  return rm;
}

// ---------------------------------------------------------------------------
// Plateau learning-rate schedule
// ---------------------------------------------------------------------------

/// Multiplies the learning rate by `decay` when the tracked loss has not
/// improved for `patience` consecutive epochs, bounded below by lr_min.
struct PlateauTracker {
  double best = std::numeric_limits<double>::infinity();
  int since_improvement = 0;

  /// Returns true when this epoch's loss is a new best.
  bool observe(double loss, AdaMaxState& st, const TrainSchedule& sched) {
    if (loss < best) {
      best = loss;
      since_improvement = 0;
      return true;
    }
    ++since_improvement;
    if (since_improvement >= sched.patience) {
      st.lr = std::max(sched.lr_min, st.lr * sched.lr_decay);
      since_improvement = 0;
    }
    return false;
  }
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRow {
  int epoch = 0;
  std::string split;
  double elbo_nats = 0.0;
  double bpd = 0.0;
  double lr = 0.0;
  double tau = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> log;
  double best_eval_elbo = -std::numeric_limits<double>::infinity();
  std::string best_checkpoint;
  std::string log_path;
  int epochs_run = 0;
};

inline std::string format_csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12e", v);
  return buf;
}

inline void write_train_log(const std::string& path, const std::vector<EpochRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path + " for writing");
  f << "epoch,split,elbo_nats,bpd,lr,tau\n";
  for (const auto& r : rows)
    f << r.epoch << ',' << r.split << ',' << format_csv_double(r.elbo_nats) << ','
      << format_csv_double(r.bpd) << ',' << format_csv_double(r.lr) << ','
      << format_csv_double(r.tau) << '\n';
}

inline void clamp_codebook_vars(Model& m) {
  for (auto& cb : m.codebooks) {
    if (cb.sigma_fixed) continue;
    for (double& v : cb.log_vars.leaf_values())
      v = std::min(kLogVarClampHi, std::max(kLogVarClampLo, v));
  }
}

/// Optimizes the model in place. Deterministic for a fixed seed. The best
/// evaluation checkpoint is kept at <out_dir>/best.ckpt and the log at
/// <out_dir>/train_log.csv; a halt on non-finite numbers dumps the last good
/// state to <out_dir>/halt.ckpt and raises TrainingHalted.
inline TrainResult train(Model& model, const TrainSchedule& sched,
                         const std::vector<Image>& train_data, const std::vector<Image>& eval_data,
                         std::uint64_t seed, const std::string& out_dir) {
  if (train_data.empty() || eval_data.empty()) throw Error("train: datasets must be non-empty");
  sched.validate();
  nn::NamedParams params = model.parameters();
  AdaMaxState optim = AdaMaxState::init(params, sched.lr_init);
  Rng rng(seed);
  PlateauTracker plateau;
  TrainResult result;
  result.best_checkpoint = out_dir + "/best.ckpt";
  result.log_path = out_dir + "/train_log.csv";
  long long step = 0;

  auto halt = [&](const std::string& why) {
    std::string path = out_dir + "/halt.ckpt";
    save_checkpoint(path, model.cfg, sched, params, &optim);
    write_train_log(result.log_path, result.log);
    throw TrainingHalted(why, path);
  };

  auto eval_pass = [&](const std::vector<Image>& data, std::uint64_t stream) {
    Rng erng = Rng::stream(seed, stream);
    double elbo_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t at = 0; at < data.size(); at += sched.batch_size) {
      std::size_t take = std::min<std::size_t>(sched.batch_size, data.size() - at);
      ImageBatch batch = ImageBatch::of(data, at, take);
      ElboOutcome oc = elbo(model, batch, PassMode::HardSample, 1.0, erng);
      elbo_sum += oc.report.total_elbo * static_cast<double>(take);
      count += take;
    }
    return elbo_sum / static_cast<double>(count);
  };

  std::vector<std::size_t> order(train_data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double ln2 = std::log(2.0);
  double dims = static_cast<double>(model.cfg.subpixels());

  for (int epoch = 0; epoch < sched.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(static_cast<int>(i))]);

    double train_elbo = 0.0, train_recon = 0.0;
    std::size_t seen = 0;
    double tau = sched.tau_at(step);
    for (std::size_t at = 0; at < order.size(); at += sched.batch_size) {
      std::size_t take = std::min<std::size_t>(sched.batch_size, order.size() - at);
      std::vector<Image> chunk;
      chunk.reserve(take);
      for (std::size_t i = 0; i < take; ++i) chunk.push_back(train_data[order[at + i]]);
      ImageBatch batch = ImageBatch::of(chunk);

      tau = sched.tau_at(step);
      ElboOutcome oc = elbo(model, batch, PassMode::Relaxed, tau, rng);
      Tensor loss = free_bits_objective(oc, sched.free_bits);
      if (!std::isfinite(loss.value()))
        halt("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      zero_grads(params);
      backward(loss);
      try {
        adamax_step(params, optim);
      } catch (const Error& e) {
        halt(e.what());
      }
      clamp_codebook_vars(model);
      train_elbo += oc.report.total_elbo * static_cast<double>(take);
      train_recon += oc.report.recon_loglik * static_cast<double>(take);
      seen += take;
      ++step;
    }
    train_elbo /= static_cast<double>(seen);
    train_recon /= static_cast<double>(seen);

    double eval_elbo = eval_pass(eval_data, 1000 + static_cast<std::uint64_t>(epoch));
    result.log.push_back({epoch, "train", train_elbo, -train_elbo / (dims * ln2), optim.lr, tau});
    result.log.push_back({epoch, "eval", eval_elbo, -eval_elbo / (dims * ln2), optim.lr, tau});
    result.epochs_run = epoch + 1;

    if (plateau.observe(-eval_elbo, optim, sched)) {
      result.best_eval_elbo = eval_elbo;
      save_checkpoint(result.best_checkpoint, model.cfg, sched, params, &optim);
    }

    double recon_bpd = -train_recon / (dims * ln2);
    if (sched.stop_recon_bpd > 0.0 && recon_bpd < sched.stop_recon_bpd) break;
  }

  write_train_log(result.log_path, result.log);
  return result;
}

}  // namespace rrvq
