#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rrvq/tensor.hpp"

namespace rrvq {

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

enum class LatentKind { Discrete, Gaussian };
enum class PParam { DirectCat, EmbedCat };
enum class SigmaMode { FixedOne, Learnt };
enum class TopPrior { Uniform, Learnt };
enum class EncoderKind { ConvResnet, Mlp };
enum class Likelihood { DiscretizedLogistic, Categorical256 };

struct LayerSpec {
  int grid_side = 1;
  int K = 256;
};

/// Full description of a hierarchical model. layers[0] is the bottom layer
/// (largest grid); grids halve at every step up the hierarchy.
struct ModelConfig {
  int image_side = 8;
  int image_channels = 3;
  std::vector<LayerSpec> layers = {{2, 16}, {1, 16}};
  int d_e = 16;
  int channels = 32;   // conv backbone width
  int hidden = 128;    // dense backbone width
  LatentKind latent_kind = LatentKind::Discrete;
  PParam p_param = PParam::EmbedCat;
  SigmaMode sigma_mode = SigmaMode::Learnt;
  bool scalar_sigma = false;
  TopPrior top_prior = TopPrior::Uniform;
  EncoderKind encoder_kind = EncoderKind::ConvResnet;
  Likelihood likelihood = Likelihood::DiscretizedLogistic;

  int num_layers() const { return static_cast<int>(layers.size()); }
  int latents_at(int layer) const { return layers[layer].grid_side * layers[layer].grid_side; }
  int subpixels() const { return image_channels * image_side * image_side; }

  /// Number of stride-2 stages between the image and the bottom latent grid.
  int stem_depth() const {
    int ratio = image_side / layers[0].grid_side;
    int j = 0;
    while (ratio > 1) {
      ratio /= 2;
      ++j;
    }
    return j;
  }

  void validate() const {
    if (layers.empty()) throw ConfigError("config: at least one latent layer required");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].grid_side < 1 || layers[i].K < 1)
        throw ConfigError("config: layer " + std::to_string(i) + " has invalid grid or K");
      if (i + 1 < layers.size() && layers[i + 1].grid_side * 2 != layers[i].grid_side)
        throw ConfigError("config: grid sides must halve going up the hierarchy (layer " +
                          std::to_string(i) + ": " + std::to_string(layers[i].grid_side) + " -> " +
                          std::to_string(layers[i + 1].grid_side) + ")");
    }
    int ratio = image_side / layers[0].grid_side;
    if (ratio < 2 || layers[0].grid_side * ratio != image_side || (ratio & (ratio - 1)) != 0)
      throw ConfigError("config: image side " + std::to_string(image_side) +
                        " must be a power-of-two multiple (>= 2) of the bottom grid " +
                        std::to_string(layers[0].grid_side));
    if (d_e < 1 || channels < 1 || hidden < 1)
      throw ConfigError("config: d_e, channels and hidden must be positive");
    if (image_channels != 3) throw ConfigError("config: only 3-channel images are supported");
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (latent_kind == LatentKind::Discrete && p_param == PParam::DirectCat &&
        sigma_mode == SigmaMode::Learnt)
      w.push_back("direct_cat with learnt sigma is prone to unstable training");
    return w;
  }
};

/// Optimization schedule: plateau-decayed AdaMax with free bits and an
/// exponentially annealed relaxation temperature.
struct TrainSchedule {
  double lr_init = 2e-3;
  double lr_decay = 0.8;
  double lr_min = 5e-5;
  int patience = 5;
  int max_epochs = 200;
  int batch_size = 64;
  double free_bits = 0.1;  // nats per layer
  double tau_init = 1.0;
  double tau_min = 0.25;
  double tau_decay = 0.01;       // per-step exponential rate
  double stop_recon_bpd = 0.0;   // stop early below this train recon bpd; 0 disables

  double tau_at(long long step) const {
    return std::max(tau_min, tau_init * std::exp(-tau_decay * static_cast<double>(step)));
  }

  void validate() const {
    if (!(lr_min > 0.0) || lr_min > lr_init) throw ConfigError("schedule: need 0 < lr_min <= lr_init");
    if (patience < 1) throw ConfigError("schedule: patience must be >= 1");
    if (!(tau_min > 0.0)) throw ConfigError("schedule: tau_min must be positive");
    if (free_bits < 0.0) throw ConfigError("schedule: free_bits must be >= 0");
    if (batch_size < 1 || max_epochs < 0) throw ConfigError("schedule: bad batch size or epochs");
  }
};

// ---------------------------------------------------------------------------
// Flat key = value config text
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Parses `key = value` lines with '#' comments into an ordered map.
inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
    kv[key] = val;
  }
  return kv;
}

namespace detail {

inline int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (...) {
    throw ConfigError("config: " + key + " = " + v + " is not an integer");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (...) {
    throw ConfigError("config: " + key + " = " + v + " is not a number");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config: " + key + " = " + v + " is not a boolean");
}

template <class T>
T to_enum(const std::string& key, const std::string& v,
          const std::vector<std::pair<std::string, T>>& table) {
  for (const auto& [name, val] : table)
    if (v == name) return val;
  std::string opts;
  for (const auto& [name, val] : table) opts += (opts.empty() ? "" : "|") + name;
  throw ConfigError("config: " + key + " = " + v + " (expected " + opts + ")");
}

inline const std::vector<std::pair<std::string, LatentKind>>& latent_kind_names() {
  static const std::vector<std::pair<std::string, LatentKind>> t = {
      {"discrete", LatentKind::Discrete}, {"gaussian", LatentKind::Gaussian}};
  return t;
}
inline const std::vector<std::pair<std::string, PParam>>& p_param_names() {
  static const std::vector<std::pair<std::string, PParam>> t = {
      {"direct_cat", PParam::DirectCat}, {"embed_cat", PParam::EmbedCat}};
  return t;
}
inline const std::vector<std::pair<std::string, SigmaMode>>& sigma_mode_names() {
  static const std::vector<std::pair<std::string, SigmaMode>> t = {
      {"fixed_one", SigmaMode::FixedOne}, {"learnt", SigmaMode::Learnt}};
  return t;
}
inline const std::vector<std::pair<std::string, TopPrior>>& top_prior_names() {
  static const std::vector<std::pair<std::string, TopPrior>> t = {
      {"uniform", TopPrior::Uniform}, {"learnt", TopPrior::Learnt}};
  return t;
}
inline const std::vector<std::pair<std::string, EncoderKind>>& encoder_kind_names() {
  static const std::vector<std::pair<std::string, EncoderKind>> t = {
      {"conv_resnet", EncoderKind::ConvResnet}, {"mlp", EncoderKind::Mlp}};
  return t;
}
inline const std::vector<std::pair<std::string, Likelihood>>& likelihood_names() {
  static const std::vector<std::pair<std::string, Likelihood>> t = {
      {"discretized_logistic", Likelihood::DiscretizedLogistic},
      {"categorical_256", Likelihood::Categorical256}};
  return t;
}

template <class T>
std::string enum_name(T v, const std::vector<std::pair<std::string, T>>& table) {
  for (const auto& [name, val] : table)
    if (val == v) return name;
  return "?";
}

}  // namespace detail

struct ParsedConfig {
  ModelConfig model;
  TrainSchedule schedule;
};

inline ParsedConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  ParsedConfig pc;
  ModelConfig& m = pc.model;
  TrainSchedule& s = pc.schedule;

  std::map<std::string, std::string> rest = kv;
  auto take = [&rest](const std::string& key) {
    auto it = rest.find(key);
    if (it == rest.end()) return std::string();
    std::string v = it->second;
    rest.erase(it);
    return v;
  };

  if (auto v = take("image_side"); !v.empty()) m.image_side = detail::to_int("image_side", v);
  if (auto v = take("d_e"); !v.empty()) m.d_e = detail::to_int("d_e", v);
  if (auto v = take("channels"); !v.empty()) m.channels = detail::to_int("channels", v);
  if (auto v = take("hidden"); !v.empty()) m.hidden = detail::to_int("hidden", v);
  if (auto v = take("latent_kind"); !v.empty())
    m.latent_kind = detail::to_enum("latent_kind", v, detail::latent_kind_names());
  bool p_param_set = false, sigma_set = false;
  if (auto v = take("p_param"); !v.empty()) {
    m.p_param = detail::to_enum("p_param", v, detail::p_param_names());
    p_param_set = true;
  }
  if (auto v = take("sigma_mode"); !v.empty()) {
    m.sigma_mode = detail::to_enum("sigma_mode", v, detail::sigma_mode_names());
    sigma_set = true;
  }
  if (auto v = take("scalar_sigma"); !v.empty()) m.scalar_sigma = detail::to_bool("scalar_sigma", v);
  if (auto v = take("top_prior"); !v.empty())
    m.top_prior = detail::to_enum("top_prior", v, detail::top_prior_names());
  if (auto v = take("encoder_kind"); !v.empty())
    m.encoder_kind = detail::to_enum("encoder_kind", v, detail::encoder_kind_names());
  if (auto v = take("likelihood"); !v.empty())
    m.likelihood = detail::to_enum("likelihood", v, detail::likelihood_names());

  if (m.latent_kind == LatentKind::Gaussian && (p_param_set || sigma_set))
    throw ConfigError("config: p_param and sigma_mode do not apply to gaussian latents");

  if (auto v = take("L"); !v.empty()) {
    int L = detail::to_int("L", v);
    if (L < 1) throw ConfigError("config: L must be >= 1");
    m.layers.assign(static_cast<std::size_t>(L), LayerSpec{});
  }
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    std::string g = take("layer." + std::to_string(i) + ".grid_side");
    std::string k = take("layer." + std::to_string(i) + ".K");
    if (!g.empty()) m.layers[i].grid_side = detail::to_int("layer grid", g);
    if (!k.empty()) m.layers[i].K = detail::to_int("layer K", k);
  }

  if (auto v = take("lr_init"); !v.empty()) s.lr_init = detail::to_double("lr_init", v);
  if (auto v = take("lr_decay"); !v.empty()) s.lr_decay = detail::to_double("lr_decay", v);
  if (auto v = take("lr_min"); !v.empty()) s.lr_min = detail::to_double("lr_min", v);
  if (auto v = take("patience"); !v.empty()) s.patience = detail::to_int("patience", v);
  if (auto v = take("max_epochs"); !v.empty()) s.max_epochs = detail::to_int("max_epochs", v);
  if (auto v = take("batch_size"); !v.empty()) s.batch_size = detail::to_int("batch_size", v);
  if (auto v = take("free_bits"); !v.empty()) s.free_bits = detail::to_double("free_bits", v);
  if (auto v = take("tau_init"); !v.empty()) s.tau_init = detail::to_double("tau_init", v);
  if (auto v = take("tau_min"); !v.empty()) s.tau_min = detail::to_double("tau_min", v);
  if (auto v = take("tau_decay"); !v.empty()) s.tau_decay = detail::to_double("tau_decay", v);
  if (auto v = take("stop_recon_bpd"); !v.empty())
    s.stop_recon_bpd = detail::to_double("stop_recon_bpd", v);

  if (!rest.empty()) throw ConfigError("config: unknown key '" + rest.begin()->first + "'");
  m.validate();
  s.validate();
  return pc;
}

inline ParsedConfig parse_config_text(const std::string& text) {
  return config_from_kv(parse_kv_text(text));
}

inline ParsedConfig load_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return parse_config_text(os.str());
}

/// Canonical serialization: one sorted key per line. Used verbatim inside
/// checkpoints, so equal configurations produce byte-equal text.
inline std::string config_to_text(const ModelConfig& m, const TrainSchedule& s) {
  std::map<std::string, std::string> kv;
  kv["image_side"] = std::to_string(m.image_side);
  kv["d_e"] = std::to_string(m.d_e);
  kv["channels"] = std::to_string(m.channels);
  kv["hidden"] = std::to_string(m.hidden);
  kv["latent_kind"] = detail::enum_name(m.latent_kind, detail::latent_kind_names());
  if (m.latent_kind == LatentKind::Discrete) {
    kv["p_param"] = detail::enum_name(m.p_param, detail::p_param_names());
    kv["sigma_mode"] = detail::enum_name(m.sigma_mode, detail::sigma_mode_names());
  }
  kv["scalar_sigma"] = m.scalar_sigma ? "1" : "0";
  kv["top_prior"] = detail::enum_name(m.top_prior, detail::top_prior_names());
  kv["encoder_kind"] = detail::enum_name(m.encoder_kind, detail::encoder_kind_names());
  kv["likelihood"] = detail::enum_name(m.likelihood, detail::likelihood_names());
  kv["L"] = std::to_string(m.num_layers());
  for (int i = 0; i < m.num_layers(); ++i) {
    kv["layer." + std::to_string(i) + ".grid_side"] = std::to_string(m.layers[i].grid_side);
    kv["layer." + std::to_string(i) + ".K"] = std::to_string(m.layers[i].K);
  }
  kv["lr_init"] = detail::fmt_double(s.lr_init);
  kv["lr_decay"] = detail::fmt_double(s.lr_decay);
  kv["lr_min"] = detail::fmt_double(s.lr_min);
  kv["patience"] = std::to_string(s.patience);
  kv["max_epochs"] = std::to_string(s.max_epochs);
  kv["batch_size"] = std::to_string(s.batch_size);
  kv["free_bits"] = detail::fmt_double(s.free_bits);
  kv["tau_init"] = detail::fmt_double(s.tau_init);
  kv["tau_min"] = detail::fmt_double(s.tau_min);
  kv["tau_decay"] = detail::fmt_double(s.tau_decay);
  kv["stop_recon_bpd"] = detail::fmt_double(s.stop_recon_bpd);

  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
  return os.str();
}

/// Lists keys whose values differ between two flat config texts.
inline std::vector<std::string> config_diff(const std::string& a, const std::string& b) {
  auto ka = parse_kv_text(a);
  auto kb = parse_kv_text(b);
  std::vector<std::string> diff;
  for (const auto& [k, v] : ka) {
    auto it = kb.find(k);
    if (it == kb.end())
      diff.push_back(k + ": " + v + " vs <missing>");
    else if (it->second != v)
      diff.push_back(k + ": " + v + " vs " + it->second);
  }
  for (const auto& [k, v] : kb)
    if (!ka.count(k)) diff.push_back(k + ": <missing> vs " + v);
  return diff;
}

}  // namespace rrvq
