#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rrvq/config.hpp"
#include "rrvq/data_codec.hpp"
#include "rrvq/entropy_analysis.hpp"
#include "rrvq/grad_check.hpp"
#include "rrvq/model.hpp"
#include "rrvq/random.hpp"
#include "rrvq/training.hpp"

namespace rrvq {
namespace cli {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

namespace detail_cli {

inline void echo(const std::string& key, const std::string& value) {
  std::cout << "  " << key << " = " << value << "\n";
}

inline void echo_config(const ModelConfig& cfg, const TrainSchedule& sched) {
  std::cout << "resolved config:\n";
  std::istringstream in(config_to_text(cfg, sched));
  std::string line;
  while (std::getline(in, line)) std::cout << "  " << line << "\n";
}

inline std::vector<Image> load_ppm_dir(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm")
      files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .ppm files in " + dir);
  std::vector<Image> images;
  images.reserve(files.size());
  for (const auto& f : files) images.push_back(read_ppm(f));
  return images;
}

struct DataSplit {
  std::vector<Image> train;
  std::vector<Image> eval;
};

/// `swatches` generates the toy set; anything else is a directory of PPMs,
/// split with the trailing tenth (at least one image) held out.
inline DataSplit load_data(const std::string& spec, int side, int n_train, int n_eval,
                           std::uint64_t seed) {
  DataSplit out;
  if (spec == "swatches") {
    Rng train_rng = Rng::stream(seed, 1);
    Rng eval_rng = Rng::stream(seed, 2);
    out.train = gen_swatches(n_train, side, train_rng);
    out.eval = gen_swatches(n_eval, side, eval_rng);
    return out;
  }
  std::vector<Image> all = load_ppm_dir(spec);
  std::size_t held = std::max<std::size_t>(1, all.size() / 10);
  if (all.size() < 2) throw IoError("need at least two images to split train/eval");
  out.train.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(held));
  out.eval.assign(all.end() - static_cast<std::ptrdiff_t>(held), all.end());
  return out;
}

inline Model load_model(const std::string& path) {
  RestoredModel rm = restore_model(path);
  echo_config(rm.parsed.model, rm.parsed.schedule);
  return std::move(rm.model);
}

inline std::vector<double> grid(double lo, double hi, int steps) {
  std::vector<double> g;
  if (steps < 1) throw Error("grid: steps must be >= 1");
  if (steps == 1) {
    g.push_back(lo);
    return g;
  }
  for (int i = 0; i < steps; ++i) g.push_back(lo + (hi - lo) * i / (steps - 1));
  return g;
}

}  // namespace detail_cli

struct Args {
  std::uint64_t seed = 0;

  // gen-data / train / eval
  int n = 512;
  int n_eval = 64;
  int side = 8;
  std::string data = "swatches";
  std::string config_path;
  std::string out;
  std::string model_path;
  std::string in_path;

  // sample / layerwise
  int layer = 1;
  int per_row = 8;
  std::string sample_mode = "hard";

  // entropy
  int K = 256;
  double delta = 1.0;
  double d_min = 10.0;
  double d_max = 30.0;
  int steps = 21;
  double d_step = 1.0;
  int trials = 1000;
  int d_e = 32;
  double radius = 0.5;
  bool ball = false;

  // grad-check
  double step = 1e-4;
  double tol = 1e-4;
  int batch = 2;
};

inline int dispatch(const std::string& cmd, const Args& a) {
  if (cmd == "gen-data") {
    std::filesystem::create_directories(a.out);
    Rng rng(a.seed);
    auto images = gen_swatches(a.n, a.side, rng);
    std::cout << "resolved config:\n";
    detail_cli::echo("n", std::to_string(a.n));
    detail_cli::echo("side", std::to_string(a.side));
    detail_cli::echo("seed", std::to_string(a.seed));
    detail_cli::echo("out", a.out);
    for (std::size_t i = 0; i < images.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "swatch_%05zu.ppm", i);
      write_ppm(a.out + "/" + name, images[i]);
    }
    std::cout << "wrote " << images.size() << " images to " << a.out << "\n";
    return kExitOk;
  }

  if (cmd == "train") {
    ParsedConfig pc = load_config_file(a.config_path);
    detail_cli::echo_config(pc.model, pc.schedule);
    for (const auto& w : pc.model.warnings()) std::cerr << "warning: " << w << "\n";
    std::filesystem::create_directories(a.out);
    auto data = detail_cli::load_data(a.data, pc.model.image_side, a.n, a.n_eval, a.seed);
    Rng mrng = Rng::stream(a.seed, 0);
    Model model = Model::init(pc.model, mrng);
    TrainResult res = train(model, pc.schedule, data.train, data.eval, a.seed, a.out);
    std::cout << "trained " << res.epochs_run << " epochs; best eval elbo " << res.best_eval_elbo
              << " nats; checkpoint " << res.best_checkpoint << "\n";
    return kExitOk;
  }

  if (cmd == "eval") {
    Model model = detail_cli::load_model(a.model_path);
    auto data = detail_cli::load_data(a.data, model.cfg.image_side, a.n, a.n_eval, a.seed);
    Rng rng = Rng::stream(a.seed, 3);
    double elbo_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t at = 0; at < data.eval.size(); at += 64) {
      std::size_t take = std::min<std::size_t>(64, data.eval.size() - at);
      ImageBatch batch = ImageBatch::of(data.eval, at, take);
      elbo_sum += elbo(model, batch, PassMode::HardSample, 1.0, rng).report.total_elbo *
                  static_cast<double>(take);
      count += take;
    }
    double e = elbo_sum / static_cast<double>(count);
    double bpd = -e / (model.cfg.subpixels() * std::log(2.0));
    std::cout << "eval images=" << count << " elbo_nats=" << format_csv_double(e)
              << " bpd=" << format_csv_double(bpd) << "\n";
    return kExitOk;
  }

  if (cmd == "sample") {
    Model model = detail_cli::load_model(a.model_path);
    Rng rng(a.seed);
    PassMode pm = a.sample_mode == "mode" ? PassMode::ModeArgmax : PassMode::HardSample;
    GenerativeResult gen = ancestral_sample(model, a.n, rng, pm);
    auto unit = likelihood_mean_unit(model, gen.like);
    std::vector<Image> images;
    std::size_t per = model.cfg.subpixels();
    for (int i = 0; i < a.n; ++i) {
      std::vector<double> one(unit.begin() + i * per, unit.begin() + (i + 1) * per);
      images.push_back(image_from_unit(one, model.cfg.image_channels, model.cfg.image_side));
    }
    write_ppm(a.out, tile_images(images, a.per_row));
    std::cout << "wrote " << a.n << " samples to " << a.out << "\n";
    return kExitOk;
  }

  if (cmd == "reconstruct") {
    Model model = detail_cli::load_model(a.model_path);
    Image x = read_ppm(a.in_path);
    Rng rng(a.seed);
    PosteriorResult post = posterior_pass(model, ImageBatch::of({x}), PassMode::ModeArgmax, 1.0, rng);
    GenerativeResult gen = generative_pass(model, post.latents(), 1);
    write_ppm(a.out, image_from_unit(likelihood_mean_unit(model, gen.like),
                                     model.cfg.image_channels, model.cfg.image_side));
    std::cout << "wrote reconstruction to " << a.out << "\n";
    return kExitOk;
  }

  if (cmd == "layerwise") {
    Model model = detail_cli::load_model(a.model_path);
    Image x = read_ppm(a.in_path);
    Rng rng(a.seed);
    LayerwiseResult res = layerwise_resample(model, x, a.layer, a.n, rng);
    write_ppm(a.out, tile_images(res.images, a.per_row));
    std::cout << "wrote " << a.n << " layer-" << a.layer << " resamples to " << a.out << "\n";
    return kExitOk;
  }

  if (cmd == "entropy") {
    std::cout << "resolved config:\n";
    detail_cli::echo("K", std::to_string(a.K));
    detail_cli::echo("delta", std::to_string(a.delta));
    detail_cli::echo("d_min", std::to_string(a.d_min));
    detail_cli::echo("d_max", std::to_string(a.d_max));
    detail_cli::echo("steps", std::to_string(a.steps));
    auto rows = entropy::worst_case_curve(a.K, a.delta, detail_cli::grid(a.d_min, a.d_max, a.steps));
    entropy::write_curve_csv(a.out, rows);
    std::cout << "wrote " << rows.size() << " rows to " << a.out << "\n";
    return kExitOk;
  }

  if (cmd == "mc-entropy") {
    std::cout << "resolved config:\n";
    detail_cli::echo("K", std::to_string(a.K));
    detail_cli::echo("d_e", std::to_string(a.d_e));
    detail_cli::echo("radius", std::to_string(a.radius));
    detail_cli::echo("trials", std::to_string(a.trials));
    detail_cli::echo("sampler", a.ball ? "ball" : "surface");
    std::vector<double> ds;
    for (double d = a.d_min; d <= a.d_max + 1e-12; d += a.d_step) ds.push_back(d);
    auto rows = entropy::mc_codebook_entropy(ds, a.trials, a.K, a.d_e, a.radius, a.seed, a.ball);
    entropy::write_mc_csv(a.out, rows);
    std::cout << "wrote " << rows.size() << " rows to " << a.out << "\n";
    return kExitOk;
  }

  if (cmd == "compress") {
    Model model = detail_cli::load_model(a.model_path);
    Image x = read_ppm(a.in_path);
    LatentBitstream bs = compress(model, x);
    write_bitstream(a.out, bs);
    std::cout << "compressed " << a.in_path << " to " << bs.payload_bits() << " bits ("
              << a.out << ")\n";
    return kExitOk;
  }

  if (cmd == "decompress") {
    Model model = detail_cli::load_model(a.model_path);
    LatentBitstream bs = read_bitstream(a.in_path);
    write_ppm(a.out, decompress(model, bs));
    std::cout << "wrote decoded image to " << a.out << "\n";
    return kExitOk;
  }

  if (cmd == "grad-check") {
    ParsedConfig pc = a.config_path.empty() ? ParsedConfig{} : load_config_file(a.config_path);
    if (a.config_path.empty()) {
      pc.model.image_side = 4;
      pc.model.layers = {{2, 4}, {1, 4}};
      pc.model.d_e = 3;
      pc.model.channels = 4;
    }
    detail_cli::echo_config(pc.model, pc.schedule);
    Rng mrng = Rng::stream(a.seed, 0);
    Model model = Model::init(pc.model, mrng);

    Rng drng = Rng::stream(a.seed, 1);
    std::vector<Image> images;
    for (int i = 0; i < a.batch; ++i) {
      Image img;
      img.channels = pc.model.image_channels;
      img.side = pc.model.image_side;
      img.levels.resize(pc.model.subpixels());
      for (auto& v : img.levels) v = static_cast<std::uint8_t>(drng.uniform_int(256));
      images.push_back(std::move(img));
    }
    ImageBatch batch = ImageBatch::of(images);
    std::uint64_t noise_seed = a.seed + 17;
    auto loss_fn = [&]() {
      Rng rng(noise_seed);
      return neg(elbo(model, batch, PassMode::Relaxed, 1.0, rng).total);
    };
    auto rep = grad_check_params(loss_fn, model.parameters(), a.step, a.tol);
    std::cout << "grad-check max_rel_dev=" << format_csv_double(rep.max_rel_dev)
              << " tol=" << format_csv_double(rep.tol) << " worst=" << rep.worst_param << "["
              << rep.worst_index << "]"
              << " analytic=" << format_csv_double(rep.worst_analytic)
              << " numeric=" << format_csv_double(rep.worst_numeric) << " -> "
              << (rep.pass ? "pass" : "FAIL") << "\n";
    return rep.pass ? kExitOk : kExitRuntime;
  }

  std::cerr << "unknown command " << cmd << "\n";
  return kExitUsage;
}

inline void add_common(CLI::App* sub, Args& a) {
  sub->add_option("--seed", a.seed, "random seed");
}

inline std::unique_ptr<CLI::App> make_app(Args& a) {
  auto app = std::make_unique<CLI::App>("hierarchical discrete VAE toolkit");
  app->require_subcommand(1);

  CLI::App* gen = app->add_subcommand("gen-data", "generate the colour-swatch toy dataset");
  gen->add_option("--n", a.n, "number of images");
  gen->add_option("--side", a.side, "image side length");
  gen->add_option("--out", a.out, "output directory")->required();
  add_common(gen, a);

  CLI::App* tr = app->add_subcommand("train", "train a model from a config file");
  tr->add_option("--config", a.config_path, "key = value config file")->required();
  tr->add_option("--data", a.data, "'swatches' or a directory of .ppm images");
  tr->add_option("--n", a.n, "generated training images (swatches)");
  tr->add_option("--n-eval", a.n_eval, "generated eval images (swatches)");
  tr->add_option("--out", a.out, "output directory for checkpoint and log")->required();
  add_common(tr, a);

  CLI::App* ev = app->add_subcommand("eval", "evaluate a checkpoint with hard samples");
  ev->add_option("--model", a.model_path, "checkpoint path")->required();
  ev->add_option("--data", a.data, "'swatches' or a directory of .ppm images");
  ev->add_option("--n", a.n, "generated training images (swatches)");
  ev->add_option("--n-eval", a.n_eval, "generated eval images (swatches)");
  add_common(ev, a);

  CLI::App* sa = app->add_subcommand("sample", "ancestral samples as a PPM grid");
  sa->add_option("--model", a.model_path, "checkpoint path")->required();
  sa->add_option("--n", a.n, "number of samples");
  sa->add_option("--per-row", a.per_row, "grid images per row");
  sa->add_option("--mode", a.sample_mode, "latent draw: hard or mode");
  sa->add_option("--out", a.out, "output PPM")->required();
  add_common(sa, a);

  CLI::App* re = app->add_subcommand("reconstruct", "mode-latent reconstruction of an image");
  re->add_option("--model", a.model_path, "checkpoint path")->required();
  re->add_option("--in", a.in_path, "input PPM")->required();
  re->add_option("--out", a.out, "output PPM")->required();
  add_common(re, a);

  CLI::App* lw = app->add_subcommand("layerwise", "resample one layer, mode-propagate the rest");
  lw->add_option("--model", a.model_path, "checkpoint path")->required();
  lw->add_option("--in", a.in_path, "input PPM")->required();
  lw->add_option("--layer", a.layer, "1-based layer to resample");
  lw->add_option("--n", a.n, "number of resamples");
  lw->add_option("--per-row", a.per_row, "grid images per row");
  lw->add_option("--out", a.out, "output PPM")->required();
  add_common(lw, a);

  CLI::App* en = app->add_subcommand("entropy", "worst-case entropy curves, exact and approximate");
  en->add_option("--K", a.K, "categories");
  en->add_option("--delta", a.delta, "extra separation of the far codebook entries");
  en->add_option("--d-min", a.d_min, "smallest distance");
  en->add_option("--d-max", a.d_max, "largest distance");
  en->add_option("--steps", a.steps, "number of grid points");
  en->add_option("--out", a.out, "output CSV")->required();
  add_common(en, a);

  CLI::App* mc = app->add_subcommand("mc-entropy", "randomized-codebook entropy simulation");
  mc->add_option("--K", a.K, "codebook entries");
  mc->add_option("--d-e", a.d_e, "embedding dimension");
  mc->add_option("--radius", a.radius, "hypersphere radius");
  mc->add_option("--trials", a.trials, "codebooks per distance");
  mc->add_option("--d-min", a.d_min, "smallest distance");
  mc->add_option("--d-max", a.d_max, "largest distance");
  mc->add_option("--d-step", a.d_step, "distance increment");
  mc->add_flag("--ball", a.ball, "sample the solid ball instead of the surface");
  mc->add_option("--out", a.out, "output CSV")->required();
  add_common(mc, a);

  CLI::App* co = app->add_subcommand("compress", "encode an image to a latent bitstream");
  co->add_option("--model", a.model_path, "checkpoint path")->required();
  co->add_option("--in", a.in_path, "input PPM")->required();
  co->add_option("--out", a.out, "output bitstream")->required();
  add_common(co, a);

  CLI::App* de = app->add_subcommand("decompress", "decode a latent bitstream to an image");
  de->add_option("--model", a.model_path, "checkpoint path")->required();
  de->add_option("--in", a.in_path, "input bitstream")->required();
  de->add_option("--out", a.out, "output PPM")->required();
  add_common(de, a);

  CLI::App* gc = app->add_subcommand("grad-check", "finite-difference check of model gradients");
  gc->add_option("--config", a.config_path, "key = value config file (default: tiny model)");
  gc->add_option("--step", a.step, "finite-difference step");
  gc->add_option("--tol", a.tol, "max relative deviation");
  gc->add_option("--batch", a.batch, "batch size for the check");
  add_common(gc, a);

  return app;
}

inline std::string subcommand_help(const std::string& name) {
  Args a;
  auto app = make_app(a);
  CLI::App* sub = app->get_subcommand(name);
  return sub->help();
}

inline std::vector<std::string> command_names() {
  return {"gen-data",  "train",   "eval",       "sample",     "reconstruct", "layerwise",
          "entropy",   "mc-entropy", "compress", "decompress", "grad-check"};
}

inline int run(const std::vector<std::string>& args) {
  Args a;
  auto app = make_app(a);
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app->parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app->exit(e);
  } catch (const CLI::ParseError& e) {
    app->exit(e);
    return kExitUsage;
  }
  try {
    for (const auto& name : command_names())
      if (app->get_subcommand(name)->parsed()) return dispatch(name, a);
    return kExitUsage;
  } catch (const TrainingHalted& e) {
    std::cerr << "error: " << e.what() << " (state dumped to " << e.checkpoint_path << ")\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace cli
}  // namespace rrvq
