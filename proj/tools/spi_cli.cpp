// Command-line front end. Talks to the library only through spi.h.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "spi/spi.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exit codes are part of the CLI contract.
constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

int exit_code(spi_status st) {
  switch (st) {
    case SPI_OK: return kExitOk;
    case SPI_ERR_NUMERICAL:
    case SPI_ERR_NOT_CONVERGED: return kExitNumerical;
    case SPI_ERR_INTERNAL: return kExitInternal;
    default: return kExitUsage;
  }
}

struct Failure {
  int code;
};

void check(spi_status st, const std::string& context) {
  if (st == SPI_OK) return;
  std::cerr << "error: " << context << ": " << spi_last_error() << "\n";
  throw Failure{exit_code(st)};
}

[[noreturn]] void usage_error(const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  throw Failure{kExitUsage};
}

struct ConfigDeleter {
  void operator()(spi_config* c) const { spi_config_free(c); }
};
struct ModelDeleter {
  void operator()(spi_model* m) const { spi_model_free(m); }
};
struct StringDeleter {
  void operator()(char* s) const { spi_string_free(s); }
};
struct BufferDeleter {
  void operator()(double* p) const { spi_buffer_free(p); }
};
using ConfigPtr = std::unique_ptr<spi_config, ConfigDeleter>;
using ModelPtr = std::unique_ptr<spi_model, ModelDeleter>;
using StringPtr = std::unique_ptr<char, StringDeleter>;
using BufferPtr = std::unique_ptr<double, BufferDeleter>;

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !(f << text)) usage_error("cannot write " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) usage_error("cannot create directory " + dir.string());
}

ModelPtr load_model(const std::string& path) {
  spi_model* m = nullptr;
  check(spi_model_load(path.c_str(), &m), "loading checkpoint " + path);
  return ModelPtr(m);
}

json model_info(const spi_model* m) {
  char* s = nullptr;
  check(spi_model_info(m, &s), "reading checkpoint info");
  StringPtr owned(s);
  return json::parse(owned.get());
}

// Options shared by the commands that read a checkpoint.
struct NoiseOptions {
  double sigma = -1.0;
  std::int64_t seed = -1;

  void add(CLI::App* cmd) {
    cmd->add_option("--noise-sigma", sigma, "Measurement noise std (default: checkpoint config)");
    cmd->add_option("--seed", seed, "Noise seed (default: checkpoint config)");
  }
  void resolve(const json& info, double& s, std::uint64_t& k) const {
    s = sigma >= 0 ? sigma : info["config"].value("noise_sigma", 0.0);
    k = seed >= 0 ? static_cast<std::uint64_t>(seed) : info["config"].value("noise_seed", std::uint64_t{0});
  }
};

struct TrainArgs {
  std::string config;
  std::string out;
  std::int64_t seed = -1;
  double sr = -1.0;
  int image_size = 0;
  int epochs = 0;
  bool no_gan = false;
  bool quiet = false;
  std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& a) {
  spi_config* raw = nullptr;
  if (a.config.empty())
    check(spi_config_create(&raw), "creating config");
  else
    check(spi_config_load(a.config.c_str(), &raw), "loading " + a.config);
  ConfigPtr cfg(raw);

  auto set = [&](const std::string& key, const std::string& value) {
    check(spi_config_set(cfg.get(), key.c_str(), value.c_str()), "--" + key);
  };
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) usage_error("--set expects key=value, got '" + kv + "'");
    set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed >= 0) set("seed", std::to_string(a.seed));
  if (a.sr >= 0) set("sr", json(a.sr).dump());
  if (a.image_size > 0) set("image_size", std::to_string(a.image_size));
  if (a.epochs > 0) set("epochs", std::to_string(a.epochs));
  if (a.no_gan) set("use_gan", "false");
  if (!a.out.empty()) set("out_dir", a.out);
  check(spi_config_validate(cfg.get()), "invalid config");

  char* echo = nullptr;
  check(spi_config_to_json(cfg.get(), &echo), "config");
  StringPtr echo_owned(echo);
  const std::string out_dir = json::parse(echo_owned.get())["out_dir"].get<std::string>();

  auto on_epoch = [](const spi_epoch_info* e, void* user) {
    if (*static_cast<bool*>(user)) return;
    std::printf("epoch %3d  mse %.6f  vgg %.6f  adv %.6f  d_loss %.6f  val_psnr %.3f dB  d_updates %lld\n", e->epoch,
                e->mse, e->vgg, e->adv, e->d_loss, e->val_psnr, e->d_updates);
    std::fflush(stdout);
  };
  bool quiet = a.quiet;
  check(spi_train(cfg.get(), out_dir.c_str(), on_epoch, &quiet), "training");
  std::printf("wrote %s\n", (fs::path(out_dir) / "checkpoint_last.spck").string().c_str());
  return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out, const NoiseOptions& noise) {
  auto model = load_model(ckpt);
  double sigma = 0;
  std::uint64_t seed = 0;
  noise.resolve(model_info(model.get()), sigma, seed);
  char* report = nullptr;
  char* table = nullptr;
  double latency = 0;
  check(spi_model_evaluate_dir(model.get(), data.c_str(), sigma, seed, &report, &table, &latency),
        "evaluating " + data);
  StringPtr report_owned(report);
  StringPtr table_owned(table);
  std::cout << table_owned.get();
  if (!out.empty()) {
    make_dir(out);
    write_file(fs::path(out) / "report.json", report_owned.get());
    std::cout << "wrote " << (fs::path(out) / "report.json").string() << "\n";
  }
  std::printf("mean reconstruction latency: %.3f ms\n", latency);
  return kExitOk;
}

int cmd_simulate(const std::string& ckpt, const std::string& scene_path, const std::string& out,
                 const NoiseOptions& noise) {
  if (!fs::is_regular_file(scene_path)) usage_error("scene file not found: " + scene_path);
  auto model = load_model(ckpt);
  const json info = model_info(model.get());
  double sigma = 0;
  std::uint64_t seed = 0;
  noise.resolve(info, sigma, seed);

  double* px = nullptr;
  int h = 0, w = 0, c = 0;
  check(spi_image_read(scene_path.c_str(), &px, &h, &w, &c), "reading " + scene_path);
  BufferPtr scene(px);

  double* vals = nullptr;
  int len = 0;
  check(spi_model_measure(model.get(), scene.get(), h, w, c, sigma, seed, &vals, &len), "measuring");
  BufferPtr values(vals);

  double* rec = nullptr;
  int rh = 0, rw = 0, rc = 0;
  double latency = 0;
  check(spi_model_reconstruct(model.get(), values.get(), len, &rec, &rh, &rw, &rc, &latency), "reconstructing");
  BufferPtr recon(rec);

  double p = 0, s = 0;
  check(spi_psnr(scene.get(), recon.get(), h, w, c, &p), "psnr");
  check(spi_ssim(scene.get(), recon.get(), h, w, c, &s), "ssim");

  make_dir(out);
  const std::string scene_id = fs::path(scene_path).filename().string();
  const json meas = {{"scene", scene_id},
                     {"channels", c},
                     {"measurements_per_channel", info["measurements"]},
                     {"noise_sigma", sigma},
                     {"noise_seed", seed},
                     {"config_hash", info["config_hash"]},
                     {"values", std::vector<double>(values.get(), values.get() + len)}};
  write_file(fs::path(out) / "measurements.json", meas.dump(2) + "\n");
  const std::string recon_name = rc == 3 ? "recon.ppm" : "recon.pgm";
  check(spi_image_write((fs::path(out) / recon_name).string().c_str(), recon.get(), rh, rw, rc), "writing recon");
  const json metrics = {{"scene", scene_id},       {"psnr_db", p},     {"ssim", s},
                        {"sr", info["sr"]},        {"config_hash", info["config_hash"]}};
  write_file(fs::path(out) / "metrics.json", metrics.dump(2) + "\n");

  std::printf("%s  PSNR %.3f dB  SSIM %.4f  latency %.3f ms\n", scene_id.c_str(), p, s, latency);
  return kExitOk;
}

int cmd_export_masks(const std::string& ckpt, const std::string& out) {
  auto model = load_model(ckpt);
  check(spi_model_export_masks(model.get(), out.c_str()), "exporting masks to " + out);
  const json info = model_info(model.get());
  std::printf("wrote %d mask pairs to %s\n", info["measurements"].get<int>(), out.c_str());
  return kExitOk;
}

int cmd_make_synthetic(int count, int size, std::int64_t seed, bool rgb, const std::string& out) {
  if (count <= 0) usage_error("--count must be positive");
  if (seed < 0) usage_error("--seed must be non-negative");
  check(spi_make_synthetic(count, size, static_cast<std::uint64_t>(seed), rgb ? 3 : 1, out.c_str()),
        "generating synthetic scenes");
  std::printf("wrote %d scenes to %s\n", count, out.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-pixel imaging: learned masks, reconstruction and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", spi_version());

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train masks and reconstruction network");
  train_cmd->add_option("--config", train.config, "JSON config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train.out, "Output directory (overrides out_dir)");
  train_cmd->add_option("--seed", train.seed, "Training seed");
  train_cmd->add_option("--sr", train.sr, "Sampling rate in (0, 1]");
  train_cmd->add_option("--image-size", train.image_size, "Scene side length");
  train_cmd->add_option("--epochs", train.epochs, "Number of epochs");
  train_cmd->add_flag("--no-gan", train.no_gan, "Disable the adversarial term");
  train_cmd->add_option("--set", train.sets, "Override any config key (key=value)");
  train_cmd->add_flag("-q,--quiet", train.quiet, "No per-epoch output");

  std::string ckpt, data, out, scene;
  NoiseOptions noise;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a directory of images");
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", data, "Directory of PGM/PPM images")->required();
  eval_cmd->add_option("--out", out, "Directory for report.json");
  noise.add(eval_cmd);

  auto* sim_cmd = app.add_subcommand("simulate", "Measure a scene and reconstruct it");
  sim_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  sim_cmd->add_option("--scene", scene, "Scene image (PGM/PPM)")->required();
  sim_cmd->add_option("--out", out, "Output directory")->required();
  noise.add(sim_cmd);

  auto* export_cmd = app.add_subcommand("export-masks", "Write learned masks as pos/neg PGM pairs");
  export_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  export_cmd->add_option("--out", out, "Output directory")->required();

  int count = 500, size = 32;
  std::int64_t synth_seed = 1;
  bool rgb = false;
  auto* synth_cmd = app.add_subcommand("make-synthetic", "Generate the synthetic shapes dataset");
  synth_cmd->add_option("--count", count, "Number of scenes");
  synth_cmd->add_option("--size", size, "Side length")->check(CLI::Range(4, 4096));
  synth_cmd->add_option("--image-size", size, "Alias of --size")->check(CLI::Range(4, 4096));
  synth_cmd->add_option("--seed", synth_seed, "Generator seed");
  synth_cmd->add_flag("--rgb", rgb, "Three-channel scenes");
  synth_cmd->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(ckpt, data, out, noise);
    if (*sim_cmd) return cmd_simulate(ckpt, scene, out, noise);
    if (*export_cmd) return cmd_export_masks(ckpt, out);
    if (*synth_cmd) return cmd_make_synthetic(count, size, synth_seed, rgb, out);
  } catch (const Failure& f) {
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitUsage;
}
