#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "spi/data.hpp"
#include "spi/losses.hpp"

namespace spi {

struct TrainConfig {
  double sr = 0.1;
  int image_size = 128;
  double lr_mask = 1e-5;
  double lr_gen = 1e-4;
  double lr_disc = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  // Discriminator updates start after this many generator-only epochs...
  int warmup_epochs = 4;
  // ...and then run in every d_period_epochs-th epoch (1 = every epoch),
  int d_period_epochs = 1;
  // with this many discriminator steps per generator step.
  int d_steps_per_g_step = 1;
  int epochs = 30;
  int batch_size = 32;
  double lambda_adv = 0.05;
  std::uint64_t seed = 0;
  bool use_gan = true;
  bool rgb = false;

  int gen_features = 64;
  int disc_features_low = 32;
  int disc_features_high = 64;
  int disc_hidden = 1024;
  double leaky_slope = 0.2;
  PerceptualConfig perceptual;

  int channels() const { return rgb ? 3 : 1; }
  int measurements() const;  // per channel
};

struct ExperimentConfig {
  TrainConfig train;
  DatasetSpec data;  // image_size and grayscale mirror train
  std::string out_dir = "out";
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

// Throws ErrorCode::invalid_argument with a readable message.
void validate(const ExperimentConfig& cfg);

// Flat JSON object; every key is optional, unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

// key=value override; the value is parsed as JSON when possible (numbers,
// booleans), otherwise taken as a string.
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);

// FNV-1a of the canonical JSON echo.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace spi
