#include "spi/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "spi/error.hpp"
#include "spi/hash.hpp"
#include "spi/imaging.hpp"

namespace spi {

int TrainConfig::measurements() const { return sampling_count(sr, image_size, image_size); }

void validate(const ExperimentConfig& cfg) {
  const auto& t = cfg.train;
  require(std::isfinite(t.sr) && t.sr > 0.0 && t.sr <= 1.0, ErrorCode::invalid_argument,
          "invalid sampling rate " + std::to_string(t.sr) + " (must be in (0, 1])");
  require(t.image_size >= 16, ErrorCode::invalid_argument, "image_size must be >= 16");
  (void)t.measurements();
  require(t.lr_mask > 0 && t.lr_gen > 0 && t.lr_disc > 0, ErrorCode::invalid_argument, "learning rates must be > 0");
  require(t.adam_beta1 >= 0 && t.adam_beta1 < 1 && t.adam_beta2 >= 0 && t.adam_beta2 < 1, ErrorCode::invalid_argument,
          "Adam betas must be in [0, 1)");
  require(t.warmup_epochs >= 0, ErrorCode::invalid_argument, "warmup_epochs must be >= 0");
  require(t.d_period_epochs >= 1 && t.d_steps_per_g_step >= 1, ErrorCode::invalid_argument,
          "d_period_epochs and d_steps_per_g_step must be >= 1");
  require(t.epochs >= 1, ErrorCode::invalid_argument, "epochs must be >= 1");
  require(t.batch_size >= 1, ErrorCode::invalid_argument, "batch_size must be >= 1");
  require(t.lambda_adv >= 0, ErrorCode::invalid_argument, "lambda_adv must be >= 0");
  require(t.gen_features >= 1 && t.disc_features_low >= 1 && t.disc_features_high >= 1 && t.disc_hidden >= 1,
          ErrorCode::invalid_argument, "network widths must be positive");
  require(t.image_size % 4 == 0, ErrorCode::invalid_argument,
          "image_size must be a multiple of 4 (two 2x2 poolings in the discriminator)");
  require(t.perceptual.kind == "vgg19" || t.perceptual.kind == "identity", ErrorCode::invalid_argument,
          "perceptual must be 'vgg19' or 'identity'");
  if (t.perceptual.kind == "vgg19") {
    require(t.perceptual.block >= 1 && t.perceptual.block <= 5, ErrorCode::invalid_argument,
            "perceptual_block must be in 1..5");
    require(t.image_size >= (1 << (t.perceptual.block - 1)), ErrorCode::invalid_argument,
            "image_size too small for the selected perceptual layer");
  }
  require(cfg.noise_sigma >= 0, ErrorCode::invalid_argument, "noise_sigma must be >= 0");
  validate(cfg.data);
  require(cfg.data.image_size == t.image_size && cfg.data.grayscale == !t.rgb, ErrorCode::invalid_argument,
          "dataset image size / color mode must match the training configuration");
}

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "sr",           "image_size",         "lr_mask",          "lr_gen",
      "lr_disc",      "adam_beta1",         "adam_beta2",       "warmup_epochs",
      "d_period_epochs", "d_steps_per_g_step", "epochs",       "batch_size",
      "lambda_adv",   "seed",               "use_gan",          "rgb",
      "gen_features", "disc_features_low",  "disc_features_high", "disc_hidden",
      "leaky_slope",  "perceptual",         "perceptual_base_width", "perceptual_block",
      "perceptual_conv", "perceptual_seed", "perceptual_weights", "dataset",
      "dataset_path", "dataset_count",      "dataset_seed",     "split_ratio",
      "max_images",   "out_dir",            "noise_sigma",      "noise_seed"};
  return keys;
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& dst) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    if constexpr (std::is_same_v<T, bool>) {
      require(it->is_boolean(), ErrorCode::invalid_argument, std::string("config key '") + key + "' must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      require(it->is_number_integer(), ErrorCode::invalid_argument,
              std::string("config key '") + key + "' must be an integer");
      if constexpr (std::is_unsigned_v<T>)
        require(it->is_number_unsigned(), ErrorCode::invalid_argument,
                std::string("config key '") + key + "' must be non-negative");
    } else if constexpr (std::is_floating_point_v<T>) {
      require(it->is_number(), ErrorCode::invalid_argument, std::string("config key '") + key + "' must be a number");
    } else {
      require(it->is_string(), ErrorCode::invalid_argument, std::string("config key '") + key + "' must be a string");
    }
    dst = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::invalid_argument, "config must be a JSON object");
  for (const auto& [k, v] : j.items())
    require(known_keys().count(k) > 0, ErrorCode::invalid_argument, "unknown config key '" + k + "'");
  ExperimentConfig c;
  auto& t = c.train;
  read(j, "sr", t.sr);
  read(j, "image_size", t.image_size);
  read(j, "lr_mask", t.lr_mask);
  read(j, "lr_gen", t.lr_gen);
  read(j, "lr_disc", t.lr_disc);
  read(j, "adam_beta1", t.adam_beta1);
  read(j, "adam_beta2", t.adam_beta2);
  read(j, "warmup_epochs", t.warmup_epochs);
  read(j, "d_period_epochs", t.d_period_epochs);
  read(j, "d_steps_per_g_step", t.d_steps_per_g_step);
  read(j, "epochs", t.epochs);
  read(j, "batch_size", t.batch_size);
  read(j, "lambda_adv", t.lambda_adv);
  read(j, "seed", t.seed);
  read(j, "use_gan", t.use_gan);
  read(j, "rgb", t.rgb);
  read(j, "gen_features", t.gen_features);
  read(j, "disc_features_low", t.disc_features_low);
  read(j, "disc_features_high", t.disc_features_high);
  read(j, "disc_hidden", t.disc_hidden);
  read(j, "leaky_slope", t.leaky_slope);
  read(j, "perceptual", t.perceptual.kind);
  read(j, "perceptual_base_width", t.perceptual.base_width);
  read(j, "perceptual_block", t.perceptual.block);
  read(j, "perceptual_conv", t.perceptual.conv);
  read(j, "perceptual_seed", t.perceptual.seed);
  read(j, "perceptual_weights", t.perceptual.weights_path);
  read(j, "dataset", c.data.source);
  read(j, "dataset_path", c.data.path);
  read(j, "dataset_count", c.data.synth_count);
  read(j, "dataset_seed", c.data.seed);
  read(j, "split_ratio", c.data.split_ratio);
  read(j, "max_images", c.data.max_images);
  read(j, "out_dir", c.out_dir);
  read(j, "noise_sigma", c.noise_sigma);
  read(j, "noise_seed", c.noise_seed);
  c.data.image_size = t.image_size;
  c.data.grayscale = !t.rgb;
  return c;
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  return {{"sr", t.sr},
          {"image_size", t.image_size},
          {"lr_mask", t.lr_mask},
          {"lr_gen", t.lr_gen},
          {"lr_disc", t.lr_disc},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"warmup_epochs", t.warmup_epochs},
          {"d_period_epochs", t.d_period_epochs},
          {"d_steps_per_g_step", t.d_steps_per_g_step},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lambda_adv", t.lambda_adv},
          {"seed", t.seed},
          {"use_gan", t.use_gan},
          {"rgb", t.rgb},
          {"gen_features", t.gen_features},
          {"disc_features_low", t.disc_features_low},
          {"disc_features_high", t.disc_features_high},
          {"disc_hidden", t.disc_hidden},
          {"leaky_slope", t.leaky_slope},
          {"perceptual", t.perceptual.kind},
          {"perceptual_base_width", t.perceptual.base_width},
          {"perceptual_block", t.perceptual.block},
          {"perceptual_conv", t.perceptual.conv},
          {"perceptual_seed", t.perceptual.seed},
          {"perceptual_weights", t.perceptual.weights_path},
          {"dataset", c.data.source},
          {"dataset_path", c.data.path},
          {"dataset_count", c.data.synth_count},
          {"dataset_seed", c.data.seed},
          {"split_ratio", c.data.split_ratio},
          {"max_images", c.data.max_images},
          {"out_dir", c.out_dir},
          {"noise_sigma", c.noise_sigma},
          {"noise_seed", c.noise_seed}};
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io, "cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, "malformed config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  require(known_keys().count(key) > 0, ErrorCode::invalid_argument, "unknown config key '" + key + "'");
  nlohmann::json j = config_to_json(cfg);
  nlohmann::json v = nlohmann::json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (v.is_discarded() || j[key].is_string()) v = value;
  j[key] = v;
  cfg = config_from_json(j);
}

std::string config_hash(const ExperimentConfig& cfg) { return hex64(fnv1a64(config_to_json(cfg).dump())); }

}  // namespace spi
