#pragma once

// Joint optimization of the mask layer, generator and discriminator, plus
// checkpoint-based inference and evaluation.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "spi/checkpoint.hpp"
#include "spi/config.hpp"
#include "spi/data.hpp"
#include "spi/imaging.hpp"
#include "spi/losses.hpp"
#include "spi/networks.hpp"

namespace spi {

// Mask layer, generator and (optionally) discriminator built from a config.
struct Model {
  Model(const TrainConfig& cfg, bool with_discriminator);

  MaskLayer mask;
  Generator gen;
  std::optional<Discriminator> disc;

  void init(std::uint64_t seed);
  void store(Checkpoint& ckpt) const;
  void restore(const Checkpoint& ckpt);
};

GeneratorConfig generator_config(const TrainConfig& cfg);
DiscriminatorConfig discriminator_config(const TrainConfig& cfg);

struct LossComponents {
  double mse = 0.0;
  double vgg = 0.0;
  double adv = 0.0;
  double total = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double mse = 0.0;
  double vgg = 0.0;
  double adv = 0.0;
  double total = 0.0;
  double d_loss = 0.0;
  double val_psnr = 0.0;
  long long d_updates = 0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  Checkpoint last;
  Checkpoint best;
  std::vector<EpochRecord> history;
  double best_val_psnr = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

// (B, C, H, W) batch from images[indices].
nn::Tensor stack_images(const std::vector<Image>& images, std::span<const std::size_t> indices);
nn::Tensor stack_images(const std::vector<Image>& images);
Image tensor_image(const nn::Tensor& t, int sample);

class Trainer {
 public:
  explicit Trainer(const ExperimentConfig& cfg);

  const ExperimentConfig& config() const { return cfg_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }

  // 1-based epoch that the next steps belong to.
  void set_epoch(int epoch) { epoch_ = epoch; }
  int epoch() const { return epoch_; }
  bool adversarial_active() const;
  bool discriminator_active() const;
  long long discriminator_updates() const { return d_updates_; }

  // One Adam step on the mask weights (through the straight-through rule) and
  // the generator. The adversarial term enters only after warm-up.
  LossComponents generator_step(const nn::Tensor& scenes);
  // Raw generator output of the last generator_step.
  const nn::Tensor& last_fake() const { return last_fake_; }
  // One Adam step on the discriminator; the generator and masks are untouched.
  double discriminator_step(const nn::Tensor& real, const nn::Tensor& fake);
  double last_discriminator_grad_norm() const { return last_d_grad_norm_; }

  double validation_psnr(const std::vector<Image>& val) const;

  TrainResult train(const std::vector<Image>& train, const std::vector<Image>& val,
                    const std::function<void(const EpochRecord&)>& on_epoch = {});

  Checkpoint checkpoint(const std::vector<EpochRecord>& history = {}) const;
  // Parameters, optimizer moments and counters from a checkpoint written by
  // a trainer with the same config.
  void restore(const Checkpoint& ckpt);

 private:
  ExperimentConfig cfg_;
  Model model_;
  PerceptualExtractor extractor_;
  nn::Adam opt_mask_;
  nn::Adam opt_gen_;
  nn::Adam opt_disc_;
  int epoch_ = 1;
  long long d_updates_ = 0;
  nn::Tensor last_fake_;
  double last_d_grad_norm_ = 0.0;
};

// Per-channel forward_measure with shared masks, concatenated R, G, B.
// Channel c draws its noise from mix_seed(noise.seed, c).
MeasurementVector rgb_measure_concat(const Image& scene, const MaskSet& masks, const NoiseConfig& noise);

struct Reconstruction {
  Image scene;
  double latency_ms = 0.0;
};

// Inference from a checkpoint: generator in evaluation mode, output clamped.
class Reconstructor {
 public:
  explicit Reconstructor(const Checkpoint& ckpt);

  const ExperimentConfig& config() const { return cfg_; }
  const MaskSet& masks() const { return masks_; }
  int measurements() const { return masks_.count; }
  int channels() const { return cfg_.train.channels(); }
  int image_size() const { return cfg_.train.image_size; }

  MeasurementVector measure(const Image& scene, const NoiseConfig& noise) const;
  Reconstruction reconstruct(const MeasurementVector& measurements) const;
  // measure -> reconstruct -> PSNR/SSIM per image. Image i uses noise seed
  // mix_seed(noise.seed, i). Latency is kept out of the report so that
  // reports are reproducible byte for byte.
  MetricsReport evaluate(const std::vector<NamedImage>& images, const NoiseConfig& noise, const std::string& dataset,
                         double* mean_latency_ms = nullptr) const;

 private:
  ExperimentConfig cfg_;
  std::string config_hash_;
  std::string perceptual_;
  Model model_;
  MaskSet masks_;
};

// Grayscale previews: learned mask grid and loss/PSNR curves.
Raster8 mask_preview(const MaskSet& masks, int max_masks = 16, int scale = 4);
Raster8 plot_curves(const std::vector<std::vector<double>>& series, int width = 480, int height = 240);

}  // namespace spi
