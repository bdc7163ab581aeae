#pragma once

// Training losses (content, perceptual, adversarial) and the PSNR / SSIM
// evaluation metrics.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "spi/image.hpp"
#include "spi/nn.hpp"

namespace spi {

struct LossWeights {
  double lambda_adv = 0.05;
};

struct PerceptualConfig {
  std::string kind = "vgg19";  // "vgg19" or "identity"
  int base_width = 64;         // block widths are base * {1, 2, 4, 8, 8}
  int block = 5;               // phi_{block,conv}: activation after conv `conv` of block `block`
  int conv = 4;
  std::uint64_t seed = 0x5647473139ull;
  std::string weights_path;  // optional float32 weight file; empty -> untrained frozen weights
};

// "identity" or e.g. "vgg19:relu5_4:base64:untrained-frozen".
std::string describe_perceptual(const PerceptualConfig& cfg);

// Frozen feature network phi used by the perceptual loss. Grayscale inputs are
// replicated to three channels before extraction.
class PerceptualExtractor {
 public:
  static PerceptualExtractor identity();
  static PerceptualExtractor vgg19(const PerceptualConfig& cfg);
  static PerceptualExtractor from_config(const PerceptualConfig& cfg);

  PerceptualExtractor(PerceptualExtractor&&) = default;
  PerceptualExtractor& operator=(PerceptualExtractor&&) = default;

  // (B, 1 or 3, H, W) -> feature maps (B, F, H_ij, W_ij)
  nn::Tensor features(const nn::Tensor& images, nn::Tape* tape) const;
  // Gradient w.r.t. the (B, C, H, W) input given d(loss)/d(features).
  nn::Tensor backward(const nn::Tensor& grad_features, const nn::Tape& tape, int input_channels);

  bool is_identity() const { return identity_; }
  bool pretrained() const { return pretrained_; }
  std::string describe() const;
  // Smallest input side for which the selected layer has non-empty maps.
  int min_input_size() const { return 1 << pools_; }

 private:
  PerceptualExtractor() = default;
  bool identity_ = true;
  bool pretrained_ = false;
  int pools_ = 0;
  PerceptualConfig cfg_;
  nn::Sequential net_;
};

double mse_loss(const Image& truth, const Image& recon);
double perceptual_loss(const PerceptualExtractor& extractor, const Image& truth, const Image& recon);
// mean over the batch of 0.5 * (score - 1)^2
double adversarial_loss_g(std::span<const double> scores);
// 0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2)
double discriminator_loss(std::span<const double> real_scores, std::span<const double> fake_scores);
double total_loss(double mse, double perceptual, double adversarial, const LossWeights& weights);

// Batched forms with gradients w.r.t. the reconstruction / scores, as used by
// the trainer. Losses are batch means of the per-image definitions above.
double mse_loss_batch(const nn::Tensor& truth, const nn::Tensor& recon, nn::Tensor* grad);
double perceptual_loss_batch(PerceptualExtractor& extractor, const nn::Tensor& truth, const nn::Tensor& recon,
                             nn::Tensor* grad);
double adversarial_loss_g_grad(std::span<const double> scores, std::span<double> grad);
double discriminator_loss_grad(std::span<const double> real_scores, std::span<const double> fake_scores,
                               std::span<double> grad_real, std::span<double> grad_fake);

inline constexpr double kPsnrCapDb = 100.0;

// 10 log10(peak^2 / MSE), capped at kPsnrCapDb.
double psnr(const Image& truth, const Image& recon, double peak = 1.0);

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
// C2 = 0.03^2, valid-region windows; RGB averages the channels.
double ssim(const Image& truth, const Image& recon);

struct ImageMetrics {
  std::string id;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricsReport {
  std::vector<ImageMetrics> images;
  double mean_psnr_db = 0.0;
  double mean_ssim = 0.0;
  double sr = 0.0;
  std::string config_hash;
  std::string dataset;
  std::uint64_t seed = 0;
  std::string perceptual;

  void aggregate();
  nlohmann::json to_json() const;
  std::string table() const;
};

}  // namespace spi
