#pragma once

// The three trainable parts of the reconstruction pipeline: the binary
// sampling-mask layer, the generator G(I) and the discriminator D(x).

#include <cstdint>
#include <span>
#include <vector>

#include "spi/imaging.hpp"
#include "spi/nn.hpp"

namespace spi {

// Straight-through estimator for the sign binarization with a hard clip:
// upstream passes where |w| <= 1, zero elsewhere.
std::vector<double> ste_gradient(std::span<const double> upstream, std::span<const double> weights);

// M x (H*W) real weights whose signs are the live sampling masks.
class MaskLayer {
 public:
  MaskLayer(int count, int height, int width);

  // i.i.d. uniform on [-0.1, 0.1].
  void init(std::uint64_t seed);

  int count() const { return count_; }
  int height() const { return height_; }
  int width() const { return width_; }
  MaskSet masks() const;

  // scenes (B, C, H, W) -> measurements (B, C*M, 1, 1); one M-block per
  // channel, channel order preserved. Noiseless.
  nn::Tensor forward(const nn::Tensor& scenes) const;
  // Accumulates d(loss)/d(omega) through the clipped straight-through rule.
  void backward(const nn::Tensor& grad_measurements, const nn::Tensor& scenes);

  nn::Param& weights() { return omega_; }
  const nn::Param& weights() const { return omega_; }

 private:
  int count_;
  int height_;
  int width_;
  nn::Param omega_;
};

struct GeneratorConfig {
  int measurements = 0;  // per channel
  int height = 32;
  int width = 32;
  int channels = 1;
  int features = 64;
};

// Affine map (C*M -> C*H*W) reshaped to an image, five [conv3x3, batch
// norm, ReLU] blocks and a linear 3x3 convolution head.
class Generator {
 public:
  explicit Generator(const GeneratorConfig& cfg);

  void init(std::uint64_t seed);
  const GeneratorConfig& config() const { return cfg_; }

  // Raw (unclamped) output, (B, C, H, W).
  nn::Tensor forward(const nn::Tensor& measurements, nn::Mode mode, nn::Tape* tape) const;
  nn::Tensor backward(const nn::Tensor& grad_out, const nn::Tape& tape) { return net_.backward(grad_out, tape); }
  void commit(const nn::Tape& tape) { net_.commit(tape); }
  // Evaluation mode, clamped to [0, 1].
  nn::Tensor infer(const nn::Tensor& measurements) const;

  std::vector<nn::Param*> params();
  std::vector<nn::Buffer*> buffers();
  int weight_bearing_layers() const { return net_.weight_bearing_layers(); }
  nn::Linear& input_layer() { return static_cast<nn::Linear&>(net_.at(0)); }

  static std::size_t expected_parameter_count(const GeneratorConfig& cfg);

 private:
  GeneratorConfig cfg_;
  nn::Sequential net_;
};

struct DiscriminatorConfig {
  int height = 32;
  int width = 32;
  int channels = 1;
  int features_low = 32;   // conv layers 1-5
  int features_high = 64;  // conv layers 6-9
  int hidden = 1024;
  double slope = 0.2;
};

// Nine [conv3x3, batch norm, leaky ReLU] layers with max pooling after the
// fifth and ninth, then two affine layers and a sigmoid.
class Discriminator {
 public:
  explicit Discriminator(const DiscriminatorConfig& cfg);

  void init(std::uint64_t seed);
  const DiscriminatorConfig& config() const { return cfg_; }

  // (B, C, H, W) -> (B, 1, 1, 1), every score in (0, 1).
  nn::Tensor forward(const nn::Tensor& images, nn::Mode mode, nn::Tape* tape) const;
  nn::Tensor backward(const nn::Tensor& grad_out, const nn::Tape& tape) { return net_.backward(grad_out, tape); }
  void commit(const nn::Tape& tape) { net_.commit(tape); }

  std::vector<nn::Param*> params();
  std::vector<nn::Buffer*> buffers();
  int conv_layers() const;
  int pool_layers() const;
  int affine_layers() const;
  // 1-based conv indices that are immediately followed (after BN and activation) by pooling.
  std::vector<int> pool_positions() const;

  static std::size_t expected_parameter_count(const DiscriminatorConfig& cfg);

 private:
  DiscriminatorConfig cfg_;
  nn::Sequential net_;
};

}  // namespace spi
