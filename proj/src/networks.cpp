#include "spi/networks.hpp"

#include <algorithm>
#include <cmath>
#include <typeinfo>

#include <Eigen/Core>

#include "spi/error.hpp"
#include "spi/rng.hpp"

namespace spi {

namespace {
constexpr double kHeadGain = 0.1;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}

std::vector<double> ste_gradient(std::span<const double> upstream, std::span<const double> weights) {
  require(upstream.size() == weights.size(), ErrorCode::shape_mismatch,
          "ste_gradient: upstream and weights differ in size");
  std::vector<double> out(upstream.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(weights[i]) <= 1.0 ? upstream[i] : 0.0;
  return out;
}

// ---------------------------------------------------------------- MaskLayer

MaskLayer::MaskLayer(int count, int height, int width) : count_(count), height_(height), width_(width) {
  require(count >= 1, ErrorCode::invalid_argument, "mask layer needs at least one mask");
  require(height >= 1 && width >= 1, ErrorCode::invalid_argument, "mask size must be positive");
  const std::size_t n = static_cast<std::size_t>(count) * height * width;
  omega_ = {"mask.omega", nn::Storage(n, 0.0), nn::Storage(n, 0.0)};
}

void MaskLayer::init(std::uint64_t seed) {
  Rng rng(seed);
  for (auto& v : omega_.value) v = rng.uniform(-0.1, 0.1);
}

MaskSet MaskLayer::masks() const { return binarize_masks(omega_.value, count_, height_, width_); }

nn::Tensor MaskLayer::forward(const nn::Tensor& scenes) const {
  const std::size_t k = static_cast<std::size_t>(height_) * width_;
  require(scenes.h == height_ && scenes.w == width_, ErrorCode::shape_mismatch,
          "mask layer: scene size differs from mask size");
  const auto signs = binarize(omega_.value);
  RowMat a(count_, static_cast<Eigen::Index>(k));
  std::transform(signs.begin(), signs.end(), a.data(), [](std::int8_t s) { return static_cast<double>(s); });
  const auto rows = static_cast<Eigen::Index>(scenes.n) * scenes.c;
  Eigen::Map<const RowMat> x(scenes.data.data(), rows, static_cast<Eigen::Index>(k));
  nn::Tensor y(scenes.n, scenes.c * count_, 1, 1);
  Eigen::Map<RowMat> ym(y.data.data(), rows, count_);
  ym.noalias() = x * a.transpose();
  return y;
}

void MaskLayer::backward(const nn::Tensor& grad, const nn::Tensor& scenes) {
  const std::size_t k = static_cast<std::size_t>(height_) * width_;
  const auto rows = static_cast<Eigen::Index>(scenes.n) * scenes.c;
  require(grad.size() == static_cast<std::size_t>(rows) * count_, ErrorCode::shape_mismatch,
          "mask layer: gradient does not match measurement shape");
  Eigen::Map<const RowMat> x(scenes.data.data(), rows, static_cast<Eigen::Index>(k));
  Eigen::Map<const RowMat> g(grad.data.data(), rows, count_);
  RowMat da = g.transpose() * x;
  const auto clipped = ste_gradient({da.data(), static_cast<std::size_t>(da.size())}, omega_.value);
  for (std::size_t i = 0; i < clipped.size(); ++i) omega_.grad[i] += clipped[i];
}

// ---------------------------------------------------------------- Generator

Generator::Generator(const GeneratorConfig& cfg) : cfg_(cfg) {
  require(cfg.measurements >= 1 && cfg.height >= 1 && cfg.width >= 1 && cfg.features >= 1, ErrorCode::invalid_argument,
          "generator sizes must be positive");
  require(cfg.channels == 1 || cfg.channels == 3, ErrorCode::invalid_argument, "generator channels must be 1 or 3");
  const int c = cfg.channels;
  const int f = cfg.features;
  net_.emplace<nn::Linear>("gen.fc", c * cfg.measurements, c * cfg.height * cfg.width);
  net_.emplace<nn::Reshape>(c, cfg.height, cfg.width);
  int in = c;
  for (int b = 1; b <= 5; ++b) {
    const std::string name = "gen.block" + std::to_string(b);
    net_.emplace<nn::Conv3x3>(name + ".conv", in, f);
    net_.emplace<nn::BatchNorm>(name + ".bn", f);
    net_.emplace<nn::Relu>();
    in = f;
  }
  net_.emplace<nn::Conv3x3>("gen.head", f, c);
}

void Generator::init(std::uint64_t seed) {
  Rng rng(seed);
  net_.init(rng);
  // A quiet head keeps the first reconstructions near zero instead of
  // unit-variance noise.
  auto& head = static_cast<nn::Conv3x3&>(net_.at(net_.size() - 1));
  head.init_scaled(rng, kHeadGain);
}

nn::Tensor Generator::forward(const nn::Tensor& measurements, nn::Mode mode, nn::Tape* tape) const {
  require(static_cast<int>(measurements.sample_size()) == cfg_.channels * cfg_.measurements, ErrorCode::shape_mismatch,
          "generator expects " + std::to_string(cfg_.channels * cfg_.measurements) + " measurements per sample, got " +
              std::to_string(measurements.sample_size()));
  return net_.forward(measurements, mode, tape);
}

nn::Tensor Generator::infer(const nn::Tensor& measurements) const {
  auto out = forward(measurements, nn::Mode::eval, nullptr);
  for (auto& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

std::vector<nn::Param*> Generator::params() {
  std::vector<nn::Param*> out;
  net_.collect_params(out);
  return out;
}

std::vector<nn::Buffer*> Generator::buffers() {
  std::vector<nn::Buffer*> out;
  net_.collect_buffers(out);
  return out;
}

std::size_t Generator::expected_parameter_count(const GeneratorConfig& cfg) {
  const std::size_t c = cfg.channels;
  const std::size_t f = cfg.features;
  const std::size_t pixels = c * cfg.height * cfg.width;
  std::size_t n = c * cfg.measurements * pixels + pixels;  // affine
  n += c * f * 9 + f;                                       // block 1
  n += 4 * (f * f * 9 + f);                                 // blocks 2-5
  n += 5 * 2 * f;                                           // normalization scale/shift
  n += f * c * 9 + c;                                       // head
  return n;
}

// ---------------------------------------------------------------- Discriminator

Discriminator::Discriminator(const DiscriminatorConfig& cfg) : cfg_(cfg) {
  require(cfg.height >= 4 && cfg.width >= 4 && cfg.height % 4 == 0 && cfg.width % 4 == 0, ErrorCode::invalid_argument,
          "discriminator input size must be a positive multiple of 4");
  require(cfg.features_low >= 1 && cfg.features_high >= 1 && cfg.hidden >= 1, ErrorCode::invalid_argument,
          "discriminator widths must be positive");
  int in = cfg.channels;
  for (int l = 1; l <= 9; ++l) {
    const int out = l <= 5 ? cfg.features_low : cfg.features_high;
    const std::string name = "disc.conv" + std::to_string(l);
    net_.emplace<nn::Conv3x3>(name, in, out);
    net_.emplace<nn::BatchNorm>(name + ".bn", out);
    net_.emplace<nn::LeakyRelu>(cfg.slope);
    if (l == 5 || l == 9) net_.emplace<nn::MaxPool2>();
    in = out;
  }
  net_.emplace<nn::Flatten>();
  net_.emplace<nn::Linear>("disc.fc1", cfg.features_high * (cfg.height / 4) * (cfg.width / 4), cfg.hidden);
  net_.emplace<nn::LeakyRelu>(cfg.slope);
  net_.emplace<nn::Linear>("disc.fc2", cfg.hidden, 1);
  net_.emplace<nn::Sigmoid>();
}

void Discriminator::init(std::uint64_t seed) {
  Rng rng(seed);
  net_.init(rng);
  // Start the score near 0.5.
  auto& last = static_cast<nn::Linear&>(net_.at(net_.size() - 2));
  last.init_scaled(rng, 0.1);
}

nn::Tensor Discriminator::forward(const nn::Tensor& images, nn::Mode mode, nn::Tape* tape) const {
  require(images.c == cfg_.channels && images.h == cfg_.height && images.w == cfg_.width, ErrorCode::shape_mismatch,
          "discriminator input shape differs from its configuration");
  return net_.forward(images, mode, tape);
}

std::vector<nn::Param*> Discriminator::params() {
  std::vector<nn::Param*> out;
  net_.collect_params(out);
  return out;
}

std::vector<nn::Buffer*> Discriminator::buffers() {
  std::vector<nn::Buffer*> out;
  net_.collect_buffers(out);
  return out;
}

int Discriminator::conv_layers() const {
  int n = 0;
  for (std::size_t i = 0; i < net_.size(); ++i) n += typeid(net_.at(i)) == typeid(nn::Conv3x3);
  return n;
}

int Discriminator::pool_layers() const {
  int n = 0;
  for (std::size_t i = 0; i < net_.size(); ++i) n += typeid(net_.at(i)) == typeid(nn::MaxPool2);
  return n;
}

int Discriminator::affine_layers() const {
  int n = 0;
  for (std::size_t i = 0; i < net_.size(); ++i) n += typeid(net_.at(i)) == typeid(nn::Linear);
  return n;
}

std::vector<int> Discriminator::pool_positions() const {
  std::vector<int> out;
  int convs = 0;
  for (std::size_t i = 0; i < net_.size(); ++i) {
    if (typeid(net_.at(i)) == typeid(nn::Conv3x3)) ++convs;
    if (typeid(net_.at(i)) == typeid(nn::MaxPool2)) out.push_back(convs);
  }
  return out;
}

std::size_t Discriminator::expected_parameter_count(const DiscriminatorConfig& cfg) {
  const std::size_t c = cfg.channels;
  const std::size_t lo = cfg.features_low;
  const std::size_t hi = cfg.features_high;
  std::size_t n = c * lo * 9 + lo;
  n += 4 * (lo * lo * 9 + lo);
  n += lo * hi * 9 + hi;
  n += 3 * (hi * hi * 9 + hi);
  n += 5 * 2 * lo + 4 * 2 * hi;
  const std::size_t flat = hi * (cfg.height / 4) * (cfg.width / 4);
  n += flat * cfg.hidden + cfg.hidden;
  n += cfg.hidden + 1;
  return n;
}

}  // namespace spi
