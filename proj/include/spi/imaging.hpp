#pragma once

// Single-pixel forward model, binary sampling masks, Walsh-Hadamard patterns
// and the non-learned reconstructions used as baselines.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spi/image.hpp"

namespace spi {

// M binary masks of shape height x width, entries exactly -1 or +1, stored
// mask-major then row-major. Row m of the measurement matrix is mask(m).
struct MaskSet {
  int count = 0;
  int height = 0;
  int width = 0;
  std::vector<std::int8_t> entries;

  MaskSet() = default;
  MaskSet(int m, int h, int w) : count(m), height(h), width(w), entries(static_cast<std::size_t>(m) * h * w, 1) {}

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  std::span<const std::int8_t> mask(int m) const { return {entries.data() + m * pixels(), pixels()}; }
  std::span<std::int8_t> mask(int m) { return {entries.data() + m * pixels(), pixels()}; }
};

struct NoiseConfig {
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

struct MeasurementVector {
  std::vector<double> values;
  double noise_sigma = 0.0;
};

// floor(sr * width * height) with sr in (0, 1]; throws when the result is < 1.
int sampling_count(double sr, int width, int height);

// Sign rule: w >= 0 -> +1, otherwise -1. Rejects non-finite weights.
std::vector<std::int8_t> binarize(std::span<const double> weights);
MaskSet binarize_masks(std::span<const double> weights, int count, int height, int width);

// Throws unless every entry is exactly -1 or +1.
void validate_mask_set(const MaskSet& masks);

// values[m] = sum_{x,y} mask_m(x,y) * scene(x,y) + n_m, n_m ~ N(0, sigma^2)
// drawn from the seeded stream. The +1 and -1 pixel sets are summed
// separately in raster order and subtracted, mirroring how a (-1,+1) reading
// is formed from two on/off patterns; this makes the decomposition identity
// exact in floating point.
MeasurementVector forward_measure(const Image& scene, const MaskSet& masks, const NoiseConfig& noise = {});

// Noiseless reading under a single on/off (0/1) pattern, summed in raster order.
double measure_pattern(const Image& scene, std::span<const std::uint8_t> pattern);

struct MaskPair {
  std::vector<std::uint8_t> pos;  // (mask + 1) / 2
  std::vector<std::uint8_t> neg;  // (1 - mask) / 2
};
MaskPair decompose_mask(std::span<const std::int8_t> mask);

enum class HadamardOrdering { natural, sequency };
std::string to_string(HadamardOrdering ordering);
HadamardOrdering parse_ordering(const std::string& name);

bool is_power_of_two(long long n);

// Natural Sylvester row index for each sequency position.
std::vector<int> sequency_permutation(int order);
int sign_changes(std::span<const std::int8_t> row);

// First `count` rows of H_order in the requested ordering. Masks are
// sqrt(order) x sqrt(order) when order is an even power of two, else 1 x order.
MaskSet walsh_hadamard_masks(int order, int count, HadamardOrdering ordering);

// In-place unnormalized fast Walsh-Hadamard transform (natural order).
void fwht(std::span<double> data);

// O = H^T I / n for a complete set of Hadamard readings.
Image hadamard_reconstruct_full(const MeasurementVector& measurements, int order,
                                HadamardOrdering ordering = HadamardOrdering::sequency);

struct ClassicalOptions {
  double reg_weight = 0.0;
  int max_iters = 1000;
  double tol = 1e-10;
  bool clamp = false;
};

struct ClassicalResult {
  Image scene;
  int iterations = 0;
  double relative_residual = 0.0;
};

// argmin ||I - A O||^2 + reg_weight ||O||^2 by conjugate gradient on the
// normal equations (A^T A + reg_weight I) O = A^T I. Throws
// ErrorCode::not_converged if tol is not reached within max_iters.
ClassicalResult classical_reconstruct(const MaskSet& masks, const MeasurementVector& measurements,
                                      const ClassicalOptions& options);

// DMD export: mask_NNNN_pos.pgm / mask_NNNN_neg.pgm pairs (0 -> 0, 1 -> 255)
// plus manifest.json.
struct MaskManifest {
  double sr = 1.0;
  std::string ordering = "learned";
  std::uint64_t seed = 0;
};

std::vector<std::filesystem::path> export_masks(const MaskSet& masks, const MaskManifest& meta,
                                                const std::filesystem::path& dir);
// Reads an exported directory back as pos - neg.
MaskSet import_masks(const std::filesystem::path& dir);

}  // namespace spi
