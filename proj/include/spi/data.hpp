#pragma once

// Dataset ingestion and preprocessing: STL-10 binary files, user image
// directories and the seeded synthetic-shapes set.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spi/image.hpp"

namespace spi {

inline constexpr int kStl10Side = 96;
inline constexpr std::size_t kStl10RecordBytes = 96 * 96 * 3;  // 27648

struct DatasetSpec {
  std::string source = "synthetic";  // synthetic | stl10 | image_dir
  std::string path;
  int image_size = 128;
  bool grayscale = true;
  double split_ratio = 0.9;
  std::uint64_t seed = 0;
  int synth_count = 500;
  int max_images = 0;  // 0 = all
};

void validate(const DatasetSpec& spec);

// Decodes STL-10 records: three 96x96 channel planes per record, each stored
// column-major. max_records = 0 reads the whole file.
std::vector<Raster8> load_stl10(const std::filesystem::path& path, std::size_t max_records = 0);

// Antialiased separable bicubic (Keys, a = -0.5) resampling; the kernel
// support widens when downscaling.
Image resize_bicubic(const Image& src, int height, int width);

inline constexpr double kLumaR = 0.299;
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;

// 8-bit raster -> [0,1] scene of image_size x image_size, grayscale via luma
// weights unless grayscale is false.
Image preprocess_one(const Raster8& raw, int image_size, bool grayscale);
std::vector<Image> preprocess(std::span<const Raster8> raw, const DatasetSpec& spec);

struct Split {
  std::vector<Image> train;
  std::vector<Image> val;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> val_index;
};

// Seeded shuffle, then the first floor(ratio * N) go to training.
Split split(const std::vector<Image>& scenes, double ratio, std::uint64_t seed);

// Seeded compositions of 2-5 antialiased rectangles, ellipses and bars on a
// graded background, quantized to 8-bit levels. Image i depends only on
// (seed, i, size, channels).
std::vector<Image> synth_shapes(int count, int size, std::uint64_t seed, int channels = 1);

struct NamedImage {
  std::string id;
  Image image;
};

// Every .pgm/.ppm/.pnm in `dir`, sorted by file name, preprocessed.
std::vector<NamedImage> load_image_dir(const std::filesystem::path& dir, int image_size, bool grayscale);

// img_NNNNN.pgm (or .ppm) files plus manifest.json.
void write_dataset(const std::filesystem::path& dir, const std::vector<Image>& images, int size, std::uint64_t seed);

// Full ingestion for a DatasetSpec. Synthetic sets are cached under
// $SPI_CACHE_DIR when that variable is set.
std::vector<Image> load_dataset(const DatasetSpec& spec);

}  // namespace spi
