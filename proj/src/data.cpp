#include "spi/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <numeric>

#include "json.hpp"
#include "spi/error.hpp"
#include "spi/rng.hpp"

namespace spi {

void validate(const DatasetSpec& spec) {
  require(spec.source == "synthetic" || spec.source == "stl10" || spec.source == "image_dir",
          ErrorCode::invalid_argument, "unknown dataset source '" + spec.source + "'");
  require(spec.image_size >= 16, ErrorCode::invalid_argument, "image_size must be >= 16");
  require(spec.split_ratio > 0.0 && spec.split_ratio < 1.0, ErrorCode::invalid_argument,
          "split_ratio must be in (0, 1)");
  require(spec.source == "synthetic" || !spec.path.empty(), ErrorCode::invalid_argument,
          "dataset path required for source '" + spec.source + "'");
  require(spec.source != "synthetic" || spec.synth_count >= 1, ErrorCode::invalid_argument,
          "synthetic dataset needs count >= 1");
  require(spec.max_images >= 0, ErrorCode::invalid_argument, "max_images must be >= 0");
}

std::vector<Raster8> load_stl10(const std::filesystem::path& path, std::size_t max_records) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  require(!ec, ErrorCode::io, "cannot stat STL-10 file " + path.string());
  require(bytes > 0, ErrorCode::io, "STL-10 file is empty: " + path.string());
  require(bytes % kStl10RecordBytes == 0, ErrorCode::io,
          "STL-10 file size " + std::to_string(bytes) + " is not a multiple of the 27648-byte record");
  std::size_t records = bytes / kStl10RecordBytes;
  if (max_records > 0) records = std::min(records, max_records);

  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
  std::vector<Raster8> out;
  out.reserve(records);
  std::vector<std::uint8_t> rec(kStl10RecordBytes);
  constexpr std::size_t plane = kStl10Side * kStl10Side;
  for (std::size_t r = 0; r < records; ++r) {
    in.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    require(static_cast<std::size_t>(in.gcount()) == rec.size(), ErrorCode::io, "truncated STL-10 record");
    Raster8 img{kStl10Side, kStl10Side, 3, std::vector<std::uint8_t>(kStl10RecordBytes)};
    for (int ch = 0; ch < 3; ++ch)
      for (int col = 0; col < kStl10Side; ++col)
        for (int row = 0; row < kStl10Side; ++row)
          img.samples[(static_cast<std::size_t>(row) * kStl10Side + col) * 3 + ch] =
              rec[ch * plane + static_cast<std::size_t>(col) * kStl10Side + row];
    out.push_back(std::move(img));
  }
  return out;
}

namespace {

double cubic(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

struct Taps {
  int first = 0;
  std::vector<double> weights;
};

std::vector<Taps> resample_taps(int in, int out) {
  const double scale = static_cast<double>(in) / out;
  const double support = 2.0 * std::max(1.0, scale);
  const double stretch = std::max(1.0, scale);
  std::vector<Taps> taps(out);
  for (int o = 0; o < out; ++o) {
    const double center = (o + 0.5) * scale - 0.5;
    const int lo = static_cast<int>(std::floor(center - support)) + 1;
    const int hi = static_cast<int>(std::floor(center + support));
    std::vector<double> w;
    double sum = 0.0;
    for (int i = lo; i <= hi; ++i) {
      const double v = cubic((i - center) / stretch);
      w.push_back(v);
      sum += v;
    }
    for (auto& v : w) v /= sum;
    taps[o] = {lo, std::move(w)};
  }
  return taps;
}

}  // namespace

Image resize_bicubic(const Image& src, int height, int width) {
  require(src.height > 0 && src.width > 0 && height > 0 && width > 0, ErrorCode::invalid_argument,
          "resize of an empty image");
  if (src.height == height && src.width == width) return src;
  const auto tx = resample_taps(src.width, width);
  const auto ty = resample_taps(src.height, height);
  Image tmp(src.height, width, src.channels);
  for (int c = 0; c < src.channels; ++c)
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < width; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < tx[x].weights.size(); ++k) {
          const int sx = std::clamp(tx[x].first + static_cast<int>(k), 0, src.width - 1);
          s += tx[x].weights[k] * src.at(y, sx, c);
        }
        tmp.at(y, x, c) = s;
      }
  Image out(height, width, src.channels);
  for (int c = 0; c < src.channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < ty[y].weights.size(); ++k) {
          const int sy = std::clamp(ty[y].first + static_cast<int>(k), 0, src.height - 1);
          s += ty[y].weights[k] * tmp.at(sy, x, c);
        }
        out.at(y, x, c) = s;
      }
  return out;
}

Image preprocess_one(const Raster8& raw, int image_size, bool grayscale) {
  require(raw.width > 0 && raw.height > 0 && !raw.samples.empty(), ErrorCode::invalid_argument,
          "cannot preprocess an empty image");
  require(image_size > 0, ErrorCode::invalid_argument, "image_size must be positive");
  Image img = clamp_unit(resize_bicubic(from_raster(raw), image_size, image_size));
  if (img.channels == 3 && grayscale) {
    Image gray(img.height, img.width, 1);
    for (std::size_t p = 0; p < gray.size(); ++p)
      gray.pixels[p] = std::clamp(
          kLumaR * img.pixels[p] + kLumaG * img.pixels[img.plane_size() + p] + kLumaB * img.pixels[2 * img.plane_size() + p],
          0.0, 1.0);
    return gray;
  }
  if (img.channels == 1 && !grayscale) return replicate_rgb(img);
  return img;
}

std::vector<Image> preprocess(std::span<const Raster8> raw, const DatasetSpec& spec) {
  std::vector<Image> out;
  out.reserve(raw.size());
  for (const auto& r : raw) out.push_back(preprocess_one(r, spec.image_size, spec.grayscale));
  return out;
}

Split split(const std::vector<Image>& scenes, double ratio, std::uint64_t seed) {
  require(!scenes.empty(), ErrorCode::invalid_argument, "cannot split an empty dataset");
  require(ratio > 0.0 && ratio < 1.0, ErrorCode::invalid_argument, "split ratio must be in (0, 1)");
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(scenes.size()) + 1e-9));
  Split s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i < n_train) {
      s.train.push_back(scenes[order[i]]);
      s.train_index.push_back(order[i]);
    } else {
      s.val.push_back(scenes[order[i]]);
      s.val_index.push_back(order[i]);
    }
  }
  return s;
}

namespace {

enum class Shape { rect, ellipse, bar };

struct ShapeSpec {
  Shape kind;
  double cx, cy, rx, ry, angle;
  double value[3];
};

// Inside test in normalized [0,1]^2 coordinates.
bool inside(const ShapeSpec& s, double u, double v) {
  const double dx = u - s.cx;
  const double dy = v - s.cy;
  const double ca = std::cos(s.angle);
  const double sa = std::sin(s.angle);
  const double lx = ca * dx + sa * dy;
  const double ly = -sa * dx + ca * dy;
  if (s.kind == Shape::ellipse) return (lx * lx) / (s.rx * s.rx) + (ly * ly) / (s.ry * s.ry) <= 1.0;
  return std::abs(lx) <= s.rx && std::abs(ly) <= s.ry;
}

Image make_shape_image(int size, int channels, Rng& rng) {
  constexpr int kSuper = 4;
  const double base = rng.uniform(0.2, 0.8);
  double level[3];
  for (int c = 0; c < 3; ++c) level[c] = channels == 1 ? base : std::clamp(base + rng.uniform(-0.2, 0.2), 0.0, 1.0);
  const double slope = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 0.4);
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);

  const int n_shapes = 2 + static_cast<int>(rng.below(4));
  std::vector<ShapeSpec> shapes;
  for (int i = 0; i < n_shapes; ++i) {
    ShapeSpec s{};
    s.kind = static_cast<Shape>(rng.below(3));
    s.cx = rng.uniform(0.15, 0.85);
    s.cy = rng.uniform(0.15, 0.85);
    if (s.kind == Shape::bar) {
      s.rx = rng.uniform(0.2, 0.45);
      s.ry = rng.uniform(0.02, 0.06);
    } else {
      s.rx = rng.uniform(0.05, 0.22);
      s.ry = rng.uniform(0.05, 0.22);
    }
    s.angle = s.kind == Shape::rect && rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.0, std::numbers::pi);
    const double v = rng.uniform();
    for (int c = 0; c < 3; ++c) s.value[c] = channels == 1 ? v : rng.uniform();
    shapes.push_back(s);
  }

  Image img(size, size, channels);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double acc[3] = {0.0, 0.0, 0.0};
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double u = (x + (sx + 0.5) / kSuper) / size;
          const double v = (y + (sy + 0.5) / kSuper) / size;
          const double ramp = slope * (std::cos(theta) * (u - 0.5) + std::sin(theta) * (v - 0.5));
          double px[3];
          for (int c = 0; c < channels; ++c) px[c] = level[c] + ramp;
          for (const auto& s : shapes)
            if (inside(s, u, v))
              for (int c = 0; c < channels; ++c) px[c] = s.value[c];
          for (int c = 0; c < channels; ++c) acc[c] += px[c];
        }
      for (int c = 0; c < channels; ++c) {
        const double v = std::clamp(acc[c] / (kSuper * kSuper), 0.0, 1.0);
        img.at(y, x, c) = std::floor(v * 255.0 + 0.5) / 255.0;
      }
    }
  return img;
}

}  // namespace

std::vector<Image> synth_shapes(int count, int size, std::uint64_t seed, int channels) {
  require(count >= 1, ErrorCode::invalid_argument, "synthetic count must be >= 1");
  require(size >= 16, ErrorCode::invalid_argument, "synthetic image size must be >= 16");
  require(channels == 1 || channels == 3, ErrorCode::invalid_argument, "synthetic channels must be 1 or 3");
  std::vector<Image> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    out.push_back(make_shape_image(size, channels, rng));
  }
  return out;
}

std::vector<NamedImage> load_image_dir(const std::filesystem::path& dir, int image_size, bool grayscale) {
  require(std::filesystem::is_directory(dir), ErrorCode::io, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") files.push_back(e.path());
  }
  require(!files.empty(), ErrorCode::invalid_argument, "no PGM/PPM images in " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<NamedImage> out;
  for (const auto& f : files) out.push_back({f.filename().string(), preprocess_one(read_netpbm(f), image_size, grayscale)});
  return out;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<Image>& images, int size, std::uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec && std::filesystem::is_directory(dir), ErrorCode::io, "cannot create directory " + dir.string());
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.%s", i, images[i].channels == 1 ? "pgm" : "ppm");
    write_netpbm(dir / name, to_raster(images[i]));
    files.push_back(name);
  }
  const nlohmann::json manifest = {{"count", images.size()},
                                   {"size", size},
                                   {"seed", seed},
                                   {"channels", images.empty() ? 1 : images[0].channels},
                                   {"generator", "synth_shapes"},
                                   {"files", files}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

std::vector<Image> load_dataset(const DatasetSpec& spec) {
  validate(spec);
  const int channels = spec.grayscale ? 1 : 3;
  if (spec.source == "synthetic") {
    const char* cache_root = std::getenv("SPI_CACHE_DIR");
    if (!cache_root || !*cache_root) return synth_shapes(spec.synth_count, spec.image_size, spec.seed, channels);
    char key[96];
    std::snprintf(key, sizeof key, "synth_%d_%d_%llu_c%d", spec.synth_count, spec.image_size,
                  static_cast<unsigned long long>(spec.seed), channels);
    const auto dir = std::filesystem::path(cache_root) / key;
    if (std::filesystem::exists(dir / "manifest.json")) {
      std::vector<Image> out;
      for (auto& n : load_image_dir(dir, spec.image_size, spec.grayscale)) out.push_back(std::move(n.image));
      if (out.size() == static_cast<std::size_t>(spec.synth_count)) return out;
    }
    auto images = synth_shapes(spec.synth_count, spec.image_size, spec.seed, channels);
    write_dataset(dir, images, spec.image_size, spec.seed);
    return images;
  }
  if (spec.source == "stl10") {
    const auto raw = load_stl10(spec.path, static_cast<std::size_t>(spec.max_images));
    return preprocess(raw, spec);
  }
  std::vector<Image> out;
  for (auto& n : load_image_dir(spec.path, spec.image_size, spec.grayscale)) {
    out.push_back(std::move(n.image));
    if (spec.max_images > 0 && out.size() >= static_cast<std::size_t>(spec.max_images)) break;
  }
  return out;
}

}  // namespace spi
