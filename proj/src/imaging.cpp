#include "spi/imaging.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "spi/error.hpp"
#include "spi/rng.hpp"

namespace spi {

int sampling_count(double sr, int width, int height) {
  require(std::isfinite(sr) && sr > 0.0 && sr <= 1.0, ErrorCode::invalid_argument,
          "invalid sampling rate " + std::to_string(sr) + " (must be in (0, 1])");
  require(width > 0 && height > 0, ErrorCode::invalid_argument, "image dimensions must be positive");
  const double k = static_cast<double>(width) * height;
  // Tolerate representation error such as 0.3 * 10 = 2.9999999999999996.
  const auto m = static_cast<long long>(std::floor(sr * k + 1e-9));
  require(m >= 1, ErrorCode::invalid_argument, "sampling rate yields no measurements for this image size");
  return static_cast<int>(std::min<long long>(m, static_cast<long long>(k)));
}

std::vector<std::int8_t> binarize(std::span<const double> weights) {
  std::vector<std::int8_t> out(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    require(std::isfinite(weights[i]), ErrorCode::numerical, "binarize: non-finite weight");
    out[i] = weights[i] >= 0.0 ? 1 : -1;
  }
  return out;
}

MaskSet binarize_masks(std::span<const double> weights, int count, int height, int width) {
  require(weights.size() == static_cast<std::size_t>(count) * height * width, ErrorCode::shape_mismatch,
          "binarize_masks: weight count does not match M x H x W");
  MaskSet set;
  set.count = count;
  set.height = height;
  set.width = width;
  set.entries = binarize(weights);
  return set;
}

void validate_mask_set(const MaskSet& masks) {
  require(masks.count >= 1 && masks.height >= 1 && masks.width >= 1, ErrorCode::invalid_argument,
          "mask set must be non-empty");
  require(masks.entries.size() == static_cast<std::size_t>(masks.count) * masks.pixels(), ErrorCode::shape_mismatch,
          "mask set entry count does not match its shape");
  for (auto e : masks.entries)
    require(e == 1 || e == -1, ErrorCode::invalid_argument, "mask entries must be exactly -1 or +1");
}

MeasurementVector forward_measure(const Image& scene, const MaskSet& masks, const NoiseConfig& noise) {
  require(scene.channels == 1, ErrorCode::shape_mismatch,
          "forward_measure expects a grayscale scene (use rgb_measure_concat for RGB)");
  require(scene.height == masks.height && scene.width == masks.width, ErrorCode::shape_mismatch,
          "scene and masks differ in height x width");
  require(noise.sigma >= 0.0 && std::isfinite(noise.sigma), ErrorCode::invalid_argument,
          "noise sigma must be finite and >= 0");
  validate_mask_set(masks);

  MeasurementVector out;
  out.noise_sigma = noise.sigma;
  out.values.resize(masks.count);
  const std::size_t k = masks.pixels();
  for (int m = 0; m < masks.count; ++m) {
    auto row = masks.mask(m);
    double plus = 0.0;
    double minus = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      if (row[p] > 0)
        plus += scene.pixels[p];
      else
        minus += scene.pixels[p];
    }
    out.values[m] = plus - minus;
  }
  if (noise.sigma > 0.0) {
    Rng rng(noise.seed);
    for (auto& v : out.values) v += noise.sigma * rng.normal();
  }
  return out;
}

double measure_pattern(const Image& scene, std::span<const std::uint8_t> pattern) {
  require(scene.channels == 1 && pattern.size() == scene.plane_size(), ErrorCode::shape_mismatch,
          "pattern and scene differ in size");
  double sum = 0.0;
  for (std::size_t p = 0; p < pattern.size(); ++p) {
    require(pattern[p] <= 1, ErrorCode::invalid_argument, "on/off patterns must contain only 0 and 1");
    if (pattern[p]) sum += scene.pixels[p];
  }
  return sum;
}

MaskPair decompose_mask(std::span<const std::int8_t> mask) {
  MaskPair pair;
  pair.pos.resize(mask.size());
  pair.neg.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    require(mask[i] == 1 || mask[i] == -1, ErrorCode::invalid_argument, "decompose_mask: entries must be -1 or +1");
    pair.pos[i] = static_cast<std::uint8_t>((mask[i] + 1) / 2);
    pair.neg[i] = static_cast<std::uint8_t>((1 - mask[i]) / 2);
  }
  return pair;
}

std::string to_string(HadamardOrdering ordering) {
  return ordering == HadamardOrdering::natural ? "natural" : "sequency";
}

HadamardOrdering parse_ordering(const std::string& name) {
  if (name == "natural") return HadamardOrdering::natural;
  if (name == "sequency") return HadamardOrdering::sequency;
  fail(ErrorCode::invalid_argument, "unknown Hadamard ordering '" + name + "'");
}

bool is_power_of_two(long long n) { return n > 0 && (n & (n - 1)) == 0; }

namespace {

std::int8_t sylvester_entry(unsigned row, unsigned col) { return (std::popcount(row & col) & 1u) ? -1 : 1; }

}  // namespace

int sign_changes(std::span<const std::int8_t> row) {
  int changes = 0;
  for (std::size_t i = 1; i < row.size(); ++i) changes += row[i] != row[i - 1];
  return changes;
}

std::vector<int> sequency_permutation(int order) {
  require(is_power_of_two(order), ErrorCode::invalid_argument, "Hadamard order must be a power of two");
  std::vector<int> changes(order);
  std::vector<std::int8_t> row(order);
  for (int r = 0; r < order; ++r) {
    for (int c = 0; c < order; ++c) row[c] = sylvester_entry(r, c);
    changes[r] = sign_changes(row);
  }
  std::vector<int> perm(order);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) { return changes[a] < changes[b]; });
  return perm;
}

MaskSet walsh_hadamard_masks(int order, int count, HadamardOrdering ordering) {
  require(is_power_of_two(order), ErrorCode::invalid_argument,
          "Hadamard order " + std::to_string(order) + " is not a power of two");
  require(count >= 1 && count <= order, ErrorCode::invalid_argument, "Hadamard mask count must be in [1, order]");
  const int log2n = std::countr_zero(static_cast<unsigned>(order));
  int h = 1;
  int w = order;
  if (log2n % 2 == 0) {
    h = 1 << (log2n / 2);
    w = h;
  }
  std::vector<int> rows(order);
  if (ordering == HadamardOrdering::sequency)
    rows = sequency_permutation(order);
  else
    std::iota(rows.begin(), rows.end(), 0);

  MaskSet set(count, h, w);
  for (int m = 0; m < count; ++m) {
    auto dst = set.mask(m);
    for (int c = 0; c < order; ++c) dst[c] = sylvester_entry(static_cast<unsigned>(rows[m]), static_cast<unsigned>(c));
  }
  return set;
}

void fwht(std::span<double> data) {
  require(is_power_of_two(static_cast<long long>(data.size())), ErrorCode::invalid_argument,
          "fwht length must be a power of two");
  for (std::size_t h = 1; h < data.size(); h *= 2)
    for (std::size_t i = 0; i < data.size(); i += 2 * h)
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = data[j];
        const double b = data[j + h];
        data[j] = a + b;
        data[j + h] = a - b;
      }
}

Image hadamard_reconstruct_full(const MeasurementVector& measurements, int order, HadamardOrdering ordering) {
  require(is_power_of_two(order), ErrorCode::invalid_argument, "Hadamard order must be a power of two");
  require(measurements.values.size() == static_cast<std::size_t>(order), ErrorCode::shape_mismatch,
          "full Hadamard inversion needs exactly `order` measurements");
  std::vector<double> natural(order);
  if (ordering == HadamardOrdering::sequency) {
    const auto perm = sequency_permutation(order);
    for (int k = 0; k < order; ++k) natural[perm[k]] = measurements.values[k];
  } else {
    natural = measurements.values;
  }
  // H is symmetric, so H^T I is the forward transform.
  fwht(natural);
  const int log2n = std::countr_zero(static_cast<unsigned>(order));
  const int h = log2n % 2 == 0 ? 1 << (log2n / 2) : 1;
  const int w = order / h;
  Image out(h, w, 1);
  for (int i = 0; i < order; ++i) out.pixels[i] = natural[i] / order;
  return out;
}

namespace {

// y = A x
void apply_a(const MaskSet& a, std::span<const double> x, std::span<double> y) {
  const std::size_t k = a.pixels();
  for (int m = 0; m < a.count; ++m) {
    auto row = a.mask(m);
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += row[p] * x[p];
    y[m] = s;
  }
}

// x = A^T y
void apply_at(const MaskSet& a, std::span<const double> y, std::span<double> x) {
  std::fill(x.begin(), x.end(), 0.0);
  const std::size_t k = a.pixels();
  for (int m = 0; m < a.count; ++m) {
    auto row = a.mask(m);
    const double ym = y[m];
    for (std::size_t p = 0; p < k; ++p) x[p] += row[p] * ym;
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

ClassicalResult classical_reconstruct(const MaskSet& masks, const MeasurementVector& measurements,
                                      const ClassicalOptions& options) {
  validate_mask_set(masks);
  require(measurements.values.size() == static_cast<std::size_t>(masks.count), ErrorCode::shape_mismatch,
          "measurement length differs from mask count");
  require(options.reg_weight >= 0.0 && std::isfinite(options.reg_weight), ErrorCode::invalid_argument,
          "reg_weight must be >= 0");
  require(options.max_iters >= 1 && options.tol > 0.0, ErrorCode::invalid_argument,
          "max_iters must be >= 1 and tol > 0");

  const std::size_t k = masks.pixels();
  std::vector<double> x(k, 0.0), b(k), r(k), p(k), ap(k), tmp(masks.count);
  apply_at(masks, measurements.values, b);

  ClassicalResult result;
  result.scene = Image(masks.height, masks.width, 1);
  const double b_norm = std::sqrt(dot(b, b));
  if (b_norm == 0.0) return result;

  r = b;
  p = r;
  double rr = dot(r, r);
  int it = 0;
  double rel = 1.0;
  while (it < options.max_iters) {
    apply_a(masks, p, tmp);
    apply_at(masks, tmp, ap);
    for (std::size_t i = 0; i < k; ++i) ap[i] += options.reg_weight * p[i];
    const double pap = dot(p, ap);
    if (!(pap > 0.0)) break;
    const double alpha = rr / pap;
    for (std::size_t i = 0; i < k; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    ++it;
    const double rr_new = dot(r, r);
    rel = std::sqrt(rr_new) / b_norm;
    if (rel < options.tol) break;
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t i = 0; i < k; ++i) p[i] = r[i] + beta * p[i];
  }
  result.iterations = it;
  result.relative_residual = rel;
  if (!(rel < options.tol)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "conjugate gradient stopped after %d iterations at relative residual %.3e (tol %.3e)",
                  it, rel, options.tol);
    fail(ErrorCode::not_converged, buf);
  }
  result.scene.pixels = std::move(x);
  if (options.clamp) result.scene = clamp_unit(std::move(result.scene));
  return result;
}

std::vector<std::filesystem::path> export_masks(const MaskSet& masks, const MaskManifest& meta,
                                                const std::filesystem::path& dir) {
  validate_mask_set(masks);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec && std::filesystem::is_directory(dir), ErrorCode::io, "cannot create directory " + dir.string());

  nlohmann::json files = nlohmann::json::array();
  std::vector<std::filesystem::path> written;
  for (int m = 0; m < masks.count; ++m) {
    const auto pair = decompose_mask(masks.mask(m));
    char stem[32];
    std::snprintf(stem, sizeof stem, "mask_%04d", m);
    const std::string pos_name = std::string(stem) + "_pos.pgm";
    const std::string neg_name = std::string(stem) + "_neg.pgm";
    Raster8 r{masks.height, masks.width, 1, {}};
    r.samples.resize(masks.pixels());
    std::transform(pair.pos.begin(), pair.pos.end(), r.samples.begin(), [](auto v) { return v ? 255 : 0; });
    write_netpbm(dir / pos_name, r);
    std::transform(pair.neg.begin(), pair.neg.end(), r.samples.begin(), [](auto v) { return v ? 255 : 0; });
    write_netpbm(dir / neg_name, r);
    written.push_back(dir / pos_name);
    written.push_back(dir / neg_name);
    files.push_back({{"index", m}, {"pos", pos_name}, {"neg", neg_name}});
  }

  nlohmann::json manifest = {{"sr", meta.sr},           {"width", masks.width}, {"height", masks.height},
                             {"count", masks.count},    {"ordering", meta.ordering},
                             {"seed", meta.seed},       {"files", files}};
  const auto manifest_path = dir / "manifest.json";
  std::ofstream out(manifest_path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + manifest_path.string());
  out << manifest.dump(2) << '\n';
  require(static_cast<bool>(out), ErrorCode::io, "failed writing " + manifest_path.string());
  written.push_back(manifest_path);
  return written;
}

MaskSet import_masks(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(static_cast<bool>(in), ErrorCode::io, "no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::io, std::string("malformed mask manifest: ") + e.what());
  }
  const int count = manifest.at("count").get<int>();
  const int h = manifest.at("height").get<int>();
  const int w = manifest.at("width").get<int>();
  MaskSet set(count, h, w);
  for (const auto& f : manifest.at("files")) {
    const int m = f.at("index").get<int>();
    require(m >= 0 && m < count, ErrorCode::io, "mask index out of range in manifest");
    const auto pos = read_netpbm(dir / f.at("pos").get<std::string>());
    const auto neg = read_netpbm(dir / f.at("neg").get<std::string>());
    require(pos.width == w && pos.height == h && neg.width == w && neg.height == h && pos.channels == 1 &&
                neg.channels == 1,
            ErrorCode::shape_mismatch, "exported mask size differs from manifest");
    auto dst = set.mask(m);
    for (std::size_t p = 0; p < set.pixels(); ++p) {
      const int v = (pos.samples[p] ? 1 : 0) - (neg.samples[p] ? 1 : 0);
      require(v == 1 || v == -1, ErrorCode::io, "exported pos/neg pair is not complementary");
      dst[p] = static_cast<std::int8_t>(v);
    }
  }
  return set;
}

}  // namespace spi
