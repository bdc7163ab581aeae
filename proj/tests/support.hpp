#pragma once

// Shared generators and reference implementations for the test suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "spi/image.hpp"
#include "spi/imaging.hpp"
#include "spi/rng.hpp"

namespace spitest {

inline spi::Image random_scene(spi::Rng& rng, int h, int w, int c = 1) {
  spi::Image img(h, w, c);
  for (auto& p : img.pixels) p = rng.uniform();
  return img;
}

inline spi::MaskSet random_masks(spi::Rng& rng, int count, int h, int w) {
  spi::MaskSet m(count, h, w);
  for (auto& e : m.entries) e = rng.below(2) ? 1 : -1;
  return m;
}

// Plain dot products in raster order.
inline std::vector<double> dot_oracle(const spi::Image& scene, const spi::MaskSet& masks) {
  std::vector<double> out(masks.count, 0.0);
  for (int m = 0; m < masks.count; ++m) {
    const auto mask = masks.mask(m);
    for (std::size_t i = 0; i < mask.size(); ++i) out[m] += mask[i] * scene.pixels[i];
  }
  return out;
}

// Sylvester construction by repeated Kronecker product with [[1,1],[1,-1]].
inline std::vector<std::vector<int>> sylvester_oracle(int n) {
  std::vector<std::vector<int>> h{{1}};
  while (static_cast<int>(h.size()) < n) {
    const std::size_t k = h.size();
    std::vector<std::vector<int>> next(2 * k, std::vector<int>(2 * k));
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        next[i][j] = h[i][j];
        next[i][j + k] = h[i][j];
        next[i + k][j] = h[i][j];
        next[i + k][j + k] = -h[i][j];
      }
    h = std::move(next);
  }
  return h;
}

// Gaussian elimination with partial pivoting; a is n x n row-major.
inline std::vector<double> dense_solve(std::vector<double> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (piv != col) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a[col * n + k], a[piv * n + k]);
      std::swap(b[col], b[piv]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      for (std::size_t k = col; k < n; ++k) a[r * n + k] -= f * a[col * n + k];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i * n + k] * x[k];
    x[i] = s / a[i * n + i];
  }
  return x;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double rel_l2(const std::vector<double>& got, const std::vector<double>& want) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

// |a - n| <= tol * max(|a|, |n|) + abs_floor
inline bool grad_close(double analytic, double numeric, double tol, double abs_floor = 1e-9) {
  return std::abs(analytic - numeric) <= tol * std::max(std::abs(analytic), std::abs(numeric)) + abs_floor;
}

// Fresh, empty scratch directory unique to the test name.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("spi_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace spitest
