#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "spi/error.hpp"
#include "spi/losses.hpp"
#include "support.hpp"

using namespace spi;
using spitest::random_scene;

namespace {

Image filled(int h, int w, double v, int c = 1) { return Image(h, w, c, v); }

Image from(int h, int w, std::vector<double> px) {
  Image img(h, w);
  img.pixels = std::move(px);
  return img;
}

// Direct windowed SSIM: every valid 11x11 window, Gaussian weights built
// from scratch, per-channel mean.
double ssim_oracle(const Image& a, const Image& b) {
  const int r = 5;
  double g[11][11];
  double gs = 0.0;
  for (int y = -r; y <= r; ++y)
    for (int x = -r; x <= r; ++x) gs += g[y + r][x + r] = std::exp(-(x * x + y * y) / (2 * 1.5 * 1.5));
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    double sum = 0.0;
    int count = 0;
    for (int cy = r; cy < a.height - r; ++cy)
      for (int cx = r; cx < a.width - r; ++cx) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int y = -r; y <= r; ++y)
          for (int x = -r; x <= r; ++x) {
            const double w = g[y + r][x + r] / gs;
            const double va = a.at(cy + y, cx + x, c), vb = b.at(cy + y, cx + x, c);
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        sum += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    total += sum / count;
  }
  return total / a.channels;
}

}  // namespace

TEST_SUITE("mse_loss") {
  TEST_CASE("examples") {
    Rng rng(1);
    const auto a = random_scene(rng, 5, 7);
    CHECK(mse_loss(a, a) == 0.0);
    CHECK(mse_loss(filled(4, 4, 1.0), filled(4, 4, 0.0)) == 1.0);
    CHECK(mse_loss(from(1, 2, {0, 1}), from(1, 2, {1, 1})) == 0.5);
    CHECK_THROWS_AS(mse_loss(filled(2, 2, 0), filled(2, 3, 0)), Error);
  }

  TEST_CASE("batched form and its gradient") {
    Rng rng(2);
    nn::Tensor t(3, 1, 4, 4), r(3, 1, 4, 4);
    for (auto& v : t.data) v = rng.uniform();
    for (auto& v : r.data) v = rng.uniform();
    nn::Tensor g;
    const double loss = mse_loss_batch(t, r, &g);
    double want = 0.0;
    for (int b = 0; b < 3; ++b) {
      Image ti(4, 4), ri(4, 4);
      std::copy(t.sample(b), t.sample(b) + 16, ti.pixels.begin());
      std::copy(r.sample(b), r.sample(b) + 16, ri.pixels.begin());
      want += mse_loss(ti, ri) / 3;
    }
    CHECK(loss == doctest::Approx(want).epsilon(1e-14));
    for (std::size_t i = 0; i < r.size(); ++i) {
      auto rp = r, rm = r;
      rp.data[i] += 1e-6;
      rm.data[i] -= 1e-6;
      const double numeric = (mse_loss_batch(t, rp, nullptr) - mse_loss_batch(t, rm, nullptr)) / 2e-6;
      CHECK(spitest::grad_close(g.data[i], numeric, 1e-6, 1e-10));
    }
  }
}

TEST_SUITE("perceptual_loss") {
  TEST_CASE("identity extractor: fixed point, scaling and cross-check with MSE") {
    const auto ext = PerceptualExtractor::identity();
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
      const auto a = random_scene(rng, 8, 8);
      const auto b = random_scene(rng, 8, 8);
      CHECK(perceptual_loss(ext, a, a) == 0.0);
      const double l = perceptual_loss(ext, a, b);
      CHECK(l >= 0.0);
      // Grayscale is replicated to three channels before extraction.
      CHECK(l == doctest::Approx(3.0 * mse_loss(a, b)).epsilon(1e-12));
      Image b2(8, 8);
      for (std::size_t i = 0; i < b2.pixels.size(); ++i) b2.pixels[i] = a.pixels[i] + 2 * (b.pixels[i] - a.pixels[i]);
      CHECK(perceptual_loss(ext, a, b2) == doctest::Approx(4.0 * l).epsilon(1e-12));
    }
  }

  TEST_CASE("VGG-layout extractor is frozen and has a zero fixed point") {
    PerceptualConfig cfg;
    cfg.base_width = 4;
    auto ext = PerceptualExtractor::vgg19(cfg);
    CHECK_FALSE(ext.is_identity());
    CHECK_FALSE(ext.pretrained());
    CHECK(ext.min_input_size() == 16);
    Rng rng(4);
    const auto a = random_scene(rng, 16, 16);
    const auto b = random_scene(rng, 16, 16);
    CHECK(perceptual_loss(ext, a, a) == 0.0);
    CHECK(perceptual_loss(ext, a, b) > 0.0);
    CHECK(perceptual_loss(ext, a, b) == perceptual_loss(ext, a, b));
    CHECK_THROWS_AS(perceptual_loss(ext, random_scene(rng, 8, 8), random_scene(rng, 8, 8)), Error);
    CHECK(ext.describe().find("untrained") != std::string::npos);
  }

  TEST_CASE("batched gradient through the frozen extractor") {
    PerceptualConfig cfg;
    cfg.base_width = 2;
    cfg.block = 2;
    cfg.conv = 2;
    auto ext = PerceptualExtractor::vgg19(cfg);
    Rng rng(5);
    nn::Tensor t(2, 1, 8, 8), r(2, 1, 8, 8);
    for (auto& v : t.data) v = rng.uniform();
    for (auto& v : r.data) v = rng.uniform();
    nn::Tensor g;
    perceptual_loss_batch(ext, t, r, &g);
    for (int k = 0; k < 40; ++k) {
      const std::size_t i = rng.below(r.size());
      auto rp = r, rm = r;
      rp.data[i] += 1e-6;
      rm.data[i] -= 1e-6;
      const double numeric =
          (perceptual_loss_batch(ext, t, rp, nullptr) - perceptual_loss_batch(ext, t, rm, nullptr)) / 2e-6;
      CHECK(spitest::grad_close(g.data[i], numeric, 1e-4, 1e-10));
    }
  }

  TEST_CASE("weights file must match the layout exactly") {
    const auto dir = spitest::scratch_dir("vgg_weights");
    {
      std::ofstream f(dir / "short.bin", std::ios::binary);
      const float x = 0.5f;
      f.write(reinterpret_cast<const char*>(&x), sizeof x);
    }
    PerceptualConfig cfg;
    cfg.base_width = 2;
    cfg.weights_path = (dir / "short.bin").string();
    CHECK_THROWS_AS(PerceptualExtractor::vgg19(cfg), Error);
    cfg.weights_path = (dir / "missing.bin").string();
    CHECK_THROWS_AS(PerceptualExtractor::vgg19(cfg), Error);
  }
}

TEST_SUITE("adversarial losses") {
  TEST_CASE("generator side") {
    CHECK(adversarial_loss_g(std::vector<double>{1.0}) == 0.0);
    CHECK(adversarial_loss_g(std::vector<double>{0.0}) == 0.5);
    CHECK(adversarial_loss_g(std::vector<double>{1.0, 0.0}) == 0.25);
    CHECK_THROWS_AS(adversarial_loss_g(std::vector<double>{1.2}), Error);
    CHECK_THROWS_AS(adversarial_loss_g(std::vector<double>{-0.1}), Error);
  }

  TEST_CASE("discriminator side") {
    const std::vector<double> one{1.0}, zero{0.0}, half{0.5};
    CHECK(discriminator_loss(one, zero) == 0.0);
    CHECK(discriminator_loss(zero, one) == 1.0);
    CHECK(discriminator_loss(half, half) == 0.25);
    CHECK_THROWS_AS(discriminator_loss(std::vector<double>{1.5}, zero), Error);
  }

  TEST_CASE("gradients, including the zero gradient of a perfect discriminator") {
    Rng rng(6);
    std::vector<double> s(5), g(5);
    for (auto& v : s) v = rng.uniform(0.01, 0.99);
    const double l = adversarial_loss_g_grad(s, g);
    CHECK(l == doctest::Approx(adversarial_loss_g(s)));
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(g[i] == doctest::Approx((s[i] - 1.0) / 5));

    std::vector<double> r(4), f(3), gr(4), gf(3);
    for (auto& v : r) v = rng.uniform(0.01, 0.99);
    for (auto& v : f) v = rng.uniform(0.01, 0.99);
    CHECK(discriminator_loss_grad(r, f, gr, gf) == doctest::Approx(discriminator_loss(r, f)));
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(gr[i] == doctest::Approx((r[i] - 1.0) / 4));
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(gf[i] == doctest::Approx(f[i] / 3));

    const std::vector<double> pr{1.0, 1.0}, pf{0.0, 0.0};
    std::vector<double> zr(2), zf(2);
    CHECK(discriminator_loss_grad(pr, pf, zr, zf) == 0.0);
    for (double v : zr) CHECK(v == 0.0);
    for (double v : zf) CHECK(v == 0.0);
  }
}

TEST_SUITE("total_loss") {
  TEST_CASE("weighted sum") {
    CHECK(total_loss(0.1, 0.2, 0.5, {0.05}) == doctest::Approx(0.325).epsilon(1e-15));
    CHECK(total_loss(0.0, 0.0, 123.0, {0.0}) == 0.0);
    CHECK(LossWeights{}.lambda_adv == 0.05);
    const double a = total_loss(0.3, 0.4, 1.0, {0.05});
    const double b = total_loss(0.3, 0.4, 3.0, {0.05});
    CHECK((b - a) / 2.0 == doctest::Approx(0.05).epsilon(1e-12));
    CHECK_THROWS_AS(total_loss(std::nan(""), 0, 0, {}), Error);
    CHECK_THROWS_AS(total_loss(0, 0, 0, {-1.0}), Error);
  }
}

TEST_SUITE("psnr") {
  TEST_CASE("examples") {
    Rng rng(7);
    const auto a = random_scene(rng, 6, 6);
    CHECK(psnr(a, a) == kPsnrCapDb);
    const auto zero = filled(10, 10, 0.0);
    CHECK(psnr(zero, filled(10, 10, 0.1)) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(psnr(filled(3, 3, 0.0), filled(3, 3, 1.0)) == doctest::Approx(0.0));
    CHECK(psnr(zero, filled(10, 10, 1e-9)) == kPsnrCapDb);
    CHECK_THROWS_AS(psnr(filled(3, 3, 0), filled(3, 4, 0)), Error);
  }

  TEST_CASE("decreases as the noise level grows") {
    Rng rng(8);
    const auto truth = random_scene(rng, 16, 16);
    double prev = kPsnrCapDb + 1;
    for (double sigma : {0.01, 0.02, 0.05, 0.1, 0.2}) {
      double mean = 0.0;
      for (int t = 0; t < 20; ++t) {
        Image noisy = truth;
        for (auto& p : noisy.pixels) p += rng.normal(0.0, sigma);
        mean += psnr(truth, noisy) / 20;
      }
      CHECK(mean < prev);
      prev = mean;
    }
  }
}

TEST_SUITE("ssim") {
  TEST_CASE("examples") {
    Rng rng(9);
    const auto a = random_scene(rng, 16, 16);
    const auto b = random_scene(rng, 16, 16);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    const double c1 = 1e-4;
    const double constant = ssim(filled(16, 16, 0.0), filled(16, 16, 1.0));
    CHECK(constant == doctest::Approx(c1 / (1 + c1)).epsilon(0.05));
    CHECK(ssim(a, b) == ssim(b, a));
    CHECK_THROWS_AS(ssim(filled(10, 16, 0), filled(10, 16, 0)), Error);
  }

  TEST_CASE("agrees with a direct windowed computation, gray and RGB") {
    Rng rng(10);
    for (int t = 0; t < 5; ++t) {
      const int c = t % 2 ? 3 : 1;
      const auto a = random_scene(rng, 13 + t, 17, c);
      auto b = a;
      for (auto& p : b.pixels) p = std::clamp(p + rng.normal(0.0, 0.1), 0.0, 1.0);
      CHECK(ssim(a, b) == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-10));
    }
  }
}

TEST_SUITE("metrics report") {
  TEST_CASE("JSON layout and table columns") {
    MetricsReport r;
    r.images = {{"a.pgm", 20.0, 0.5}, {"b.pgm", 30.0, 0.7}};
    r.sr = 0.1;
    r.config_hash = "abc";
    r.dataset = "set";
    r.seed = 4;
    r.aggregate();
    CHECK(r.mean_psnr_db == 25.0);
    CHECK(r.mean_ssim == doctest::Approx(0.6));
    const auto j = r.to_json();
    CHECK(j["images"].size() == 2);
    CHECK(j["images"][0]["id"] == "a.pgm");
    CHECK(j["images"][1]["psnr_db"] == 30.0);
    CHECK(j["aggregate"]["n_images"] == 2);
    CHECK(j["aggregate"]["mean_psnr_db"] == 25.0);
    CHECK(j["aggregate"]["sr"] == 0.1);
    CHECK(j["aggregate"]["config_hash"] == "abc");
    const auto table = r.table();
    CHECK(table.find("PSNR (dB)") != std::string::npos);
    CHECK(table.find("SSIM") != std::string::npos);
    CHECK(table.find("b.pgm") != std::string::npos);
  }
}
