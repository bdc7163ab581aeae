#include "spi/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "spi/error.hpp"

namespace spi {

namespace {

constexpr std::array<int, 5> kVggBlockConvs{2, 2, 4, 4, 4};
constexpr std::array<int, 5> kVggWidthScale{1, 2, 4, 8, 8};
constexpr std::array<double, 3> kImagenetMean{0.485, 0.456, 0.406};
constexpr std::array<double, 3> kImagenetStd{0.229, 0.224, 0.225};

void require_same_shape(const Image& a, const Image& b, const char* who) {
  require(a.same_shape(b), ErrorCode::shape_mismatch, std::string(who) + ": images differ in shape");
  require(!a.pixels.empty(), ErrorCode::shape_mismatch, std::string(who) + ": empty image");
}

void check_score(double s) {
  require(std::isfinite(s) && s >= 0.0 && s <= 1.0, ErrorCode::invalid_argument,
          "discriminator scores must lie in [0, 1]");
}

nn::Tensor to_tensor(const Image& img) {
  nn::Tensor t(1, img.channels, img.height, img.width);
  t.data.assign(img.pixels.begin(), img.pixels.end());
  return t;
}

nn::Tensor to_rgb(const nn::Tensor& x) {
  if (x.c == 3) return x;
  nn::Tensor out(x.n, 3, x.h, x.w);
  const std::size_t hw = x.plane();
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < 3; ++c) std::copy(x.sample(n), x.sample(n) + hw, out.sample(n) + c * hw);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- extractor

PerceptualExtractor PerceptualExtractor::identity() {
  PerceptualExtractor e;
  e.identity_ = true;
  e.cfg_.kind = "identity";
  return e;
}

PerceptualExtractor PerceptualExtractor::vgg19(const PerceptualConfig& cfg) {
  require(cfg.block >= 1 && cfg.block <= 5, ErrorCode::invalid_argument, "perceptual block must be in 1..5");
  require(cfg.conv >= 1 && cfg.conv <= kVggBlockConvs[cfg.block - 1], ErrorCode::invalid_argument,
          "perceptual conv index out of range for the selected block");
  require(cfg.base_width >= 1, ErrorCode::invalid_argument, "perceptual base width must be positive");
  PerceptualExtractor e;
  e.identity_ = false;
  e.cfg_ = cfg;
  std::vector<nn::Conv3x3*> convs;
  int in = 3;
  for (int b = 1; b <= cfg.block; ++b) {
    if (b > 1) {
      e.net_.emplace<nn::MaxPool2>();
      ++e.pools_;
    }
    const int width = cfg.base_width * kVggWidthScale[b - 1];
    const int last = b == cfg.block ? cfg.conv : kVggBlockConvs[b - 1];
    for (int j = 1; j <= last; ++j) {
      auto& conv = e.net_.emplace<nn::Conv3x3>("vgg.conv" + std::to_string(b) + "_" + std::to_string(j), in, width,
                                               /*trainable=*/false);
      e.net_.emplace<nn::Relu>();
      convs.push_back(&conv);
      in = width;
    }
  }

  if (cfg.weights_path.empty()) {
    Rng rng(cfg.seed);
    e.net_.init(rng);
    return e;
  }

  // float32 little-endian, per conv in network order: weight (out,in,3,3) then bias (out).
  std::ifstream f(cfg.weights_path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::io, "cannot open perceptual weights " + cfg.weights_path);
  std::size_t expected = 0;
  for (auto* c : convs) expected += c->weight().value.size() + c->bias().value.size();
  std::vector<float> buf(expected);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected * sizeof(float)));
  require(static_cast<std::size_t>(f.gcount()) == expected * sizeof(float) && f.peek() == EOF, ErrorCode::io,
          "perceptual weight file size does not match the selected VGG-19 prefix");
  std::size_t off = 0;
  for (auto* c : convs) {
    for (auto& v : c->weight().value) v = buf[off++];
    for (auto& v : c->bias().value) v = buf[off++];
  }
  e.pretrained_ = true;
  return e;
}

PerceptualExtractor PerceptualExtractor::from_config(const PerceptualConfig& cfg) {
  if (cfg.kind == "identity") return identity();
  if (cfg.kind == "vgg19") return vgg19(cfg);
  fail(ErrorCode::invalid_argument, "unknown perceptual extractor '" + cfg.kind + "'");
}

std::string describe_perceptual(const PerceptualConfig& cfg) {
  if (cfg.kind == "identity") return "identity";
  std::string s = "vgg19:relu" + std::to_string(cfg.block) + "_" + std::to_string(cfg.conv) + ":base" +
                  std::to_string(cfg.base_width);
  return s + (cfg.weights_path.empty() ? ":untrained-frozen" : ":pretrained");
}

std::string PerceptualExtractor::describe() const {
  return identity_ ? "identity" : describe_perceptual(cfg_);
}

nn::Tensor PerceptualExtractor::features(const nn::Tensor& images, nn::Tape* tape) const {
  require(images.c == 1 || images.c == 3, ErrorCode::shape_mismatch, "perceptual input must have 1 or 3 channels");
  nn::Tensor rgb = to_rgb(images);
  if (identity_) return rgb;
  require(images.h >= min_input_size() && images.w >= min_input_size(), ErrorCode::shape_mismatch,
          "image too small for the selected perceptual layer");
  if (pretrained_) {
    const std::size_t hw = rgb.plane();
    for (int n = 0; n < rgb.n; ++n)
      for (int c = 0; c < 3; ++c) {
        double* p = rgb.sample(n) + c * hw;
        for (std::size_t i = 0; i < hw; ++i) p[i] = (p[i] - kImagenetMean[c]) / kImagenetStd[c];
      }
  }
  return net_.forward(rgb, nn::Mode::eval, tape);
}

nn::Tensor PerceptualExtractor::backward(const nn::Tensor& grad_features, const nn::Tape& tape, int input_channels) {
  nn::Tensor g = identity_ ? grad_features : net_.backward(grad_features, tape);
  if (pretrained_) {
    const std::size_t hw = g.plane();
    for (int n = 0; n < g.n; ++n)
      for (int c = 0; c < 3; ++c) {
        double* p = g.sample(n) + c * hw;
        for (std::size_t i = 0; i < hw; ++i) p[i] /= kImagenetStd[c];
      }
  }
  if (input_channels == 3) return g;
  nn::Tensor out(g.n, 1, g.h, g.w);
  const std::size_t hw = g.plane();
  for (int n = 0; n < g.n; ++n)
    for (std::size_t i = 0; i < hw; ++i)
      out.sample(n)[i] = g.sample(n)[i] + g.sample(n)[hw + i] + g.sample(n)[2 * hw + i];
  return out;
}

// ---------------------------------------------------------------- losses

double mse_loss(const Image& truth, const Image& recon) {
  require_same_shape(truth, recon, "mse_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = truth.pixels[i] - recon.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(truth.size());
}

double mse_loss_batch(const nn::Tensor& truth, const nn::Tensor& recon, nn::Tensor* grad) {
  require(truth.same_shape(recon) && truth.size() > 0, ErrorCode::shape_mismatch, "mse_loss: shape mismatch");
  if (grad) *grad = nn::Tensor(recon.n, recon.c, recon.h, recon.w);
  const double denom = static_cast<double>(truth.size());
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = recon.data[i] - truth.data[i];
    s += d * d;
    if (grad) grad->data[i] = 2.0 * d / denom;
  }
  return s / denom;
}

double perceptual_loss_batch(PerceptualExtractor& extractor, const nn::Tensor& truth, const nn::Tensor& recon,
                             nn::Tensor* grad) {
  require(truth.same_shape(recon) && truth.size() > 0, ErrorCode::shape_mismatch, "perceptual_loss: shape mismatch");
  const nn::Tensor ft = extractor.features(truth, nullptr);
  nn::Tape tape;
  const nn::Tensor fr = extractor.features(recon, grad ? &tape : nullptr);
  // Sum over channels and positions, normalized by the map area W_ij * H_ij and the batch.
  const double denom = static_cast<double>(fr.plane()) * fr.n;
  double s = 0.0;
  nn::Tensor gf;
  if (grad) gf = nn::Tensor(fr.n, fr.c, fr.h, fr.w);
  for (std::size_t i = 0; i < fr.size(); ++i) {
    const double d = fr.data[i] - ft.data[i];
    s += d * d;
    if (grad) gf.data[i] = 2.0 * d / denom;
  }
  if (grad) *grad = extractor.backward(gf, tape, recon.c);
  return s / denom;
}

double perceptual_loss(const PerceptualExtractor& extractor, const Image& truth, const Image& recon) {
  require_same_shape(truth, recon, "perceptual_loss");
  const nn::Tensor ft = extractor.features(to_tensor(truth), nullptr);
  const nn::Tensor fr = extractor.features(to_tensor(recon), nullptr);
  double s = 0.0;
  for (std::size_t i = 0; i < fr.size(); ++i) {
    const double d = fr.data[i] - ft.data[i];
    s += d * d;
  }
  return s / static_cast<double>(fr.plane());
}

double adversarial_loss_g(std::span<const double> scores) {
  std::vector<double> g(scores.size());
  return adversarial_loss_g_grad(scores, g);
}

double adversarial_loss_g_grad(std::span<const double> scores, std::span<double> grad) {
  require(!scores.empty() && grad.size() == scores.size(), ErrorCode::shape_mismatch,
          "adversarial loss needs a non-empty score batch");
  const double n = static_cast<double>(scores.size());
  double s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    check_score(scores[i]);
    const double d = scores[i] - 1.0;
    s += 0.5 * d * d;
    grad[i] = d / n;
  }
  return s / n;
}

double discriminator_loss(std::span<const double> real_scores, std::span<const double> fake_scores) {
  std::vector<double> gr(real_scores.size()), gf(fake_scores.size());
  return discriminator_loss_grad(real_scores, fake_scores, gr, gf);
}

double discriminator_loss_grad(std::span<const double> real_scores, std::span<const double> fake_scores,
                               std::span<double> grad_real, std::span<double> grad_fake) {
  require(!real_scores.empty() && !fake_scores.empty(), ErrorCode::shape_mismatch,
          "discriminator loss needs non-empty score batches");
  require(grad_real.size() == real_scores.size() && grad_fake.size() == fake_scores.size(),
          ErrorCode::shape_mismatch, "gradient buffers must match score batches");
  const double nr = static_cast<double>(real_scores.size());
  const double nf = static_cast<double>(fake_scores.size());
  double real = 0.0;
  double fake = 0.0;
  for (std::size_t i = 0; i < real_scores.size(); ++i) {
    check_score(real_scores[i]);
    const double d = real_scores[i] - 1.0;
    real += d * d;
    grad_real[i] = d / nr;
  }
  for (std::size_t i = 0; i < fake_scores.size(); ++i) {
    check_score(fake_scores[i]);
    fake += fake_scores[i] * fake_scores[i];
    grad_fake[i] = fake_scores[i] / nf;
  }
  return 0.5 * real / nr + 0.5 * fake / nf;
}

double total_loss(double mse, double perceptual, double adversarial, const LossWeights& weights) {
  require(std::isfinite(mse) && std::isfinite(perceptual) && std::isfinite(adversarial), ErrorCode::numerical,
          "loss component is not finite");
  require(weights.lambda_adv >= 0.0, ErrorCode::invalid_argument, "lambda_adv must be >= 0");
  return mse + perceptual + weights.lambda_adv * adversarial;
}

// ---------------------------------------------------------------- metrics

double psnr(const Image& truth, const Image& recon, double peak) {
  const double m = mse_loss(truth, recon);
  if (m == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / m));
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> g{};
  double s = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

// Separable valid-region filtering of an h x w plane.
std::vector<double> filter_valid(std::span<const double> src, int h, int w, const std::array<double, kWindow>& g) {
  const int oh = h - kWindow + 1;
  const int ow = w - kWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += g[k] * src[static_cast<std::size_t>(y) * w + x + k];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += g[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

double ssim_plane(std::span<const double> a, std::span<const double> b, int h, int w) {
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  static const auto g = gaussian_window();
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter_valid(a, h, w, g);
  const auto mu_b = filter_valid(b, h, w, g);
  const auto s_aa = filter_valid(aa, h, w, g);
  const auto s_bb = filter_valid(bb, h, w, g);
  const auto s_ab = filter_valid(ab, h, w, g);
  double sum = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i];
    const double mb = mu_b[i];
    const double va = s_aa[i] - ma * ma;
    const double vb = s_bb[i] - mb * mb;
    const double cov = s_ab[i] - ma * mb;
    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return sum / static_cast<double>(mu_a.size());
}

}  // namespace

double ssim(const Image& truth, const Image& recon) {
  require_same_shape(truth, recon, "ssim");
  require(truth.height >= kWindow && truth.width >= kWindow, ErrorCode::shape_mismatch,
          "ssim needs images of at least 11x11 pixels");
  double s = 0.0;
  for (int c = 0; c < truth.channels; ++c) s += ssim_plane(truth.plane(c), recon.plane(c), truth.height, truth.width);
  return s / truth.channels;
}

void MetricsReport::aggregate() {
  mean_psnr_db = 0.0;
  mean_ssim = 0.0;
  if (images.empty()) return;
  for (const auto& m : images) {
    mean_psnr_db += m.psnr_db;
    mean_ssim += m.ssim;
  }
  mean_psnr_db /= static_cast<double>(images.size());
  mean_ssim /= static_cast<double>(images.size());
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& m : images) per.push_back({{"id", m.id}, {"psnr_db", m.psnr_db}, {"ssim", m.ssim}});
  return {{"images", per},
          {"aggregate",
           {{"mean_psnr_db", mean_psnr_db},
            {"mean_ssim", mean_ssim},
            {"sr", sr},
            {"n_images", images.size()},
            {"config_hash", config_hash}}},
          {"dataset", dataset},
          {"seed", seed},
          {"perceptual", perceptual}};
}

std::string MetricsReport::table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-32s | %9s | %6s\n", "image", "PSNR (dB)", "SSIM");
  os << line << std::string(53, '-') << '\n';
  for (const auto& m : images) {
    std::snprintf(line, sizeof line, "%-32s | %9.2f | %6.4f\n", m.id.c_str(), m.psnr_db, m.ssim);
    os << line;
  }
  os << std::string(53, '-') << '\n';
  std::snprintf(line, sizeof line, "%-32s | %9.2f | %6.4f\n", ("mean (SR=" + std::to_string(sr).substr(0, 6) + ")").c_str(),
                mean_psnr_db, mean_ssim);
  os << line;
  return os.str();
}

}  // namespace spi
