#include "spi/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "spi/error.hpp"
#include "spi/rng.hpp"

namespace spi {

namespace {

// Stream tags for mix_seed.
constexpr std::uint64_t kTagMask = 1;
constexpr std::uint64_t kTagGen = 2;
constexpr std::uint64_t kTagDisc = 3;
constexpr std::uint64_t kTagShuffle = 4;

void store_adam(Checkpoint& ckpt, const std::string& prefix, nn::Adam& opt) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = opt.first_moments()[i];
    const auto& v = opt.second_moments()[i];
    ckpt.arrays[prefix + ".m:" + params[i]->name].assign(m.begin(), m.end());
    ckpt.arrays[prefix + ".v:" + params[i]->name].assign(v.begin(), v.end());
  }
  ckpt.arrays[prefix + ".t"] = {static_cast<double>(opt.steps())};
}

void restore_adam(const Checkpoint& ckpt, const std::string& prefix, nn::Adam& opt) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = ckpt.array(prefix + ".m:" + params[i]->name);
    const auto& v = ckpt.array(prefix + ".v:" + params[i]->name);
    require(m.size() == params[i]->value.size() && v.size() == m.size(), ErrorCode::shape_mismatch,
            "optimizer state for '" + params[i]->name + "' has the wrong size");
    opt.first_moments()[i].assign(m.begin(), m.end());
    opt.second_moments()[i].assign(v.begin(), v.end());
  }
  opt.set_steps(static_cast<long long>(ckpt.array(prefix + ".t").at(0)));
}

void check_finite(const LossComponents& lc) {
  require(std::isfinite(lc.mse) && std::isfinite(lc.vgg) && std::isfinite(lc.adv) && std::isfinite(lc.total),
          ErrorCode::numerical,
          "non-finite training loss (mse=" + std::to_string(lc.mse) + ", vgg=" + std::to_string(lc.vgg) +
              ", adv=" + std::to_string(lc.adv) + ")");
}

nn::Tensor scores_tensor(std::span<const double> g) {
  nn::Tensor t(static_cast<int>(g.size()), 1, 1, 1);
  std::copy(g.begin(), g.end(), t.data.begin());
  return t;
}

}  // namespace

GeneratorConfig generator_config(const TrainConfig& cfg) {
  return {cfg.measurements(), cfg.image_size, cfg.image_size, cfg.channels(), cfg.gen_features};
}

DiscriminatorConfig discriminator_config(const TrainConfig& cfg) {
  return {cfg.image_size,        cfg.image_size, cfg.channels(), cfg.disc_features_low, cfg.disc_features_high,
          cfg.disc_hidden,       cfg.leaky_slope};
}

// ---------------------------------------------------------------- Model

Model::Model(const TrainConfig& cfg, bool with_discriminator)
    : mask(cfg.measurements(), cfg.image_size, cfg.image_size), gen(generator_config(cfg)) {
  if (with_discriminator) disc.emplace(discriminator_config(cfg));
}

void Model::init(std::uint64_t seed) {
  mask.init(mix_seed(seed, kTagMask));
  gen.init(mix_seed(seed, kTagGen));
  if (disc) disc->init(mix_seed(seed, kTagDisc));
}

void Model::store(Checkpoint& ckpt) const {
  auto& self = const_cast<Model&>(*this);
  ckpt.arrays[mask.weights().name].assign(mask.weights().value.begin(), mask.weights().value.end());
  for (auto* p : self.gen.params()) ckpt.arrays[p->name].assign(p->value.begin(), p->value.end());
  for (auto* b : self.gen.buffers()) ckpt.arrays[b->name].assign(b->value.begin(), b->value.end());
  if (disc) {
    for (auto* p : self.disc->params()) ckpt.arrays[p->name].assign(p->value.begin(), p->value.end());
    for (auto* b : self.disc->buffers()) ckpt.arrays[b->name].assign(b->value.begin(), b->value.end());
  }
}

void Model::restore(const Checkpoint& ckpt) {
  auto load = [&](const std::string& name, nn::Storage& dst) {
    const auto& src = ckpt.array(name);
    require(src.size() == dst.size(), ErrorCode::shape_mismatch,
            "checkpoint array '" + name + "' has " + std::to_string(src.size()) + " values, model expects " +
                std::to_string(dst.size()));
    dst.assign(src.begin(), src.end());
  };
  load(mask.weights().name, mask.weights().value);
  for (auto* p : gen.params()) load(p->name, p->value);
  for (auto* b : gen.buffers()) load(b->name, b->value);
  if (disc) {
    for (auto* p : disc->params()) load(p->name, p->value);
    for (auto* b : disc->buffers()) load(b->name, b->value);
  }
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch}, {"mse", mse},         {"vgg", vgg},           {"adv", adv},
          {"total", total}, {"d_loss", d_loss},   {"val_psnr", val_psnr}, {"d_updates", d_updates}};
}

nn::Tensor stack_images(const std::vector<Image>& images, std::span<const std::size_t> indices) {
  require(!indices.empty(), ErrorCode::invalid_argument, "cannot stack an empty batch");
  const Image& first = images.at(indices[0]);
  nn::Tensor t(static_cast<int>(indices.size()), first.channels, first.height, first.width);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Image& img = images.at(indices[i]);
    require(img.same_shape(first), ErrorCode::shape_mismatch, "batch images differ in shape");
    std::copy(img.pixels.begin(), img.pixels.end(), t.sample(static_cast<int>(i)));
  }
  return t;
}

nn::Tensor stack_images(const std::vector<Image>& images) {
  std::vector<std::size_t> idx(images.size());
  std::iota(idx.begin(), idx.end(), 0);
  return stack_images(images, idx);
}

Image tensor_image(const nn::Tensor& t, int sample) {
  Image img(t.h, t.w, t.c);
  std::copy(t.sample(sample), t.sample(sample) + t.sample_size(), img.pixels.begin());
  return img;
}

// ---------------------------------------------------------------- Trainer

Trainer::Trainer(const ExperimentConfig& cfg)
    : cfg_((validate(cfg), cfg)),
      model_(cfg.train, cfg.train.use_gan),
      extractor_(PerceptualExtractor::from_config(cfg.train.perceptual)),
      opt_mask_(cfg.train.lr_mask, cfg.train.adam_beta1, cfg.train.adam_beta2),
      opt_gen_(cfg.train.lr_gen, cfg.train.adam_beta1, cfg.train.adam_beta2),
      opt_disc_(cfg.train.lr_disc, cfg.train.adam_beta1, cfg.train.adam_beta2) {
  model_.init(cfg.train.seed);
  opt_mask_.bind({&model_.mask.weights()});
  opt_gen_.bind(model_.gen.params());
  if (model_.disc) opt_disc_.bind(model_.disc->params());
}

bool Trainer::adversarial_active() const { return cfg_.train.use_gan && epoch_ > cfg_.train.warmup_epochs; }

bool Trainer::discriminator_active() const {
  return adversarial_active() && (epoch_ - cfg_.train.warmup_epochs - 1) % cfg_.train.d_period_epochs == 0;
}

LossComponents Trainer::generator_step(const nn::Tensor& scenes) {
  const auto& t = cfg_.train;
  require(scenes.c == t.channels() && scenes.h == t.image_size && scenes.w == t.image_size && scenes.n >= 1,
          ErrorCode::shape_mismatch, "training batch does not match the configured image size / channels");
  std::vector<nn::Param*> gen_params = model_.gen.params();
  nn::Param* omega = &model_.mask.weights();
  nn::zero_grad(gen_params);
  nn::zero_grad({&omega, 1});

  const nn::Tensor meas = model_.mask.forward(scenes);
  nn::Tape gen_tape;
  nn::Tensor fake = model_.gen.forward(meas, nn::Mode::train, &gen_tape);

  LossComponents lc;
  nn::Tensor grad;
  lc.mse = mse_loss_batch(scenes, fake, &grad);
  nn::Tensor grad_vgg;
  lc.vgg = perceptual_loss_batch(extractor_, scenes, fake, &grad_vgg);
  for (std::size_t i = 0; i < grad.size(); ++i) grad.data[i] += grad_vgg.data[i];

  if (adversarial_active()) {
    // Batch statistics without touching the discriminator's running averages.
    nn::Tape d_tape;
    const nn::Tensor scores = model_.disc->forward(fake, nn::Mode::train, &d_tape);
    std::vector<double> g(scores.size());
    lc.adv = adversarial_loss_g_grad(scores.data, g);
    const nn::Tensor dx = model_.disc->backward(scores_tensor(g), d_tape);
    for (std::size_t i = 0; i < grad.size(); ++i) grad.data[i] += t.lambda_adv * dx.data[i];
  }
  lc.total = lc.mse + lc.vgg + t.lambda_adv * lc.adv;
  check_finite(lc);

  model_.gen.commit(gen_tape);
  const nn::Tensor dmeas = model_.gen.backward(grad, gen_tape);
  model_.mask.backward(dmeas, scenes);
  opt_mask_.step();
  opt_gen_.step();
  last_fake_ = std::move(fake);
  return lc;
}

double Trainer::discriminator_step(const nn::Tensor& real, const nn::Tensor& fake) {
  require(cfg_.train.use_gan, ErrorCode::state, "discriminator step requested with use_gan disabled");
  require(epoch_ > cfg_.train.warmup_epochs, ErrorCode::state,
          "discriminator step requested during warm-up (epoch " + std::to_string(epoch_) + " <= " +
              std::to_string(cfg_.train.warmup_epochs) + ")");
  require(real.same_shape(fake), ErrorCode::shape_mismatch, "real and fake batches differ in shape");
  auto& disc = *model_.disc;
  std::vector<nn::Param*> params = disc.params();
  nn::zero_grad(params);

  nn::Tape tape_real;
  nn::Tape tape_fake;
  const nn::Tensor s_real = disc.forward(real, nn::Mode::train, &tape_real);
  const nn::Tensor s_fake = disc.forward(fake, nn::Mode::train, &tape_fake);
  std::vector<double> g_real(s_real.size());
  std::vector<double> g_fake(s_fake.size());
  const double loss = discriminator_loss_grad(s_real.data, s_fake.data, g_real, g_fake);
  require(std::isfinite(loss), ErrorCode::numerical, "non-finite discriminator loss");

  disc.backward(scores_tensor(g_real), tape_real);
  disc.backward(scores_tensor(g_fake), tape_fake);
  disc.commit(tape_real);
  disc.commit(tape_fake);
  last_d_grad_norm_ = nn::grad_norm(params);
  opt_disc_.step();
  ++d_updates_;
  return loss;
}

double Trainer::validation_psnr(const std::vector<Image>& val) const {
  require(!val.empty(), ErrorCode::invalid_argument, "empty validation set");
  constexpr std::size_t kChunk = 64;
  double sum = 0.0;
  for (std::size_t start = 0; start < val.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, val.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const nn::Tensor x = stack_images(val, idx);
    const nn::Tensor out = model_.gen.infer(model_.mask.forward(x));
    for (std::size_t i = 0; i < idx.size(); ++i) sum += psnr(val[idx[i]], tensor_image(out, static_cast<int>(i)));
  }
  return sum / static_cast<double>(val.size());
}

Checkpoint Trainer::checkpoint(const std::vector<EpochRecord>& history) const {
  Checkpoint c;
  c.config = config_to_json(cfg_);
  c.epoch = epoch_;
  for (const auto& r : history) c.history.push_back(r.to_json());
  model_.store(c);
  auto& self = const_cast<Trainer&>(*this);
  store_adam(c, "opt.mask", self.opt_mask_);
  store_adam(c, "opt.gen", self.opt_gen_);
  if (model_.disc) store_adam(c, "opt.disc", self.opt_disc_);
  c.arrays["trainer.d_updates"] = {static_cast<double>(d_updates_)};
  return c;
}

void Trainer::restore(const Checkpoint& ckpt) {
  require(config_hash(config_from_json(ckpt.config)) == config_hash(cfg_), ErrorCode::state,
          "checkpoint was written with a different config");
  model_.restore(ckpt);
  restore_adam(ckpt, "opt.mask", opt_mask_);
  restore_adam(ckpt, "opt.gen", opt_gen_);
  if (model_.disc) restore_adam(ckpt, "opt.disc", opt_disc_);
  d_updates_ = static_cast<long long>(ckpt.array("trainer.d_updates").at(0));
  epoch_ = static_cast<int>(ckpt.epoch);
}

TrainResult Trainer::train(const std::vector<Image>& train, const std::vector<Image>& val,
                           const std::function<void(const EpochRecord&)>& on_epoch) {
  require(!train.empty(), ErrorCode::invalid_argument, "empty training set");
  const auto& t = cfg_.train;
  TrainResult res;
  epoch_ = 0;
  Checkpoint last_good = checkpoint();
  res.best = last_good;
  res.best_val_psnr = -std::numeric_limits<double>::infinity();
  Rng shuffle_rng(mix_seed(t.seed, kTagShuffle));
  std::vector<std::size_t> order(train.size());

  for (int e = 1; e <= t.epochs; ++e) {
    epoch_ = e;
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order.begin(), order.end());
    EpochRecord rec;
    rec.epoch = e;
    double d_sum = 0.0;
    long long d_steps = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += t.batch_size) {
        const std::size_t b = std::min<std::size_t>(t.batch_size, order.size() - start);
        const nn::Tensor x = stack_images(train, std::span<const std::size_t>(order).subspan(start, b));
        const LossComponents lc = generator_step(x);
        rec.mse += lc.mse * b;
        rec.vgg += lc.vgg * b;
        rec.adv += lc.adv * b;
        rec.total += lc.total * b;
        if (discriminator_active())
          for (int k = 0; k < t.d_steps_per_g_step; ++k) {
            d_sum += discriminator_step(x, last_fake_);
            ++d_steps;
          }
      }
      rec.val_psnr = val.empty() ? 0.0 : validation_psnr(val);
      require(std::isfinite(rec.val_psnr), ErrorCode::numerical, "validation PSNR is not finite");
    } catch (const Error& err) {
      if (err.code() != ErrorCode::numerical) throw;
      res.aborted = true;
      res.abort_reason = "epoch " + std::to_string(e) + ": " + err.what();
      res.last = std::move(last_good);
      return res;
    }
    const double n = static_cast<double>(train.size());
    rec.mse /= n;
    rec.vgg /= n;
    rec.adv /= n;
    rec.total /= n;
    rec.d_loss = d_steps ? d_sum / d_steps : 0.0;
    rec.d_updates = d_updates_;
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    last_good = checkpoint(res.history);
    if (val.empty() || rec.val_psnr > res.best_val_psnr) {
      res.best_val_psnr = rec.val_psnr;
      res.best = last_good;
    }
  }
  res.last = std::move(last_good);
  return res;
}

// ---------------------------------------------------------------- inference

MeasurementVector rgb_measure_concat(const Image& scene, const MaskSet& masks, const NoiseConfig& noise) {
  require(scene.channels == 3, ErrorCode::shape_mismatch, "rgb_measure_concat expects a 3-channel scene");
  MeasurementVector out;
  out.noise_sigma = noise.sigma;
  out.values.reserve(3 * static_cast<std::size_t>(masks.count));
  for (int c = 0; c < 3; ++c) {
    const auto part = forward_measure(scene.channel(c), masks, {noise.sigma, mix_seed(noise.seed, c)});
    out.values.insert(out.values.end(), part.values.begin(), part.values.end());
  }
  return out;
}

Reconstructor::Reconstructor(const Checkpoint& ckpt)
    : cfg_(config_from_json(ckpt.config)),
      config_hash_(config_hash(cfg_)),
      perceptual_(describe_perceptual(cfg_.train.perceptual)),
      model_(cfg_.train, false) {
  model_.restore(ckpt);
  masks_ = model_.mask.masks();
}

MeasurementVector Reconstructor::measure(const Image& scene, const NoiseConfig& noise) const {
  require(scene.height == image_size() && scene.width == image_size(), ErrorCode::shape_mismatch,
          "scene is " + std::to_string(scene.height) + "x" + std::to_string(scene.width) + ", checkpoint expects " +
              std::to_string(image_size()) + "x" + std::to_string(image_size()));
  require(scene.channels == channels(), ErrorCode::shape_mismatch, "scene channel count differs from the checkpoint");
  return channels() == 3 ? rgb_measure_concat(scene, masks_, noise) : forward_measure(scene, masks_, noise);
}

Reconstruction Reconstructor::reconstruct(const MeasurementVector& measurements) const {
  const std::size_t expected = static_cast<std::size_t>(channels()) * masks_.count;
  require(measurements.values.size() == expected, ErrorCode::shape_mismatch,
          "measurement vector has length " + std::to_string(measurements.values.size()) + ", checkpoint expects " +
              std::to_string(expected));
  nn::Tensor in(1, static_cast<int>(expected), 1, 1);
  in.data.assign(measurements.values.begin(), measurements.values.end());
  const auto t0 = std::chrono::steady_clock::now();
  const nn::Tensor out = model_.gen.infer(in);
  const auto t1 = std::chrono::steady_clock::now();
  return {tensor_image(out, 0), std::chrono::duration<double, std::milli>(t1 - t0).count()};
}

MetricsReport Reconstructor::evaluate(const std::vector<NamedImage>& images, const NoiseConfig& noise,
                                      const std::string& dataset, double* mean_latency_ms) const {
  require(!images.empty(), ErrorCode::invalid_argument, "evaluation dataset is empty");
  MetricsReport report;
  report.sr = cfg_.train.sr;
  report.config_hash = config_hash_;
  report.dataset = dataset;
  report.seed = cfg_.train.seed;
  report.perceptual = perceptual_;
  double latency = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i].image;
    const auto meas = measure(img, {noise.sigma, mix_seed(noise.seed, i)});
    const auto rec = reconstruct(meas);
    latency += rec.latency_ms;
    report.images.push_back({images[i].id, psnr(img, rec.scene), ssim(img, rec.scene)});
  }
  report.aggregate();
  if (mean_latency_ms) *mean_latency_ms = latency / static_cast<double>(images.size());
  return report;
}

// ---------------------------------------------------------------- previews

Raster8 mask_preview(const MaskSet& masks, int max_masks, int scale) {
  const int n = std::min(masks.count, std::max(1, max_masks));
  const int cols = std::min(n, 4);
  const int rows = (n + cols - 1) / cols;
  const int gap = 2;
  const int cell_w = masks.width * scale;
  const int cell_h = masks.height * scale;
  Raster8 r{rows * cell_h + (rows + 1) * gap, cols * cell_w + (cols + 1) * gap, 1, {}};
  r.samples.assign(static_cast<std::size_t>(r.width) * r.height, 128);
  for (int m = 0; m < n; ++m) {
    const int oy = gap + (m / cols) * (cell_h + gap);
    const int ox = gap + (m % cols) * (cell_w + gap);
    const auto mask = masks.mask(m);
    for (int y = 0; y < cell_h; ++y)
      for (int x = 0; x < cell_w; ++x)
        r.samples[static_cast<std::size_t>(oy + y) * r.width + ox + x] =
            mask[static_cast<std::size_t>(y / scale) * masks.width + x / scale] > 0 ? 255 : 0;
  }
  return r;
}

Raster8 plot_curves(const std::vector<std::vector<double>>& series, int width, int height) {
  Raster8 r{height, width, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height, 0)};
  const int margin = 8;
  auto set = [&](int x, int y, std::uint8_t v) {
    if (x >= 0 && x < width && y >= 0 && y < height) r.samples[static_cast<std::size_t>(y) * width + x] = v;
  };
  for (int x = margin; x < width - margin; ++x) set(x, height - margin, 90);
  for (int y = margin; y <= height - margin; ++y) set(margin, y, 90);

  const std::uint8_t shades[] = {255, 170, 120, 210};
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& v = series[s];
    if (v.size() < 2) continue;
    const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    const double lo = *lo_it;
    const double span = *hi_it - lo > 0 ? *hi_it - lo : 1.0;
    auto px = [&](std::size_t i) { return margin + static_cast<int>(std::lround(i * (width - 2.0 * margin) / (v.size() - 1))); };
    auto py = [&](std::size_t i) {
      return height - margin - static_cast<int>(std::lround((v[i] - lo) / span * (height - 2.0 * margin)));
    };
    for (std::size_t i = 1; i < v.size(); ++i) {
      int x0 = px(i - 1), y0 = py(i - 1);
      const int x1 = px(i), y1 = py(i);
      const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
      const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
      int err = dx + dy;
      while (true) {
        set(x0, y0, shades[s % 4]);
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
          err += dy;
          x0 += sx;
        }
        if (e2 <= dx) {
          err += dx;
          y0 += sy;
        }
      }
    }
  }
  return r;
}

}  // namespace spi
