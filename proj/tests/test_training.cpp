#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "spi/checkpoint.hpp"
#include "spi/config.hpp"
#include "spi/error.hpp"
#include "spi/hash.hpp"
#include "spi/training.hpp"
#include "support.hpp"

using namespace spi;

namespace {

ExperimentConfig tiny(bool gan) {
  ExperimentConfig c;
  auto& t = c.train;
  t.sr = 0.1;
  t.image_size = 16;
  t.gen_features = 4;
  t.disc_features_low = 4;
  t.disc_features_high = 8;
  t.disc_hidden = 16;
  t.batch_size = 4;
  t.epochs = 3;
  t.warmup_epochs = 1;
  t.use_gan = gan;
  t.seed = 5;
  t.perceptual.kind = "identity";
  c.data.image_size = 16;
  c.data.synth_count = 20;
  c.data.seed = 2;
  return c;
}

std::uint64_t hash_params(const std::vector<nn::Param*>& params) {
  std::uint64_t h = fnv1a64(std::string_view{});
  for (auto* p : params) h = fnv1a64(p->value.data(), p->value.size() * sizeof(double), h);
  return h;
}

std::vector<nn::Param*> mask_and_gen(Model& m) {
  auto params = m.gen.params();
  params.push_back(&m.mask.weights());
  return params;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults follow the published settings") {
    const TrainConfig t;
    CHECK(t.lr_mask == 1e-5);
    CHECK(t.lr_gen == 1e-4);
    CHECK(t.lr_disc == 1e-5);
    CHECK(t.adam_beta1 == 0.9);
    CHECK(t.adam_beta2 == 0.99);
    CHECK(t.warmup_epochs == 4);
    CHECK(t.batch_size == 32);
    CHECK(t.lambda_adv == 0.05);
    CHECK(t.image_size == 128);
    CHECK(ExperimentConfig{}.data.split_ratio == 0.9);
  }

  TEST_CASE("validation messages") {
    auto c = tiny(false);
    c.train.sr = 1.5;
    try {
      validate(c);
      FAIL("expected rejection");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("invalid sampling rate") != std::string::npos);
      CHECK(e.code() == ErrorCode::invalid_argument);
    }
    c = tiny(false);
    c.train.image_size = 18;
    c.data.image_size = 18;
    CHECK_THROWS_AS(validate(c), Error);
    c = tiny(false);
    c.train.lr_gen = 0.0;
    CHECK_THROWS_AS(validate(c), Error);
    c = tiny(false);
    c.train.epochs = 0;
    CHECK_THROWS_AS(validate(c), Error);
  }

  TEST_CASE("JSON round trip, overrides and unknown keys") {
    auto c = tiny(true);
    const auto j = config_to_json(c);
    const auto back = config_from_json(j);
    CHECK(config_to_json(back) == j);
    CHECK(config_hash(back) == config_hash(c));

    apply_override(c, "sr", "0.05");
    CHECK(c.train.sr == 0.05);
    apply_override(c, "use_gan", "false");
    CHECK_FALSE(c.train.use_gan);
    apply_override(c, "out_dir", "runs/a");
    CHECK(c.out_dir == "runs/a");
    apply_override(c, "image_size", "32");
    CHECK(c.data.image_size == 32);
    CHECK(config_hash(c) != config_hash(back));
    CHECK_THROWS_AS(apply_override(c, "learning_rate", "1"), Error);
    CHECK_THROWS_AS(apply_override(c, "epochs", "\"many\""), Error);
    auto bad = j;
    bad["bogus"] = 1;
    CHECK_THROWS_AS(config_from_json(bad), Error);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("serialization is bit-exact and corruption is detected") {
    Checkpoint c;
    c.config = {{"sr", 0.1}};
    c.history = nlohmann::json::array({{{"epoch", 1}}});
    c.epoch = 7;
    c.arrays["a"] = {0.1, -0.0, 1e-308, std::nextafter(1.0, 2.0)};
    c.arrays["b"] = {};
    const auto bytes = c.serialize();
    const auto back = Checkpoint::deserialize(bytes);
    CHECK(back.epoch == 7);
    CHECK(back.config == c.config);
    CHECK(back.history == c.history);
    CHECK(back.serialize() == bytes);
    CHECK(std::signbit(back.array("a")[1]));
    CHECK(back.array("a")[3] == std::nextafter(1.0, 2.0));
    CHECK_THROWS_AS(back.array("missing"), Error);

    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x01;
    CHECK_THROWS_AS(Checkpoint::deserialize(flipped), Error);
    CHECK_THROWS_AS(Checkpoint::deserialize(bytes.substr(0, 20)), Error);
    CHECK_THROWS_AS(Checkpoint::deserialize("NOTACKPT" + bytes.substr(8)), Error);

    const auto dir = spitest::scratch_dir("ckpt");
    c.save(dir / "c.spck");
    CHECK(Checkpoint::load(dir / "c.spck").serialize() == bytes);
    CHECK_THROWS_AS(Checkpoint::load(dir / "none.spck"), Error);
  }
}

TEST_SUITE("generator step") {
  TEST_CASE("loss components are finite and non-negative; adv is zero without GAN") {
    Trainer t(tiny(false));
    const auto x = stack_images(synth_shapes(4, 16, 1));
    for (int e = 1; e <= 3; ++e) {
      t.set_epoch(e);
      const auto lc = t.generator_step(x);
      CHECK(std::isfinite(lc.total));
      CHECK(lc.mse >= 0.0);
      CHECK(lc.vgg >= 0.0);
      CHECK(lc.adv == 0.0);
      CHECK(lc.total == doctest::Approx(lc.mse + lc.vgg));
    }
  }

  TEST_CASE("adversarial term enters only after warm-up") {
    Trainer t(tiny(true));
    const auto x = stack_images(synth_shapes(4, 16, 1));
    t.set_epoch(1);
    CHECK(t.generator_step(x).adv == 0.0);
    t.set_epoch(2);
    const auto lc = t.generator_step(x);
    CHECK(lc.adv > 0.0);
    CHECK(lc.total == doctest::Approx(lc.mse + lc.vgg + 0.05 * lc.adv));
  }

  TEST_CASE("one step on a single image usually reduces its loss") {
    const auto scenes = synth_shapes(100, 16, 77);
    int improved = 0;
    for (int trial = 0; trial < 100; ++trial) {
      auto c = tiny(false);
      c.train.seed = 1000 + trial;
      Trainer t(c);
      const auto x = stack_images(scenes, std::vector<std::size_t>{static_cast<std::size_t>(trial)});
      const double before = t.generator_step(x).total;  // loss at the initial parameters
      const double after = t.generator_step(x).total;   // loss after one update
      improved += after < before;
    }
    CHECK(improved >= 95);
  }

  TEST_CASE("shape mismatch") {
    Trainer t(tiny(false));
    CHECK_THROWS_AS(t.generator_step(nn::Tensor(2, 1, 8, 8)), Error);
  }
}

TEST_SUITE("discriminator step") {
  TEST_CASE("freezes generator and masks; loss finite and non-negative") {
    Trainer t(tiny(true));
    const auto x = stack_images(synth_shapes(4, 16, 1));
    t.set_epoch(2);
    t.generator_step(x);
    const auto before = hash_params(mask_and_gen(t.model()));
    const auto d_before = hash_params(t.model().disc->params());
    const double loss = t.discriminator_step(x, t.last_fake());
    CHECK(std::isfinite(loss));
    CHECK(loss >= 0.0);
    CHECK(hash_params(mask_and_gen(t.model())) == before);
    CHECK(hash_params(t.model().disc->params()) != d_before);
    CHECK(t.discriminator_updates() == 1);
    CHECK(t.last_discriminator_grad_norm() > 0.0);
  }

  TEST_CASE("rejected during warm-up and when GAN is disabled") {
    const auto x = stack_images(synth_shapes(4, 16, 1));
    Trainer gan(tiny(true));
    gan.set_epoch(1);
    try {
      gan.discriminator_step(x, x);
      FAIL("expected a state error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::state);
    }
    Trainer plain(tiny(false));
    plain.set_epoch(5);
    CHECK_THROWS_AS(plain.discriminator_step(x, x), Error);
  }

  TEST_CASE("schedule knobs") {
    auto c = tiny(true);
    c.train.warmup_epochs = 4;
    c.train.d_period_epochs = 4;
    Trainer t(c);
    std::vector<int> active;
    for (int e = 1; e <= 13; ++e) {
      t.set_epoch(e);
      if (t.discriminator_active()) active.push_back(e);
    }
    CHECK(active == std::vector<int>{5, 9, 13});
  }
}

TEST_SUITE("train") {
  TEST_CASE("warm-up contract, determinism, binary masks and checkpoints") {
    auto c = tiny(true);
    c.train.warmup_epochs = 2;
    c.train.epochs = 3;
    const auto parts = split(load_dataset(c.data), c.data.split_ratio, c.data.seed);

    Trainer t1(c);
    std::vector<long long> updates;
    bool binary = true;
    const auto r1 = t1.train(parts.train, parts.val, [&](const EpochRecord& e) {
      updates.push_back(e.d_updates);
      for (auto v : t1.model().mask.masks().entries) binary = binary && (v == 1 || v == -1);
    });
    CHECK_FALSE(r1.aborted);
    CHECK(updates == std::vector<long long>{0, 0, 5});
    CHECK(binary);
    CHECK(r1.history.size() == 3);
    CHECK(r1.last.epoch == 3);
    CHECK(r1.last.history.size() == 3);
    CHECK(r1.best.epoch >= 1);
    for (const auto& e : r1.history) {
      CHECK(std::isfinite(e.val_psnr));
      CHECK(e.adv >= 0.0);
    }

    Trainer t2(c);
    const auto r2 = t2.train(parts.train, parts.val);
    CHECK(r2.last.serialize() == r1.last.serialize());
    for (std::size_t i = 0; i < r1.history.size(); ++i) CHECK(r1.history[i].total == r2.history[i].total);
  }

  TEST_CASE("restoring a checkpoint reproduces trainer state") {
    auto c = tiny(true);
    c.train.epochs = 2;
    const auto parts = split(load_dataset(c.data), c.data.split_ratio, c.data.seed);
    Trainer t(c);
    const auto r = t.train(parts.train, parts.val);
    Trainer fresh(c);
    fresh.restore(r.last);
    CHECK(fresh.checkpoint(r.history).serialize() == r.last.serialize());
    auto other = c;
    other.train.seed = 99;
    Trainer mismatched(other);
    CHECK_THROWS_AS(mismatched.restore(r.last), Error);
  }

  TEST_CASE("non-finite loss aborts with the last good checkpoint") {
    const auto c = tiny(false);
    auto scenes = synth_shapes(8, 16, 3);
    scenes[5].pixels[10] = std::nan("");
    Trainer t(c);
    const auto r = t.train(scenes, {});
    CHECK(r.aborted);
    CHECK(r.abort_reason.find("non-finite") != std::string::npos);
    CHECK(r.last.epoch == 0);
    CHECK(r.history.empty());
  }

  TEST_CASE("training MSE trends down over the first ten epochs") {
    auto c = tiny(false);
    c.train.epochs = 10;
    c.data.synth_count = 40;
    const auto parts = split(load_dataset(c.data), c.data.split_ratio, c.data.seed);
    Trainer t(c);
    const auto r = t.train(parts.train, parts.val);
    std::vector<double> smooth;
    for (std::size_t i = 1; i + 1 < r.history.size(); ++i)
      smooth.push_back((r.history[i - 1].mse + r.history[i].mse + r.history[i + 1].mse) / 3);
    for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] < smooth[i - 1]);
  }

  TEST_CASE("empty training set") {
    Trainer t(tiny(false));
    CHECK_THROWS_AS(t.train({}, {}), Error);
  }
}

TEST_SUITE("inference") {
  struct Trained {
    Checkpoint ckpt;
    std::vector<Image> val;
    double val_psnr;
  };

  Trained trained(bool rgb) {
    auto c = tiny(false);
    c.train.rgb = rgb;
    c.data.grayscale = !rgb;
    c.train.epochs = 2;
    const auto parts = split(load_dataset(c.data), c.data.split_ratio, c.data.seed);
    Trainer t(c);
    const auto r = t.train(parts.train, parts.val);
    return {r.last, parts.val, r.history.back().val_psnr};
  }

  TEST_CASE("reconstruction contract and cross-module consistency") {
    const auto tr = trained(false);
    const Reconstructor rec(tr.ckpt);
    CHECK(rec.measurements() == 25);
    double mean = 0.0;
    for (const auto& scene : tr.val) {
      const auto meas = rec.measure(scene, {});
      CHECK(meas.values == forward_measure(scene, rec.masks()).values);
      const auto out = rec.reconstruct(meas);
      CHECK(out.scene.height == 16);
      CHECK(out.scene.width == 16);
      CHECK(out.scene.in_unit_range());
      CHECK(out.latency_ms >= 0.0);
      CHECK(rec.reconstruct(meas).scene.pixels == out.scene.pixels);
      mean += psnr(scene, out.scene) / tr.val.size();
    }
    CHECK(mean >= tr.val_psnr - 3.0);

    MeasurementVector wrong;
    wrong.values.assign(24, 0.0);
    CHECK_THROWS_AS(rec.reconstruct(wrong), Error);
    CHECK_THROWS_AS(rec.measure(Image(8, 8), {}), Error);
  }

  TEST_CASE("evaluation reports survive a checkpoint round trip bit-exactly") {
    const auto tr = trained(false);
    std::vector<NamedImage> set;
    for (std::size_t i = 0; i < tr.val.size(); ++i) set.push_back({"v" + std::to_string(i), tr.val[i]});
    const auto a = Reconstructor(tr.ckpt).evaluate(set, {0.01, 3}, "val");
    const auto b = Reconstructor(Checkpoint::deserialize(tr.ckpt.serialize())).evaluate(set, {0.01, 3}, "val");
    CHECK(a.to_json().dump() == b.to_json().dump());
    CHECK(a.images.size() == set.size());
    CHECK(a.to_json()["aggregate"]["n_images"] == set.size());
    CHECK_THROWS_AS(Reconstructor(tr.ckpt).evaluate({}, {}, "none"), Error);
  }

  TEST_CASE("RGB measurement concatenation") {
    Rng rng(3);
    const auto masks = spitest::random_masks(rng, 7, 16, 16);
    const auto gray = spitest::random_scene(rng, 16, 16);
    const auto rep = rgb_measure_concat(replicate_rgb(gray), masks, {});
    REQUIRE(rep.values.size() == 21);
    for (int m = 0; m < 7; ++m) {
      CHECK(rep.values[m] == rep.values[7 + m]);
      CHECK(rep.values[m] == rep.values[14 + m]);
    }
    const auto rgb = spitest::random_scene(rng, 16, 16, 3);
    const auto cat = rgb_measure_concat(rgb, masks, {0.2, 9});
    for (int c = 0; c < 3; ++c) {
      const auto part = forward_measure(rgb.channel(c), masks, {0.2, mix_seed(9, c)}).values;
      for (int m = 0; m < 7; ++m) CHECK(std::abs(cat.values[c * 7 + m] - part[m]) < 1e-9);
    }
    CHECK_THROWS_AS(rgb_measure_concat(gray, masks, {}), Error);
  }

  TEST_CASE("RGB models measure 3M values and output three channels") {
    const auto tr = trained(true);
    const Reconstructor rec(tr.ckpt);
    CHECK(rec.channels() == 3);
    const auto meas = rec.measure(tr.val[0], {});
    CHECK(meas.values.size() == 75u);
    CHECK(rec.reconstruct(meas).scene.channels == 3);
  }
}

TEST_SUITE("previews") {
  TEST_CASE("mask grid and curve plot sizes") {
    MaskLayer layer(20, 8, 8);
    layer.init(1);
    const auto grid = mask_preview(layer.masks(), 16, 4);
    CHECK(grid.width == 4 * 32 + 5 * 2);
    CHECK(grid.height == 4 * 32 + 5 * 2);
    for (auto v : grid.samples) REQUIRE((v == 0 || v == 128 || v == 255));
    const auto plot = plot_curves({{3, 2, 1}, {1, 2}}, 100, 50);
    CHECK(plot.width == 100);
    CHECK(plot.height == 50);
  }
}
