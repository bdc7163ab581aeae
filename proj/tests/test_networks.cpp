#include <cmath>
#include <set>

#include "doctest.h"
#include "spi/error.hpp"
#include "spi/imaging.hpp"
#include "spi/networks.hpp"
#include "spi/nn.hpp"
#include "support.hpp"

using namespace spi;

namespace {

nn::Tensor random_tensor(Rng& rng, int n, int c, int h, int w, double lo = 0.0, double hi = 1.0) {
  nn::Tensor t(n, c, h, w);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

double weighted_sum(const nn::Tensor& t, const std::vector<double>& c) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += c[i] * t.data[i];
  return s;
}

nn::Param* find_param(std::vector<nn::Param*> params, const std::string& name) {
  for (auto* p : params)
    if (p->name == name) return p;
  FAIL("no parameter " << name);
  return nullptr;
}

}  // namespace

TEST_SUITE("ste_gradient") {
  TEST_CASE("examples") {
    CHECK(ste_gradient(std::vector<double>{2.0}, std::vector<double>{0.5}) == std::vector<double>{2.0});
    CHECK(ste_gradient(std::vector<double>{2.0}, std::vector<double>{1.5}) == std::vector<double>{0.0});
    CHECK(ste_gradient(std::vector<double>{1, 1, 1}, std::vector<double>{0.9, -1.0, -1.1}) ==
          std::vector<double>{1, 1, 0});
  }

  TEST_CASE("clip rule on an exhaustive grid over [-2, 2]") {
    std::vector<double> w, up;
    for (int k = -2048; k <= 2048; ++k) {
      w.push_back(k / 1024.0);
      up.push_back(0.25 + (k % 7));
    }
    const auto g = ste_gradient(up, w);
    for (std::size_t i = 0; i < w.size(); ++i) REQUIRE(g[i] == (std::abs(w[i]) <= 1.0 ? up[i] : 0.0));
  }

  TEST_CASE("shape mismatch") {
    CHECK_THROWS_AS(ste_gradient(std::vector<double>{1, 2}, std::vector<double>{1}), Error);
  }
}

TEST_SUITE("mask_layer") {
  TEST_CASE("initialization: shape, range, determinism, both signs") {
    MaskLayer a(40, 64, 64), b(40, 64, 64);
    a.init(7);
    b.init(7);
    CHECK(a.weights().value.size() == 40u * 4096u);
    CHECK(a.weights().value == b.weights().value);
    for (double v : a.weights().value) REQUIRE((v >= -0.1 && v <= 0.1));
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      MaskLayer m(1, 10, 10);
      m.init(seed);
      const auto masks = m.masks();
      const std::set<int> signs(masks.entries.begin(), masks.entries.end());
      CHECK(signs == std::set<int>{-1, 1});
    }
    CHECK_THROWS_AS(MaskLayer(0, 4, 4), Error);
  }

  TEST_CASE("forward equals the physical forward model") {
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
      const int h = 8 + static_cast<int>(rng.below(57));
      const int w = 8 + static_cast<int>(rng.below(57));
      MaskLayer layer(1 + static_cast<int>(rng.below(30)), h, w);
      layer.init(rng.next());
      const int batch = 1 + static_cast<int>(rng.below(4));
      const auto x = random_tensor(rng, batch, 1, h, w);
      const auto y = layer.forward(x);
      CHECK(y.n == batch);
      CHECK(y.c == layer.count());
      const auto masks = layer.masks();
      for (int b = 0; b < batch; ++b) {
        Image scene(h, w);
        std::copy(x.sample(b), x.sample(b) + x.sample_size(), scene.pixels.begin());
        const auto want = forward_measure(scene, masks).values;
        for (int m = 0; m < layer.count(); ++m) CHECK(std::abs(y.sample(b)[m] - want[m]) < 1e-9);
      }
    }
  }

  TEST_CASE("zero scene, RGB blocks and shape errors") {
    Rng rng(4);
    MaskLayer layer(5, 6, 6);
    layer.init(1);
    for (double v : layer.forward(nn::Tensor(2, 1, 6, 6)).data) CHECK(v == 0.0);
    const auto rgb = random_tensor(rng, 1, 3, 6, 6);
    const auto y = layer.forward(rgb);
    CHECK(y.c == 15);
    for (int c = 0; c < 3; ++c) {
      nn::Tensor one(1, 1, 6, 6);
      std::copy(rgb.data.begin() + c * 36, rgb.data.begin() + (c + 1) * 36, one.data.begin());
      const auto yc = layer.forward(one);
      for (int m = 0; m < 5; ++m) CHECK(std::abs(y.data[c * 5 + m] - yc.data[m]) < 1e-12);
    }
    CHECK_THROWS_AS(layer.forward(nn::Tensor(1, 1, 6, 7)), Error);
  }

  TEST_CASE("positive rescaling of the weights leaves the masks unchanged") {
    MaskLayer layer(12, 8, 8);
    layer.init(5);
    const auto before = layer.masks().entries;
    for (auto& v : layer.weights().value) v *= 37.5;
    CHECK(layer.masks().entries == before);
  }

  TEST_CASE("backward is the clipped straight-through gradient of g^T x") {
    Rng rng(6);
    MaskLayer layer(4, 5, 5);
    layer.init(2);
    auto& w = layer.weights().value;
    w[0] = 1.5;
    w[7] = -3.0;
    const auto x = random_tensor(rng, 3, 1, 5, 5);
    const auto g = random_tensor(rng, 3, 4, 1, 1, -1, 1);
    std::fill(layer.weights().grad.begin(), layer.weights().grad.end(), 0.0);
    layer.backward(g, x);
    for (int m = 0; m < 4; ++m)
      for (int p = 0; p < 25; ++p) {
        double want = 0.0;
        for (int b = 0; b < 3; ++b) want += g.sample(b)[m] * x.sample(b)[p];
        if (std::abs(w[m * 25 + p]) > 1.0) want = 0.0;
        CHECK(layer.weights().grad[m * 25 + p] == doctest::Approx(want).epsilon(1e-12));
      }
  }
}

TEST_SUITE("generator") {
  TEST_CASE("architecture: seven weight-bearing layers and parameter count") {
    for (int ch : {1, 3}) {
      const GeneratorConfig cfg{40, 32, 32, ch, 16};
      Generator g(cfg);
      CHECK(g.weight_bearing_layers() == 7);
      const std::size_t M = 40 * ch, K = 32 * 32 * ch, F = 16;
      std::size_t want = M * K + K;                 // affine
      want += 9 * ch * F + F + 2 * F;               // block 1
      want += 4 * (9 * F * F + F + 2 * F);          // blocks 2-5
      want += 9 * F * ch + ch;                      // head
      CHECK(nn::parameter_count(g.params()) == want);
      CHECK(Generator::expected_parameter_count(cfg) == want);
    }
  }

  TEST_CASE("shapes, evaluation determinism and clamping") {
    Rng rng(2);
    Generator g({6, 8, 8, 1, 4});
    g.init(11);
    const auto x = random_tensor(rng, 3, 6, 1, 1, -5, 5);
    const auto y = g.forward(x, nn::Mode::train, nullptr);
    CHECK(y.n == 3);
    CHECK(y.c == 1);
    CHECK(y.h == 8);
    CHECK(y.w == 8);
    const auto e1 = g.infer(x);
    const auto e2 = g.infer(x);
    CHECK(e1.data == e2.data);
    for (double v : e1.data) REQUIRE((v >= 0.0 && v <= 1.0));
    CHECK_THROWS_AS(g.infer(nn::Tensor(1, 7, 1, 1)), Error);

    Generator g2({6, 8, 8, 1, 4});
    g2.init(11);
    CHECK(g2.infer(x).data == e1.data);
  }

  TEST_CASE("analytic gradients match central differences") {
    Rng rng(5);
    Generator g({6, 8, 8, 1, 4});
    g.init(3);
    const auto x = random_tensor(rng, 3, 6, 1, 1, -2, 2);
    std::vector<double> c(3 * 64);
    for (auto& v : c) v = rng.uniform(-1, 1);

    auto params = g.params();
    nn::zero_grad(params);
    nn::Tape tape;
    const auto y = g.forward(x, nn::Mode::train, &tape);
    nn::Tensor gy(y.n, y.c, y.h, y.w);
    gy.data.assign(c.begin(), c.end());
    g.backward(gy, tape);

    const double h = 1e-6;
    for (const char* name : {"gen.fc.weight", "gen.fc.bias", "gen.block3.conv.weight", "gen.block5.bn.gamma",
                             "gen.head.weight"}) {
      auto* p = find_param(params, name);
      for (int t = 0; t < 25; ++t) {
        const std::size_t i = rng.below(p->value.size());
        const double orig = p->value[i];
        p->value[i] = orig + h;
        const double up = weighted_sum(g.forward(x, nn::Mode::train, nullptr), c);
        p->value[i] = orig - h;
        const double down = weighted_sum(g.forward(x, nn::Mode::train, nullptr), c);
        p->value[i] = orig;
        const double numeric = (up - down) / (2 * h);
        INFO(name << "[" << i << "] analytic " << p->grad[i] << " numeric " << numeric);
        CHECK(spitest::grad_close(p->grad[i], numeric, 1e-3, 1e-7));
      }
    }
  }
}

TEST_SUITE("discriminator") {
  TEST_CASE("architecture") {
    const DiscriminatorConfig cfg{16, 16, 1, 32, 64, 1024, 0.2};
    Discriminator d(cfg);
    CHECK(d.conv_layers() == 9);
    CHECK(d.pool_layers() == 2);
    CHECK(d.affine_layers() == 2);
    CHECK(d.pool_positions() == std::vector<int>{5, 9});
    std::size_t want = 9 * 1 * 32 + 32 + 64;
    want += 4 * (9 * 32 * 32 + 32 + 64);
    want += 9 * 32 * 64 + 64 + 128;
    want += 3 * (9 * 64 * 64 + 64 + 128);
    want += 64 * 4 * 4 * 1024 + 1024;
    want += 1024 + 1;
    CHECK(nn::parameter_count(d.params()) == want);
    CHECK(Discriminator::expected_parameter_count(cfg) == want);
    CHECK_THROWS_AS(Discriminator(DiscriminatorConfig{18, 16, 1}), Error);
  }

  TEST_CASE("scores lie strictly inside (0, 1)") {
    Rng rng(8);
    Discriminator d({16, 16, 1, 8, 16, 32, 0.2});
    d.init(1);
    for (int t = 0; t < 10; ++t) {
      const auto x = random_tensor(rng, 4, 1, 16, 16, -3, 3);
      for (auto mode : {nn::Mode::train, nn::Mode::eval}) {
        const auto s = d.forward(x, mode, nullptr);
        CHECK(s.size() == 4u);
        for (double v : s.data) REQUIRE((v > 0.0 && v < 1.0));
      }
    }
    CHECK_THROWS_AS(d.forward(nn::Tensor(1, 3, 16, 16), nn::Mode::eval, nullptr), Error);
  }

  TEST_CASE("input gradient of the mean score matches central differences") {
    Rng rng(9);
    Discriminator d({16, 16, 1, 4, 8, 16, 0.2});
    d.init(4);
    auto x = random_tensor(rng, 2, 1, 16, 16);
    nn::Tape tape;
    const auto s = d.forward(x, nn::Mode::train, &tape);
    nn::Tensor gs(s.n, 1, 1, 1, 1.0 / s.n);
    nn::zero_grad(d.params());
    const auto gx = d.backward(gs, tape);
    auto mean_score = [&] {
      const auto o = d.forward(x, nn::Mode::train, nullptr);
      return (o.data[0] + o.data[1]) / 2;
    };
    const double h = 1e-6;
    for (int t = 0; t < 60; ++t) {
      const std::size_t i = rng.below(x.size());
      const double orig = x.data[i];
      x.data[i] = orig + h;
      const double up = mean_score();
      x.data[i] = orig - h;
      const double down = mean_score();
      x.data[i] = orig;
      const double numeric = (up - down) / (2 * h);
      INFO("x[" << i << "] analytic " << gx.data[i] << " numeric " << numeric);
      CHECK(spitest::grad_close(gx.data[i], numeric, 1e-3, 1e-9));
    }
  }
}

TEST_SUITE("nn primitives") {
  TEST_CASE("batch norm running statistics follow committed batches only") {
    nn::BatchNorm bn("bn", 2);
    Rng rng(1);
    const auto x = random_tensor(rng, 4, 2, 3, 3);
    nn::Cache cache;
    bn.forward(x, nn::Mode::train, &cache);
    CHECK(bn.running_mean().value == nn::Storage{0.0, 0.0});
    bn.commit(cache);
    for (int c = 0; c < 2; ++c) {
      double mean = 0.0, sq = 0.0;
      for (int n = 0; n < 4; ++n)
        for (int p = 0; p < 9; ++p) mean += x.sample(n)[c * 9 + p];
      mean /= 36;
      for (int n = 0; n < 4; ++n)
        for (int p = 0; p < 9; ++p) sq += std::pow(x.sample(n)[c * 9 + p] - mean, 2);
      CHECK(bn.running_mean().value[c] == doctest::Approx(0.1 * mean));
      CHECK(bn.running_var().value[c] == doctest::Approx(0.9 + 0.1 * sq / 35));
    }
  }

  TEST_CASE("max pooling routes gradients to the arg max") {
    nn::MaxPool2 pool;
    nn::Tensor x(1, 1, 2, 4);
    x.data = {1, 5, 2, 0, 3, 4, 7, 6};
    nn::Cache cache;
    const auto y = pool.forward(x, nn::Mode::train, &cache);
    CHECK(y.data == std::vector<double>{5, 7});
    nn::Tensor g(1, 1, 1, 2);
    g.data = {10, 20};
    CHECK(pool.backward(g, cache).data == std::vector<double>{0, 10, 0, 0, 0, 0, 20, 0});
  }

  TEST_CASE("first Adam step moves each weight by the learning rate") {
    nn::Param p{"p", {1.0, -2.0, 0.5}, {0.3, -4.0, 0.0}};
    nn::Adam opt(1e-3, 0.9, 0.99);
    opt.bind({&p});
    opt.step();
    CHECK(p.value[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
    CHECK(p.value[1] == doctest::Approx(-2.0 + 1e-3).epsilon(1e-9));
    CHECK(p.value[2] == 0.5);
    CHECK(opt.steps() == 1);
  }
}
