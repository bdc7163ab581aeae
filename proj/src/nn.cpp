#include "spi/nn.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "spi/error.hpp"

namespace spi::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

void check_channels(const Tensor& x, int c, const std::string& who) {
  require(x.c == c, ErrorCode::shape_mismatch,
          who + ": expected " + std::to_string(c) + " channels, got " + std::to_string(x.c));
}

// One sample (C, H, W) -> rows (ci, ky, kx), columns (y, x).
void im2col(const double* src, int C, int H, int W, RowMat& cols) {
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  cols.resize(static_cast<Eigen::Index>(C) * 9, static_cast<Eigen::Index>(hw));
  for (int ci = 0; ci < C; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        double* dst = cols.data() + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
        const double* plane = src + static_cast<std::size_t>(ci) * hw;
        const int dx = kx - 1;
        for (int y = 0; y < H; ++y) {
          double* d = dst + static_cast<std::size_t>(y) * W;
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= H) {
            std::fill(d, d + W, 0.0);
            continue;
          }
          const double* s = plane + static_cast<std::size_t>(sy) * W;
          if (dx == 0) {
            std::copy(s, s + W, d);
          } else if (dx < 0) {
            d[0] = 0.0;
            std::copy(s, s + W - 1, d + 1);
          } else {
            std::copy(s + 1, s + W, d);
            d[W - 1] = 0.0;
          }
        }
      }
}

// Adjoint of im2col for one sample; overwrites dst.
void col2im(const RowMat& cols, int C, int H, int W, double* dst) {
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  std::fill(dst, dst + C * hw, 0.0);
  for (int ci = 0; ci < C; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = cols.data() + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
        double* plane = dst + static_cast<std::size_t>(ci) * hw;
        const int dx = kx - 1;
        const int x0 = std::max(0, -dx);
        const int x1 = std::min(W, W - dx);
        for (int y = 0; y < H; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= H) continue;
          const double* s = row + static_cast<std::size_t>(y) * W;
          double* d = plane + static_cast<std::size_t>(sy) * W;
          for (int xx = x0; xx < x1; ++xx) d[xx + dx] += s[xx];
        }
      }
}

// Scratch reused across calls; one per thread keeps forward passes reentrant.
RowMat& scratch_cols() {
  thread_local RowMat cols;
  return cols;
}

RowMat& scratch_dcols() {
  thread_local RowMat cols;
  return cols;
}

}  // namespace

Tensor Tensor::reshaped(int c_, int h_, int w_) const& {
  Tensor t = *this;
  return std::move(t).reshaped(c_, h_, w_);
}

Tensor Tensor::reshaped(int c_, int h_, int w_) && {
  require(static_cast<std::size_t>(c_) * h_ * w_ == sample_size(), ErrorCode::shape_mismatch,
          "reshape must preserve the per-sample element count");
  c = c_;
  h = h_;
  w = w_;
  return std::move(*this);
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in, int out) : in_(in), out_(out) {
  require(in > 0 && out > 0, ErrorCode::invalid_argument, "Linear sizes must be positive");
  weight_ = {name + ".weight", Storage(static_cast<std::size_t>(in) * out, 0.0),
             Storage(static_cast<std::size_t>(in) * out, 0.0)};
  bias_ = {name + ".bias", Storage(out, 0.0), Storage(out, 0.0)};
}

void Linear::init(Rng& rng) { init_scaled(rng, 1.0); }

void Linear::init_scaled(Rng& rng, double gain) {
  const double sd = gain * std::sqrt(2.0 / in_);
  for (auto& v : weight_.value) v = sd * rng.normal();
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

Tensor Linear::forward(const Tensor& x, Mode, Cache* cache) const {
  require(static_cast<int>(x.sample_size()) == in_, ErrorCode::shape_mismatch,
          weight_.name + ": expected " + std::to_string(in_) + " inputs, got " + std::to_string(x.sample_size()));
  Tensor y(x.n, out_, 1, 1);
  ConstRowMap xm(x.data.data(), x.n, in_);
  ConstRowMap wm(weight_.value.data(), out_, in_);
  RowMap ym(y.data.data(), x.n, out_);
  ym.noalias() = xm * wm.transpose();
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias_.value.data(), out_);
  if (cache) cache->input = x;
  return y;
}

Tensor Linear::backward(const Tensor& g, const Cache& cache) {
  const Tensor& x = cache.input;
  ConstRowMap xm(x.data.data(), x.n, in_);
  ConstRowMap gm(g.data.data(), g.n, out_);
  RowMap gw(weight_.grad.data(), out_, in_);
  gw.noalias() += gm.transpose() * xm;
  Eigen::Map<Eigen::RowVectorXd>(bias_.grad.data(), out_) += gm.colwise().sum();
  Tensor dx(x.n, x.c, x.h, x.w);
  ConstRowMap wm(weight_.value.data(), out_, in_);
  RowMap dxm(dx.data.data(), x.n, in_);
  dxm.noalias() = gm * wm;
  return dx;
}

void Linear::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

// ---------------------------------------------------------------- Conv3x3

Conv3x3::Conv3x3(std::string name, int in, int out, bool trainable) : in_(in), out_(out), trainable_(trainable) {
  require(in > 0 && out > 0, ErrorCode::invalid_argument, "Conv3x3 channel counts must be positive");
  const std::size_t nw = static_cast<std::size_t>(in) * out * 9;
  weight_ = {name + ".weight", Storage(nw, 0.0), Storage(trainable ? nw : 0, 0.0)};
  bias_ = {name + ".bias", Storage(out, 0.0), Storage(trainable ? out : 0, 0.0)};
}

void Conv3x3::init(Rng& rng) { init_scaled(rng, 1.0); }

void Conv3x3::init_scaled(Rng& rng, double gain) {
  const double sd = gain * std::sqrt(2.0 / (9.0 * in_));
  for (auto& v : weight_.value) v = sd * rng.normal();
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

Tensor Conv3x3::forward(const Tensor& x, Mode, Cache* cache) const {
  check_channels(x, in_, weight_.name);
  const auto hw = static_cast<Eigen::Index>(x.plane());
  ConstRowMap wm(weight_.value.data(), out_, in_ * 9);
  const auto bias = Eigen::Map<const Eigen::VectorXd>(bias_.value.data(), out_);
  Tensor y(x.n, out_, x.h, x.w);
  RowMat& cols = scratch_cols();
  for (int n = 0; n < x.n; ++n) {
    im2col(x.sample(n), x.c, x.h, x.w, cols);
    RowMap ym(y.sample(n), out_, hw);
    ym.noalias() = wm * cols;
    ym.colwise() += bias;
  }
  if (cache) cache->input = x;
  return y;
}

Tensor Conv3x3::backward(const Tensor& g, const Cache& cache) {
  const Tensor& x = cache.input;
  const auto hw = static_cast<Eigen::Index>(x.plane());
  ConstRowMap wm(weight_.value.data(), out_, in_ * 9);
  RowMat& cols = scratch_cols();
  RowMat& dcols = scratch_dcols();
  Tensor dx(x.n, x.c, x.h, x.w);
  for (int n = 0; n < x.n; ++n) {
    ConstRowMap gm(g.sample(n), out_, hw);
    if (trainable_) {
      im2col(x.sample(n), x.c, x.h, x.w, cols);
      RowMap gw(weight_.grad.data(), out_, in_ * 9);
      gw.noalias() += gm * cols.transpose();
      Eigen::Map<Eigen::VectorXd>(bias_.grad.data(), out_) += gm.rowwise().sum();
    }
    dcols.noalias() = wm.transpose() * gm;
    col2im(dcols, x.c, x.h, x.w, dx.sample(n));
  }
  return dx;
}

void Conv3x3::collect_params(std::vector<Param*>& out) {
  if (!trainable_) return;
  out.push_back(&weight_);
  out.push_back(&bias_);
}

// ---------------------------------------------------------------- BatchNorm

BatchNorm::BatchNorm(std::string name, int channels, double momentum, double eps)
    : channels_(channels), momentum_(momentum), eps_(eps) {
  gamma_ = {name + ".gamma", Storage(channels, 1.0), Storage(channels, 0.0)};
  beta_ = {name + ".beta", Storage(channels, 0.0), Storage(channels, 0.0)};
  running_mean_ = {name + ".running_mean", Storage(channels, 0.0)};
  running_var_ = {name + ".running_var", Storage(channels, 1.0)};
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode, Cache* cache) const {
  check_channels(x, channels_, gamma_.name);
  const std::size_t hw = x.plane();
  const double count = static_cast<double>(x.n) * hw;
  Tensor y(x.n, x.c, x.h, x.w);
  Tensor xhat;
  if (cache) xhat = Tensor(x.n, x.c, x.h, x.w);
  std::vector<double> stats(mode == Mode::train ? 3 * channels_ : channels_);

  for (int c = 0; c < channels_; ++c) {
    double mean;
    double var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (int n = 0; n < x.n; ++n) {
        const double* p = x.data.data() + (static_cast<std::size_t>(n) * x.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      mean = s / count;
      double ss = 0.0;
      for (int n = 0; n < x.n; ++n) {
        const double* p = x.data.data() + (static_cast<std::size_t>(n) * x.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / count;
      stats[channels_ + c] = mean;
      stats[2 * channels_ + c] = var;
    } else {
      mean = running_mean_.value[c];
      var = running_var_.value[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + eps_);
    stats[c] = inv_std;
    const double g = gamma_.value[c];
    const double b = beta_.value[c];
    for (int n = 0; n < x.n; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * x.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double xh = (x.data[off + i] - mean) * inv_std;
        if (cache) xhat.data[off + i] = xh;
        y.data[off + i] = g * xh + b;
      }
    }
  }
  if (cache) {
    cache->aux = std::move(xhat);
    cache->stats = std::move(stats);
  }
  return y;
}

Tensor BatchNorm::backward(const Tensor& g, const Cache& cache) {
  const Tensor& xhat = cache.aux;
  const bool batch_stats = cache.stats.size() == static_cast<std::size_t>(3 * channels_);
  const std::size_t hw = xhat.plane();
  const double count = static_cast<double>(xhat.n) * hw;
  Tensor dx(xhat.n, xhat.c, xhat.h, xhat.w);
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (int n = 0; n < xhat.n; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * xhat.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += g.data[off + i];
        sum_dy_xhat += g.data[off + i] * xhat.data[off + i];
      }
    }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;
    const double inv_std = cache.stats[c];
    const double scale = gamma_.value[c] * inv_std;
    for (int n = 0; n < xhat.n; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * xhat.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        if (batch_stats)
          dx.data[off + i] = scale * (g.data[off + i] - sum_dy / count - xhat.data[off + i] * sum_dy_xhat / count);
        else
          dx.data[off + i] = scale * g.data[off + i];
      }
    }
  }
  return dx;
}

void BatchNorm::commit(const Cache& cache) {
  if (cache.stats.size() != static_cast<std::size_t>(3 * channels_)) return;
  const double count = static_cast<double>(cache.aux.n) * cache.aux.plane();
  const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
  for (int c = 0; c < channels_; ++c) {
    running_mean_.value[c] = (1.0 - momentum_) * running_mean_.value[c] + momentum_ * cache.stats[channels_ + c];
    running_var_.value[c] =
        (1.0 - momentum_) * running_var_.value[c] + momentum_ * cache.stats[2 * channels_ + c] * unbias;
  }
}

void BatchNorm::collect_params(std::vector<Param*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void BatchNorm::collect_buffers(std::vector<Buffer*>& out) {
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

// ---------------------------------------------------------------- activations

Tensor Relu::forward(const Tensor& x, Mode, Cache* cache) const {
  Tensor y = x;
  for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  if (cache) cache->input = x;
  return y;
}

Tensor Relu::backward(const Tensor& g, const Cache& cache) {
  Tensor dx = g;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(cache.input.data[i] > 0.0)) dx.data[i] = 0.0;
  return dx;
}

Tensor LeakyRelu::forward(const Tensor& x, Mode, Cache* cache) const {
  Tensor y = x;
  for (auto& v : y.data)
    if (v < 0.0) v *= slope_;
  if (cache) cache->input = x;
  return y;
}

Tensor LeakyRelu::backward(const Tensor& g, const Cache& cache) {
  Tensor dx = g;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (cache.input.data[i] < 0.0) dx.data[i] *= slope_;
  return dx;
}

Tensor MaxPool2::forward(const Tensor& x, Mode, Cache* cache) const {
  require(x.h >= 2 && x.w >= 2, ErrorCode::shape_mismatch, "max pooling needs at least 2x2 input");
  const int oh = x.h / 2;
  const int ow = x.w / 2;
  Tensor y(x.n, x.c, oh, ow);
  std::vector<std::uint32_t> index(cache ? y.size() : 0);
  std::size_t o = 0;
  for (int nc = 0; nc < x.n * x.c; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * x.plane();
    for (int yy = 0; yy < oh; ++yy)
      for (int xx = 0; xx < ow; ++xx, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * yy) * x.w + 2 * xx;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t i = base + static_cast<std::size_t>(2 * yy + dy) * x.w + 2 * xx + dx;
            if (x.data[i] > x.data[best]) best = i;
          }
        y.data[o] = x.data[best];
        if (cache) index[o] = static_cast<std::uint32_t>(best);
      }
  }
  if (cache) {
    cache->input = Tensor(x.n, x.c, x.h, x.w);
    cache->input.data.clear();  // shape only
    cache->index = std::move(index);
  }
  return y;
}

Tensor MaxPool2::backward(const Tensor& g, const Cache& cache) {
  const Tensor& shape = cache.input;
  Tensor dx(shape.n, shape.c, shape.h, shape.w);
  for (std::size_t o = 0; o < g.size(); ++o) dx.data[cache.index[o]] += g.data[o];
  return dx;
}

Tensor Sigmoid::forward(const Tensor& x, Mode, Cache* cache) const {
  // Saturates 1e-12 inside the bounds so scores stay in the open interval.
  constexpr double kEdge = 1e-12;
  Tensor y = x;
  for (auto& v : y.data) {
    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    v = std::clamp(s, kEdge, 1.0 - kEdge);
  }
  if (cache) cache->aux = y;
  return y;
}

Tensor Sigmoid::backward(const Tensor& g, const Cache& cache) {
  Tensor dx = g;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const double s = cache.aux.data[i];
    dx.data[i] *= s * (1.0 - s);
  }
  return dx;
}

Tensor Flatten::forward(const Tensor& x, Mode, Cache* cache) const {
  if (cache) {
    cache->input = Tensor(x.n, x.c, x.h, x.w);
    cache->input.data.clear();
  }
  return x.reshaped(static_cast<int>(x.sample_size()), 1, 1);
}

Tensor Flatten::backward(const Tensor& g, const Cache& cache) {
  return g.reshaped(cache.input.c, cache.input.h, cache.input.w);
}

Tensor Reshape::forward(const Tensor& x, Mode, Cache* cache) const {
  if (cache) {
    cache->input = Tensor(x.n, x.c, x.h, x.w);
    cache->input.data.clear();
  }
  return x.reshaped(c_, h_, w_);
}

Tensor Reshape::backward(const Tensor& g, const Cache& cache) {
  return g.reshaped(cache.input.c, cache.input.h, cache.input.w);
}

// ---------------------------------------------------------------- Sequential

Layer& Sequential::add(std::unique_ptr<Layer> layer) {
  layers_.push_back(std::move(layer));
  return *layers_.back();
}

Tensor Sequential::forward(const Tensor& x, Mode mode, Tape* tape) const {
  if (tape) tape->caches.assign(layers_.size(), Cache{});
  Tensor cur = x;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    cur = layers_[i]->forward(cur, mode, tape ? &tape->caches[i] : nullptr);
  return cur;
}

Tensor Sequential::backward(const Tensor& grad_out, const Tape& tape) {
  require(tape.caches.size() == layers_.size(), ErrorCode::state, "backward without a matching forward tape");
  Tensor g = grad_out;
  for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g, tape.caches[i]);
  return g;
}

void Sequential::commit(const Tape& tape) {
  for (std::size_t i = 0; i < layers_.size() && i < tape.caches.size(); ++i) layers_[i]->commit(tape.caches[i]);
}

void Sequential::collect_params(std::vector<Param*>& out) {
  for (auto& l : layers_) l->collect_params(out);
}

void Sequential::collect_buffers(std::vector<Buffer*>& out) {
  for (auto& l : layers_) l->collect_buffers(out);
}

void Sequential::init(Rng& rng) {
  for (auto& l : layers_) l->init(rng);
}

int Sequential::weight_bearing_layers() const {
  return static_cast<int>(std::count_if(layers_.begin(), layers_.end(), [](auto& l) { return l->weight_bearing(); }));
}

// ---------------------------------------------------------------- helpers

void zero_grad(std::span<Param* const> params) {
  for (auto* p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

std::size_t parameter_count(std::span<Param* const> params) {
  std::size_t n = 0;
  for (auto* p : params) n += p->value.size();
  return n;
}

double grad_norm(std::span<Param* const> params) {
  double s = 0.0;
  for (auto* p : params)
    for (double g : p->grad) s += g * g;
  return std::sqrt(s);
}

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  require(lr > 0.0, ErrorCode::invalid_argument, "learning rate must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorCode::invalid_argument,
          "Adam betas must be in [0, 1)");
}

void Adam::bind(std::vector<Param*> params) {
  params_ = std::move(params);
  m_.clear();
  v_.clear();
  for (auto* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
  t_ = 0;
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

}  // namespace spi::nn
