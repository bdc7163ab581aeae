#pragma once

// Minimal CPU neural-network layers with hand-written backward passes.
//
// Layers never hold activations: forward() writes whatever backward() needs
// into a caller-owned Cache, so a forward pass is const on the parameters and
// may run concurrently. backward() accumulates into Param::grad and is the
// only mutating call besides commit(), which folds batch statistics into
// running averages after a training-mode forward.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "spi/rng.hpp"

namespace spi::nn {

// Fixed 64-byte alignment keeps vectorized reductions on the same summation
// order from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

inline bool operator==(const Storage& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

// NCHW, row-major. Fully-connected activations use shape (n, features, 1, 1).
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  Storage data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, double fill = 0.0)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  double* sample(int i) { return data.data() + i * sample_size(); }
  const double* sample(int i) const { return data.data() + i * sample_size(); }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

  // Same storage, new per-sample shape (c*h*w must be preserved).
  Tensor reshaped(int c_, int h_, int w_) const&;
  Tensor reshaped(int c_, int h_, int w_) &&;
};

enum class Mode { train, eval };

struct Param {
  std::string name;
  Storage value;
  Storage grad;
};

// Non-trainable persistent state (normalization running statistics).
struct Buffer {
  std::string name;
  Storage value;
};

struct Cache {
  Tensor input;
  Tensor aux;
  std::vector<double> stats;
  std::vector<std::uint32_t> index;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode, Cache* cache) const = 0;
  virtual Tensor backward(const Tensor& grad_out, const Cache& cache) = 0;
  virtual void commit(const Cache&) {}
  virtual void collect_params(std::vector<Param*>&) {}
  virtual void collect_buffers(std::vector<Buffer*>&) {}
  virtual void init(Rng&) {}
  virtual bool weight_bearing() const { return false; }
};

// y = x W^T + b, W stored out x in.
class Linear final : public Layer {
 public:
  Linear(std::string name, int in, int out);
  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache) override;
  void collect_params(std::vector<Param*>& out) override;
  void init(Rng& rng) override;
  bool weight_bearing() const override { return true; }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  const Param& weight() const { return weight_; }

  // He-normal scaled by `gain`.
  void init_scaled(Rng& rng, double gain);

 private:
  int in_;
  int out_;
  Param weight_;
  Param bias_;
};

// 3x3 convolution, stride 1, zero padding 1. Weights out x in x 3 x 3.
// A frozen convolution skips weight gradients and contributes no params.
class Conv3x3 final : public Layer {
 public:
  Conv3x3(std::string name, int in, int out, bool trainable = true);
  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache) override;
  void collect_params(std::vector<Param*>& out) override;
  void init(Rng& rng) override;
  // He-normal scaled by gain; bias zero.
  void init_scaled(Rng& rng, double gain);
  bool weight_bearing() const override { return true; }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  bool trainable() const { return trainable_; }

 private:
  int in_;
  int out_;
  bool trainable_;
  Param weight_;
  Param bias_;
};

// Per-channel batch normalization over (n, h, w). Training mode normalizes
// with batch statistics; eval mode with running statistics.
class BatchNorm final : public Layer {
 public:
  BatchNorm(std::string name, int channels, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache) override;
  void commit(const Cache& cache) override;
  void collect_params(std::vector<Param*>& out) override;
  void collect_buffers(std::vector<Buffer*>& out) override;

  const Buffer& running_mean() const { return running_mean_; }
  const Buffer& running_var() const { return running_var_; }

 private:
  int channels_;
  double momentum_;
  double eps_;
  Param gamma_;
  Param beta_;
  Buffer running_mean_;
  Buffer running_var_;
};

class Relu final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache) override;
};

class LeakyRelu final : public Layer {
 public:
  explicit LeakyRelu(double slope) : slope_(slope) {}
  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache) override;

 private:
  double slope_;
};

// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
class MaxPool2 final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache) override;
};

class Sigmoid final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache) override;
};

// (n, c, h, w) -> (n, c*h*w, 1, 1)
class Flatten final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache) override;
};

// (n, k, 1, 1) -> (n, c, h, w) with k = c*h*w.
class Reshape final : public Layer {
 public:
  Reshape(int c, int h, int w) : c_(c), h_(h), w_(w) {}
  Tensor forward(const Tensor& x, Mode mode, Cache* cache) const override;
  Tensor backward(const Tensor& grad_out, const Cache& cache) override;

 private:
  int c_;
  int h_;
  int w_;
};

struct Tape {
  std::vector<Cache> caches;
};

class Sequential {
 public:
  Sequential() = default;
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  Layer& add(std::unique_ptr<Layer> layer);
  template <class L, class... Args>
  L& emplace(Args&&... args) {
    return static_cast<L&>(add(std::make_unique<L>(std::forward<Args>(args)...)));
  }

  // tape may be null when no backward pass follows.
  Tensor forward(const Tensor& x, Mode mode, Tape* tape) const;
  Tensor backward(const Tensor& grad_out, const Tape& tape);
  void commit(const Tape& tape);

  void collect_params(std::vector<Param*>& out);
  void collect_buffers(std::vector<Buffer*>& out);
  void init(Rng& rng);

  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_[i]; }
  const Layer& at(std::size_t i) const { return *layers_[i]; }
  int weight_bearing_layers() const;

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

void zero_grad(std::span<Param* const> params);
std::size_t parameter_count(std::span<Param* const> params);
double grad_norm(std::span<Param* const> params);

// Adam with bias correction. Moments are indexed like the bound params.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps = 1e-8);

  void bind(std::vector<Param*> params);
  void step();

  double lr() const { return lr_; }
  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }
  std::vector<Storage>& first_moments() { return m_; }
  std::vector<Storage>& second_moments() { return v_; }
  const std::vector<Param*>& params() const { return params_; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long long t_ = 0;
  std::vector<Param*> params_;
  std::vector<Storage> m_;
  std::vector<Storage> v_;
};

}  // namespace spi::nn
