#pragma once

#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssdctx/ops.hpp"

namespace ssdctx {

/// Deterministic generator used for parameter init and data sampling.
/// mt19937 output is pinned by the standard, so runs are reproducible
/// for a fixed (config, seed) on a given build.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * (double(gen_()) + 0.5) / 4294967296.0;
  }
  double normal() {
    // Box-Muller keeps the stream implementation-independent
    double u1 = uniform(1e-12, 1.0), u2 = uniform(0.0, 1.0);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
  uint32_t next_u32() { return gen_(); }
  Index index(Index n) { return Index(gen_() % uint64_t(n)); }

  std::mt19937& engine() { return gen_; }

 private:
  std::mt19937 gen_;
};

/// Named parameter and state registry. Entry order is the registration
/// order, which fixes the checkpoint layout and the optimizer's walk.
template <class S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<S> tensor;
    bool trainable;
  };

  Tensor<S>& add(const std::string& name, Tensor<S> t, bool trainable = true) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    t.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t), trainable});
    return entries_.back().tensor;
  }

  Tensor<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].tensor;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  Index parameter_count() const {
    Index total = 0;
    for (const auto& e : entries_)
      if (e.trainable) total += e.tensor.numel();
    return total;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

namespace init {

/// He-uniform fan-in init for conv / deconv kernels.
template <class S>
void he_uniform(Tensor<S>& w, Index fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / double(fan_in));
  for (Index i = 0; i < w.numel(); ++i) w.value()[i] = S(rng.uniform(-bound, bound));
}

}  // namespace init

/// Convolution layer owning its parameters. Matches the layout rules of
/// conv2d: weight (out,in,kh,kw), optional bias (omit when a BatchNorm
/// immediately follows, otherwise its gradient is identically zero).
template <class S>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<S>& store, const std::string& prefix, Rng& rng, int in_ch, int out_ch,
         int kernel, int stride = 1, int pad = 0, bool with_bias = true, int dilation = 1)
      : geom_(ConvGeom::make(stride, pad, dilation)) {
    Tensor<S> w = Tensor<S>::zeros({out_ch, in_ch, kernel, kernel});
    init::he_uniform(w, Index(in_ch) * kernel * kernel, rng);
    weight_ = store.add(prefix + ".weight", std::move(w));
    if (with_bias) bias_ = store.add(prefix + ".bias", Tensor<S>::zeros({1, out_ch, 1, 1}));
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, weight_, bias_, geom_); }

  const Tensor<S>& weight() const { return weight_; }
  Tensor<S>& weight() { return weight_; }
  Tensor<S>& bias() { return bias_; }
  int out_channels() const { return int(weight_.shape().n); }

 private:
  Tensor<S> weight_, bias_;
  ConvGeom geom_;
};

/// Transposed-convolution layer; forward resizes (center crop / zero pad)
/// to the target spatial size handed in per call.
template <class S>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(ParamStore<S>& store, const std::string& prefix, Rng& rng, int in_ch,
                  int out_ch, int kernel, int stride, int pad = 0, bool with_bias = true)
      : geom_(ConvGeom::make(stride, pad)) {
    Tensor<S> w = Tensor<S>::zeros({out_ch, in_ch, kernel, kernel});
    init::he_uniform(w, Index(in_ch) * kernel * kernel, rng);
    weight_ = store.add(prefix + ".weight", std::move(w));
    if (with_bias) bias_ = store.add(prefix + ".bias", Tensor<S>::zeros({1, out_ch, 1, 1}));
  }

  Tensor<S> operator()(const Tensor<S>& x, Index th, Index tw) const {
    return conv_transpose2d(x, weight_, bias_, geom_, th, tw);
  }

  const Tensor<S>& weight() const { return weight_; }

 private:
  Tensor<S> weight_, bias_;
  ConvGeom geom_;
};

template <class S>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParamStore<S>& store, const std::string& prefix, int channels)
      : gamma_(store.add(prefix + ".gamma", Tensor<S>::full({1, channels, 1, 1}, S(1)))),
        beta_(store.add(prefix + ".beta", Tensor<S>::zeros({1, channels, 1, 1}))),
        running_mean_(store.add(prefix + ".running_mean",
                                Tensor<S>::zeros({1, channels, 1, 1}), false)),
        running_var_(store.add(prefix + ".running_var",
                               Tensor<S>::full({1, channels, 1, 1}, S(1)), false)) {}

  Tensor<S> operator()(const Tensor<S>& x, bool training) {
    return batch_norm(x, gamma_, beta_, running_mean_, running_var_, training, momentum_,
                      eps_);
  }

  Tensor<S>& gamma() { return gamma_; }
  Tensor<S>& beta() { return beta_; }
  Tensor<S>& running_mean() { return running_mean_; }
  Tensor<S>& running_var() { return running_var_; }

 private:
  Tensor<S> gamma_, beta_, running_mean_, running_var_;
  S momentum_ = S(0.1);
  S eps_ = S(1e-5);
};

/// Channelwise L2 normalization with learnable scale (init 20, the usual
/// value for taming early large-magnitude features).
template <class S>
class L2Norm {
 public:
  L2Norm() = default;
  L2Norm(ParamStore<S>& store, const std::string& prefix, int channels, S scale_init = S(20))
      : scale_(store.add(prefix + ".scale", Tensor<S>::full({1, channels, 1, 1}, scale_init))) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return l2_normalize_channels(x, scale_); }

  Tensor<S>& scale() { return scale_; }

 private:
  Tensor<S> scale_;
};

/// Bottleneck residual block: 1x1 reduce, 3x3, 1x1 restore, BN after each
/// conv, identity skip, no activation after the final add. Shape-preserving.
template <class S>
class ResidualBlock {
 public:
  static constexpr int kReduce = 8;  // bottleneck width divisor

  ResidualBlock() = default;
  ResidualBlock(ParamStore<S>& store, const std::string& prefix, Rng& rng, int channels) {
    int mid = std::max(channels / kReduce, 8);
    conv1_ = Conv2d<S>(store, prefix + ".conv1", rng, channels, mid, 1, 1, 0, false);
    bn1_ = BatchNorm2d<S>(store, prefix + ".bn1", mid);
    conv2_ = Conv2d<S>(store, prefix + ".conv2", rng, mid, mid, 3, 1, 1, false);
    bn2_ = BatchNorm2d<S>(store, prefix + ".bn2", mid);
    conv3_ = Conv2d<S>(store, prefix + ".conv3", rng, mid, channels, 1, 1, 0, false);
    bn3_ = BatchNorm2d<S>(store, prefix + ".bn3", channels);
  }

  Tensor<S> operator()(const Tensor<S>& x, bool training) {
    Tensor<S> h = relu(bn1_(conv1_(x), training));
    h = relu(bn2_(conv2_(h), training));
    h = bn3_(conv3_(h), training);
    return add(h, x);
  }

 private:
  Conv2d<S> conv1_, conv2_, conv3_;
  BatchNorm2d<S> bn1_, bn2_, bn3_;
};

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// v = mu*v + g + wd*p; p -= lr*v.
template <class S>
class Sgd {
 public:
  Sgd(S lr, S momentum, S weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void set_lr(S lr) { lr_ = lr; }
  S lr() const { return lr_; }

  /// Global gradient-norm clip over all trainable entries; 0 disables.
  void set_clip_norm(S c) { clip_norm_ = c; }

  void step(ParamStore<S>& store) {
    auto& entries = store.entries();
    if (velocity_.empty()) {
      velocity_.resize(entries.size());
      for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].trainable)
          velocity_[i] = Eigen::ArrayX<S>::Zero(entries[i].tensor.numel());
    }
    S scale = S(1);
    if (clip_norm_ > S(0)) {
      double sq = 0;
      for (auto& e : entries)
        if (e.trainable && e.tensor.has_grad())
          sq += double(e.tensor.grad().square().sum());
      double norm = std::sqrt(sq);
      if (norm > double(clip_norm_)) scale = S(double(clip_norm_) / norm);
    }
    for (size_t i = 0; i < entries.size(); ++i) {
      auto& e = entries[i];
      if (!e.trainable) continue;
      Eigen::ArrayX<S>& v = velocity_[i];
      Eigen::ArrayX<S>& p = e.tensor.value();
      const Eigen::ArrayX<S>& g = e.tensor.grad();
      v = momentum_ * v + scale * g + weight_decay_ * p;
      p -= lr_ * v;
    }
  }

  std::vector<Eigen::ArrayX<S>>& velocity() { return velocity_; }

 private:
  S lr_, momentum_, weight_decay_;
  S clip_norm_ = S(0);
  std::vector<Eigen::ArrayX<S>> velocity_;
};

}  // namespace ssdctx
