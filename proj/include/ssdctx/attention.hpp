#pragma once

#include <vector>

#include "ssdctx/nn.hpp"

namespace ssdctx {

/// One residual attention stage. down_up_depth is the number of pooling
/// levels in the mask branch: 2 for the first stage, 1 for the second.
struct AttentionStageSpec {
  int channels = 0;
  int down_up_depth = 2;
};

struct AttentionModuleSpec {
  int channels = 0;
  int stage_count = 2;          // stage 1 runs depth 2, stage 2 depth 1
  bool residual_form = false;   // attended = trunk*(1+mask) instead of trunk*mask
};

/// Trunk (two residual blocks) gated by a sigmoid mask from a down/up-sampled
/// branch, then one more residual block, channelwise L2 norm, and ReLU.
/// Output shape equals input shape; the mask is full-channel.
template <class S>
class AttentionStage {
 public:
  AttentionStage() = default;

  AttentionStage(ParamStore<S>& store, const std::string& prefix, Rng& rng,
                 AttentionStageSpec spec, bool residual_form = false)
      : spec_(spec), residual_form_(residual_form) {
    if (spec.down_up_depth < 1)
      throw std::invalid_argument("attention: down_up_depth must be >= 1");
    const int C = spec.channels;
    trunk1_ = ResidualBlock<S>(store, prefix + ".trunk1", rng, C);
    trunk2_ = ResidualBlock<S>(store, prefix + ".trunk2", rng, C);
    mask_down1_ = ResidualBlock<S>(store, prefix + ".mask.down1", rng, C);
    if (spec.down_up_depth >= 2) {
      mask_down2_ = ResidualBlock<S>(store, prefix + ".mask.down2", rng, C);
      mask_up1_ = ResidualBlock<S>(store, prefix + ".mask.up1", rng, C);
    }
    mask_conv_ = Conv2d<S>(store, prefix + ".mask.conv", rng, C, C, 1);
    post_ = ResidualBlock<S>(store, prefix + ".post", rng, C);
    post_norm_ = L2Norm<S>(store, prefix + ".post_norm", C);
  }

  struct Output {
    Tensor<S> attended;
    Tensor<S> mask;
  };

  Output forward(const Tensor<S>& x, bool training) {
    if (x.shape().c != spec_.channels)
      throw std::invalid_argument("attention: input has " + std::to_string(x.shape().c) +
                                  " channels, stage built for " +
                                  std::to_string(spec_.channels));
    Tensor<S> trunk = trunk2_(trunk1_(x, training), training);

    // mask branch; pooling is ceil-mode and every up-sample targets the
    // recorded pre-pool size so odd extents round-trip exactly
    Tensor<S> m;
    if (spec_.down_up_depth >= 2) {
      Tensor<S> d1 = max_pool2d(x, 2, 2, 0, true);
      Tensor<S> r1 = mask_down1_(d1, training);
      Tensor<S> d2 = max_pool2d(r1, 2, 2, 0, true);
      Tensor<S> r2 = mask_down2_(d2, training);
      Tensor<S> u1 = upsample_nearest(r2, r1.shape().h, r1.shape().w);
      Tensor<S> merged = add(u1, r1);  // residual link between matching scales
      Tensor<S> r3 = mask_up1_(merged, training);
      m = upsample_nearest(r3, x.shape().h, x.shape().w);
    } else {
      Tensor<S> d1 = max_pool2d(x, 2, 2, 0, true);
      Tensor<S> r1 = mask_down1_(d1, training);
      m = upsample_nearest(r1, x.shape().h, x.shape().w);
    }
    Tensor<S> mask = sigmoid(mask_conv_(m));

    Tensor<S> gate = residual_form_ ? add_scalar(mask, S(1)) : mask;
    Tensor<S> attended = elementwise_mul(trunk, gate);
    attended = relu(post_norm_(post_(attended, training)));
    return {attended, mask};
  }

 private:
  AttentionStageSpec spec_;
  bool residual_form_ = false;
  ResidualBlock<S> trunk1_, trunk2_, mask_down1_, mask_down2_, mask_up1_, post_;
  Conv2d<S> mask_conv_;
  L2Norm<S> post_norm_;
};

/// Sequence of attention stages (stage 1 depth 2, stage 2 depth 1); keeps the
/// per-stage masks of the last forward for visualization.
template <class S>
class AttentionModule {
 public:
  AttentionModule() = default;

  AttentionModule(ParamStore<S>& store, const std::string& prefix, Rng& rng,
                  AttentionModuleSpec spec)
      : spec_(spec) {
    if (spec.stage_count < 1 || spec.stage_count > 2)
      throw std::invalid_argument("attention: stage_count must be 1 or 2");
    stages_.emplace_back(store, prefix + ".stage1", rng,
                         AttentionStageSpec{spec.channels, 2}, spec.residual_form);
    if (spec.stage_count == 2)
      stages_.emplace_back(store, prefix + ".stage2", rng,
                           AttentionStageSpec{spec.channels, 1}, spec.residual_form);
  }

  Tensor<S> forward(const Tensor<S>& x, bool training) {
    masks_.clear();
    Tensor<S> h = x;
    for (auto& stage : stages_) {
      auto out = stage.forward(h, training);
      h = out.attended;
      masks_.push_back(out.mask);
    }
    return h;
  }

  /// Masks recorded by the most recent forward, one per stage.
  const std::vector<Tensor<S>>& masks() const { return masks_; }
  int stage_count() const { return int(stages_.size()); }

 private:
  AttentionModuleSpec spec_;
  std::vector<AttentionStage<S>> stages_;
  std::vector<Tensor<S>> masks_;
};

}  // namespace ssdctx
