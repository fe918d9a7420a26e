#pragma once

#include <string>
#include <vector>

#include "ssdctx/backbone.hpp"

namespace ssdctx {

/// Context-fusion wiring for one target level. Context channels are half the
/// target's so the added context does not overwhelm the target feature.
struct FusionSpec {
  std::string target;
  std::vector<std::string> contexts;  // deeper than target (later pyramid entries)
  bool include_target_conv = true;    // false when an attention stage replaces it
};

struct PyramidLevelShape {
  std::string name;
  int channels = 0;
  int hw = 0;  // square spatial extent
};

inline std::vector<PyramidLevelShape> canonical_pyramid_shapes() {
  std::vector<PyramidLevelShape> out;
  for (size_t i = 0; i < kPyramidNames.size(); ++i)
    out.push_back({kPyramidNames[i], kPyramidChannels[i], kPyramidSizes[i]});
  return out;
}

/// Brings deeper context features to the target's spatial size by transposed
/// convolution, normalizes every branch (BN + ReLU), and concatenates:
/// target branch first, then contexts in spec order.
template <class S>
class FusionBlock {
 public:
  FusionBlock() = default;

  FusionBlock(ParamStore<S>& store, const std::string& prefix, Rng& rng, FusionSpec spec,
              const std::vector<PyramidLevelShape>& shapes = canonical_pyramid_shapes())
      : spec_(std::move(spec)) {
    const int ti = level_index(shapes, spec_.target);
    if (spec_.contexts.empty())
      throw std::invalid_argument("fusion: empty context list for target " + spec_.target);
    target_channels_ = shapes[ti].channels;
    context_channels_ = target_channels_ / 2;

    if (spec_.include_target_conv) {
      target_conv_ = Conv2d<S>(store, prefix + ".target.conv", rng, target_channels_,
                               target_channels_, 3, 1, 1, false);
    }
    target_bn_ = BatchNorm2d<S>(store, prefix + ".target.bn", target_channels_);

    for (size_t i = 0; i < spec_.contexts.size(); ++i) {
      const int ci = level_index(shapes, spec_.contexts[i]);
      if (ci <= ti || shapes[ci].hw > shapes[ti].hw)
        throw std::invalid_argument("fusion: context " + spec_.contexts[i] +
                                    " is not deeper than target " + spec_.target);
      // single deconv per branch: stride = kernel = smallest power of two
      // covering the scale ratio, then center-crop to the target size
      const int ratio = (shapes[ti].hw + shapes[ci].hw - 1) / shapes[ci].hw;
      int k = 1;
      while (k < ratio) k *= 2;
      std::string bp = prefix + ".ctx" + std::to_string(i);
      branches_.push_back(Branch{
          ConvTranspose2d<S>(store, bp + ".deconv", rng, shapes[ci].channels,
                             context_channels_, k, k, 0, false),
          BatchNorm2d<S>(store, bp + ".bn", context_channels_)});
    }
  }

  const FusionSpec& spec() const { return spec_; }
  int fused_channels() const {
    return target_channels_ + int(branches_.size()) * context_channels_;
  }
  int context_channels() const { return context_channels_; }

  /// Fuses the pyramid at the target level. When the target branch transform
  /// lives outside the block (FA wiring), the attended feature is passed via
  /// target_override and only BN + ReLU are applied here.
  Tensor<S> fuse(const FeaturePyramid<S>& pyramid, bool training,
                 const Tensor<S>& target_override = {}) {
    Tensor<S> t = target_override.defined() ? target_override : pyramid.at(spec_.target);
    if (spec_.include_target_conv) t = target_conv_(t);
    t = relu(target_bn_(t, training));
    const Index th = t.shape().h, tw = t.shape().w;

    std::vector<Tensor<S>> parts{t};
    for (size_t i = 0; i < branches_.size(); ++i) {
      Tensor<S> c = pyramid.at(spec_.contexts[i]);
      c = branches_[i].deconv(c, th, tw);
      parts.push_back(relu(branches_[i].bn(c, training)));
    }
    return concat_channels(parts);
  }

 private:
  static int level_index(const std::vector<PyramidLevelShape>& shapes,
                         const std::string& name) {
    for (int i = 0; i < int(shapes.size()); ++i)
      if (name == shapes[i].name) return i;
    throw std::invalid_argument("fusion: unknown pyramid level " + name);
  }

  struct Branch {
    ConvTranspose2d<S> deconv;
    BatchNorm2d<S> bn;
  };

  FusionSpec spec_;
  int target_channels_ = 0, context_channels_ = 0;
  Conv2d<S> target_conv_;
  BatchNorm2d<S> target_bn_;
  std::vector<Branch> branches_;
};

}  // namespace ssdctx
