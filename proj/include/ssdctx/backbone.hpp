#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "ssdctx/nn.hpp"

namespace ssdctx {

enum class BackboneKind { vgg16, resnet18, resnet34, resnet50 };

inline const char* to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::vgg16: return "vgg16";
    case BackboneKind::resnet18: return "resnet18";
    case BackboneKind::resnet34: return "resnet34";
    case BackboneKind::resnet50: return "resnet50";
  }
  return "?";
}

inline BackboneKind backbone_kind_from_string(const std::string& s) {
  if (s == "vgg16") return BackboneKind::vgg16;
  if (s == "resnet18") return BackboneKind::resnet18;
  if (s == "resnet34") return BackboneKind::resnet34;
  if (s == "resnet50") return BackboneKind::resnet50;
  throw std::invalid_argument("unknown backbone kind: " + s);
}

struct BackboneSpec {
  BackboneKind kind = BackboneKind::vgg16;
  int input_size = 300;  // only 300 is supported

  struct Stage {
    int blocks;
    int width;  // block base width; bottleneck output is 4x
    int stride;
  };
  /// Residual stage table (stages 1..3; detection taps stage 2 and 3).
  std::vector<Stage> resnet_stages() const {
    switch (kind) {
      case BackboneKind::resnet18: return {{2, 64, 1}, {2, 128, 2}, {2, 256, 2}};
      case BackboneKind::resnet34: return {{3, 64, 1}, {4, 128, 2}, {6, 256, 2}};
      case BackboneKind::resnet50: return {{3, 64, 1}, {4, 128, 2}, {6, 256, 2}};
      default: return {};
    }
  }
  bool bottleneck_blocks() const { return kind == BackboneKind::resnet50; }
};

/// Canonical pyramid contract for 300x300 input.
inline constexpr std::array<const char*, 6> kPyramidNames = {
    "conv4_3", "conv7", "conv8_2", "conv9_2", "conv10_2", "conv11_2"};
inline constexpr std::array<int, 6> kPyramidSizes = {38, 19, 10, 5, 3, 1};
inline constexpr std::array<int, 6> kPyramidChannels = {512, 1024, 512, 256, 256, 256};

/// Ordered, named multi-scale feature maps emitted by a backbone.
template <class S>
struct FeaturePyramid {
  std::vector<std::pair<std::string, Tensor<S>>> levels;

  const Tensor<S>& at(const std::string& name) const {
    for (const auto& [n, t] : levels)
      if (n == name) return t;
    throw std::invalid_argument("pyramid has no level named " + name);
  }
  int index_of(const std::string& name) const {
    for (size_t i = 0; i < levels.size(); ++i)
      if (levels[i].first == name) return int(i);
    return -1;
  }
};

namespace detail {

/// ResNet basic block (two 3x3 convs) with optional strided downsample path.
template <class S>
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(ParamStore<S>& store, const std::string& p, Rng& rng, int in_ch, int out_ch,
             int stride) {
    conv1_ = Conv2d<S>(store, p + ".conv1", rng, in_ch, out_ch, 3, stride, 1, false);
    bn1_ = BatchNorm2d<S>(store, p + ".bn1", out_ch);
    conv2_ = Conv2d<S>(store, p + ".conv2", rng, out_ch, out_ch, 3, 1, 1, false);
    bn2_ = BatchNorm2d<S>(store, p + ".bn2", out_ch);
    if (stride != 1 || in_ch != out_ch) {
      down_conv_ = Conv2d<S>(store, p + ".down.conv", rng, in_ch, out_ch, 1, stride, 0, false);
      down_bn_ = BatchNorm2d<S>(store, p + ".down.bn", out_ch);
      has_down_ = true;
    }
  }

  Tensor<S> operator()(const Tensor<S>& x, bool training) {
    Tensor<S> h = relu(bn1_(conv1_(x), training));
    h = bn2_(conv2_(h), training);
    Tensor<S> skip = has_down_ ? down_bn_(down_conv_(x), training) : x;
    return relu(add(h, skip));
  }

 private:
  Conv2d<S> conv1_, conv2_, down_conv_;
  BatchNorm2d<S> bn1_, bn2_, down_bn_;
  bool has_down_ = false;
};

/// ResNet bottleneck block (1x1 / 3x3 / 1x1, output 4x width).
template <class S>
class BottleneckBlock {
 public:
  BottleneckBlock() = default;
  BottleneckBlock(ParamStore<S>& store, const std::string& p, Rng& rng, int in_ch,
                  int width, int stride) {
    const int out_ch = width * 4;
    conv1_ = Conv2d<S>(store, p + ".conv1", rng, in_ch, width, 1, 1, 0, false);
    bn1_ = BatchNorm2d<S>(store, p + ".bn1", width);
    conv2_ = Conv2d<S>(store, p + ".conv2", rng, width, width, 3, stride, 1, false);
    bn2_ = BatchNorm2d<S>(store, p + ".bn2", width);
    conv3_ = Conv2d<S>(store, p + ".conv3", rng, width, out_ch, 1, 1, 0, false);
    bn3_ = BatchNorm2d<S>(store, p + ".bn3", out_ch);
    if (stride != 1 || in_ch != out_ch) {
      down_conv_ = Conv2d<S>(store, p + ".down.conv", rng, in_ch, out_ch, 1, stride, 0, false);
      down_bn_ = BatchNorm2d<S>(store, p + ".down.bn", out_ch);
      has_down_ = true;
    }
  }

  Tensor<S> operator()(const Tensor<S>& x, bool training) {
    Tensor<S> h = relu(bn1_(conv1_(x), training));
    h = relu(bn2_(conv2_(h), training));
    h = bn3_(conv3_(h), training);
    Tensor<S> skip = has_down_ ? down_bn_(down_conv_(x), training) : x;
    return relu(add(h, skip));
  }

 private:
  Conv2d<S> conv1_, conv2_, conv3_, down_conv_;
  BatchNorm2d<S> bn1_, bn2_, bn3_, down_bn_;
  bool has_down_ = false;
};

}  // namespace detail

/// Multi-scale feature extractor. The VGG16 flavour is the SSD300 stack
/// (conv4_3 tapped before pool4, fc6/fc7 folded into a dilated conv6 and
/// conv7); the ResNet flavours tap stage 2 as the 38x38 feature and stage 3,
/// projected to the canonical widths, as the 19x19 one. Both share the
/// conv8-conv11 extra stack.
template <class S>
class Backbone {
 public:
  Backbone(ParamStore<S>& store, const std::string& prefix, Rng& rng, BackboneSpec spec)
      : spec_(spec) {
    if (spec.input_size != 300)
      throw std::invalid_argument("backbone supports only 300x300 input, got " +
                                  std::to_string(spec.input_size));
    if (spec.kind == BackboneKind::vgg16)
      build_vgg(store, prefix, rng);
    else
      build_resnet(store, prefix, rng);
    // shared extra feature layers on top of the 1024x19x19 map
    extra1x1_[0] = Conv2d<S>(store, prefix + ".conv8_1", rng, 1024, 256, 1);
    extra3x3_[0] = Conv2d<S>(store, prefix + ".conv8_2", rng, 256, 512, 3, 2, 1);
    extra1x1_[1] = Conv2d<S>(store, prefix + ".conv9_1", rng, 512, 128, 1);
    extra3x3_[1] = Conv2d<S>(store, prefix + ".conv9_2", rng, 128, 256, 3, 2, 1);
    extra1x1_[2] = Conv2d<S>(store, prefix + ".conv10_1", rng, 256, 128, 1);
    extra3x3_[2] = Conv2d<S>(store, prefix + ".conv10_2", rng, 128, 256, 3, 1, 0);
    extra1x1_[3] = Conv2d<S>(store, prefix + ".conv11_1", rng, 256, 128, 1);
    extra3x3_[3] = Conv2d<S>(store, prefix + ".conv11_2", rng, 128, 256, 3, 1, 0);
  }

  const BackboneSpec& spec() const { return spec_; }

  FeaturePyramid<S> forward(const Tensor<S>& images, bool training) {
    const Shape4 s = images.shape();
    if (s.c != 3 || s.h != 300 || s.w != 300)
      throw std::invalid_argument("backbone expects (N,3,300,300) input, got " + s.str());

    Tensor<S> f38, f19;
    if (spec_.kind == BackboneKind::vgg16) {
      Tensor<S> x = images;
      for (int i = 0; i < int(vgg_convs_.size()); ++i) {
        x = relu(vgg_convs_[i](x));
        if (i == 1 || i == 3) x = max_pool2d(x, 2, 2);          // after conv1_2, conv2_2
        if (i == 6) x = max_pool2d(x, 2, 2, 0, true);           // after conv3_3: 75 -> 38
        if (i == 9) f38 = l2norm_(x);                           // conv4_3 tap
        if (i == 9) x = max_pool2d(x, 2, 2);                    // pool4: 38 -> 19
      }
      x = max_pool2d(x, 3, 1, 1);  // pool5 keeps 19x19
      x = relu(conv6_(x));
      f19 = relu(conv7_(x));
    } else {
      Tensor<S> x = relu(stem_bn_(stem_conv_(images), training));
      x = max_pool2d(x, 3, 2, 1);
      for (auto& b : blocks_[0]) x = run_block(b, x, training);
      for (auto& b : blocks_[1]) x = run_block(b, x, training);
      f38 = l2norm_(relu(proj38_bn_(proj38_(x), training)));
      for (auto& b : blocks_[2]) x = run_block(b, x, training);
      f19 = relu(proj19_bn_(proj19_(x), training));
    }

    FeaturePyramid<S> pyr;
    pyr.levels.emplace_back("conv4_3", f38);
    pyr.levels.emplace_back("conv7", f19);
    Tensor<S> x = f19;
    for (int i = 0; i < 4; ++i) {
      x = relu(extra1x1_[i](x));
      x = relu(extra3x3_[i](x));
      pyr.levels.emplace_back(kPyramidNames[i + 2], x);
    }
    return pyr;
  }

 private:
  struct ResBlockHolder {
    std::optional<detail::BasicBlock<S>> basic;
    std::optional<detail::BottleneckBlock<S>> bottleneck;
  };

  static Tensor<S> run_block(ResBlockHolder& b, const Tensor<S>& x, bool training) {
    return b.basic ? (*b.basic)(x, training) : (*b.bottleneck)(x, training);
  }

  void build_vgg(ParamStore<S>& store, const std::string& p, Rng& rng) {
    const int cfg[][2] = {{3, 64},   {64, 64},   {64, 128},  {128, 128}, {128, 256},
                          {256, 256}, {256, 256}, {256, 512}, {512, 512}, {512, 512},
                          {512, 512}, {512, 512}, {512, 512}};
    const char* names[] = {"conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1",
                           "conv3_2", "conv3_3", "conv4_1", "conv4_2", "conv4_3",
                           "conv5_1", "conv5_2", "conv5_3"};
    for (int i = 0; i < 13; ++i)
      vgg_convs_.push_back(
          Conv2d<S>(store, p + "." + names[i], rng, cfg[i][0], cfg[i][1], 3, 1, 1));
    l2norm_ = L2Norm<S>(store, p + ".l2norm", 512);
    conv6_ = Conv2d<S>(store, p + ".conv6", rng, 512, 1024, 3, 1, 6, true, 6);
    conv7_ = Conv2d<S>(store, p + ".conv7", rng, 1024, 1024, 1);
  }

  void build_resnet(ParamStore<S>& store, const std::string& p, Rng& rng) {
    stem_conv_ = Conv2d<S>(store, p + ".stem.conv", rng, 3, 64, 7, 2, 3, false);
    stem_bn_ = BatchNorm2d<S>(store, p + ".stem.bn", 64);
    const auto stages = spec_.resnet_stages();
    const bool bneck = spec_.bottleneck_blocks();
    int in_ch = 64;
    for (int si = 0; si < 3; ++si) {
      const auto& st = stages[si];
      for (int bi = 0; bi < st.blocks; ++bi) {
        std::string bp = p + ".layer" + std::to_string(si + 1) + "." + std::to_string(bi);
        int stride = bi == 0 ? st.stride : 1;
        ResBlockHolder h;
        if (bneck) {
          h.bottleneck.emplace(store, bp, rng, in_ch, st.width, stride);
          in_ch = st.width * 4;
        } else {
          h.basic.emplace(store, bp, rng, in_ch, st.width, stride);
          in_ch = st.width;
        }
        blocks_[si].push_back(std::move(h));
      }
    }
    const int c38 = bneck ? stages[1].width * 4 : stages[1].width;
    const int c19 = bneck ? stages[2].width * 4 : stages[2].width;
    proj38_ = Conv2d<S>(store, p + ".proj38", rng, c38, 512, 1, 1, 0, false);
    proj38_bn_ = BatchNorm2d<S>(store, p + ".proj38_bn", 512);
    proj19_ = Conv2d<S>(store, p + ".proj19", rng, c19, 1024, 1, 1, 0, false);
    proj19_bn_ = BatchNorm2d<S>(store, p + ".proj19_bn", 1024);
    l2norm_ = L2Norm<S>(store, p + ".l2norm", 512);
  }

  BackboneSpec spec_;
  // vgg
  std::vector<Conv2d<S>> vgg_convs_;
  Conv2d<S> conv6_, conv7_;
  // resnet
  Conv2d<S> stem_conv_, proj38_, proj19_;
  BatchNorm2d<S> stem_bn_, proj38_bn_, proj19_bn_;
  std::array<std::vector<ResBlockHolder>, 3> blocks_;
  // shared
  L2Norm<S> l2norm_;
  std::array<Conv2d<S>, 4> extra1x1_, extra3x3_;
};

}  // namespace ssdctx
