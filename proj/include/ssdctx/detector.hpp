#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ssdctx/attention.hpp"
#include "ssdctx/backbone.hpp"
#include "ssdctx/boxes.hpp"
#include "ssdctx/fusion.hpp"

namespace ssdctx {

// ============================================================================
// prior boxes
// ============================================================================

struct PriorLevelSpec {
  int feature_size = 0;
  double min_size = 0, max_size = 0;  // in input pixels
  std::vector<double> aspect_ratios;  // each r adds priors with ratio r and 1/r
};

struct PriorLayout {
  int image_size = 300;
  std::vector<PriorLevelSpec> levels;

  int priors_per_cell(int level) const {
    return 2 + 2 * int(levels[level].aspect_ratios.size());
  }
};

/// SSD300 defaults: per-cell counts (4,6,6,6,4,4) over sizes (38,19,10,5,3,1),
/// 8732 priors in total.
inline PriorLayout ssd300_prior_layout() {
  PriorLayout lay;
  lay.image_size = 300;
  const double mins[6] = {30, 60, 111, 162, 213, 264};
  const double maxs[6] = {60, 111, 162, 213, 264, 315};
  const std::vector<std::vector<double>> ratios = {{2}, {2, 3}, {2, 3}, {2, 3}, {2}, {2}};
  for (int i = 0; i < 6; ++i)
    lay.levels.push_back({kPyramidSizes[i], mins[i], maxs[i], ratios[i]});
  return lay;
}

struct PriorBoxSet {
  std::vector<CenterBox> boxes;  // clipped to [0,1], centers strictly inside
  struct LevelInfo {
    int feature_size;
    int per_cell;
    int offset;  // first prior index of the level
  };
  std::vector<LevelInfo> level_info;

  int total() const { return int(boxes.size()); }
};

/// Tiles center-form default boxes over every level of the layout. Cell
/// centers use the (i + 0.5) / feature_size convention, so they always fall
/// strictly inside (0,1); widths and heights are clipped to [0,1].
inline PriorBoxSet generate_priors(const PriorLayout& layout) {
  if (layout.levels.empty()) throw std::invalid_argument("generate_priors: empty layout");
  PriorBoxSet set;
  for (int li = 0; li < int(layout.levels.size()); ++li) {
    const auto& lv = layout.levels[li];
    if (lv.feature_size < 1) throw std::invalid_argument("generate_priors: bad feature size");
    set.level_info.push_back({lv.feature_size, layout.priors_per_cell(li), set.total()});
    const double s = lv.min_size / layout.image_size;
    const double sp = std::sqrt(lv.min_size * lv.max_size) / layout.image_size;
    auto clip = [](double v) { return float(std::clamp(v, 0.0, 1.0)); };
    for (int i = 0; i < lv.feature_size; ++i) {
      for (int j = 0; j < lv.feature_size; ++j) {
        const double cy = (i + 0.5) / lv.feature_size;
        const double cx = (j + 0.5) / lv.feature_size;
        set.boxes.push_back({clip(cx), clip(cy), clip(s), clip(s)});
        set.boxes.push_back({clip(cx), clip(cy), clip(sp), clip(sp)});
        for (double r : lv.aspect_ratios) {
          const double sr = std::sqrt(r);
          set.boxes.push_back({clip(cx), clip(cy), clip(s * sr), clip(s / sr)});
          set.boxes.push_back({clip(cx), clip(cy), clip(s / sr), clip(s * sr)});
        }
      }
    }
  }
  return set;
}

// ============================================================================
// ground-truth matching and loss
// ============================================================================

/// A labelled box in normalized corner form, class ids starting at 1
/// (0 is background).
struct GtBox {
  int label = 0;
  BoxF box;
};

struct MatchResult {
  std::vector<int> prior_class;              // 0 = background
  std::vector<std::array<float, 4>> loc_targets;  // valid where prior_class > 0
  int num_pos = 0;
};

/// SSD matching: the best prior of every ground truth is force-matched, then
/// every prior with IoU >= threshold joins its best ground truth. Targets are
/// encoded with variances (0.1, 0.2).
inline MatchResult match_and_encode(const std::vector<GtBox>& gts, const PriorBoxSet& priors,
                                    float iou_threshold = 0.5f) {
  const int P = priors.total();
  MatchResult res;
  res.prior_class.assign(P, 0);
  res.loc_targets.assign(P, {0, 0, 0, 0});
  if (gts.empty()) return res;

  std::vector<BoxF> prior_corners(P);
  for (int p = 0; p < P; ++p) {
    BoxF b = to_corner(priors.boxes[p]);
    prior_corners[p] = {std::clamp(b.x1, 0.f, 1.f), std::clamp(b.y1, 0.f, 1.f),
                        std::clamp(b.x2, 0.f, 1.f), std::clamp(b.y2, 0.f, 1.f)};
  }

  const int G = int(gts.size());
  std::vector<double> best_prior_iou(G, -1.0);
  std::vector<int> best_prior_idx(G, -1);
  std::vector<double> best_gt_iou(P, 0.0);
  std::vector<int> best_gt_idx(P, -1);
  for (int g = 0; g < G; ++g) {
    for (int p = 0; p < P; ++p) {
      double v = iou(gts[g].box, prior_corners[p]);
      if (v > best_prior_iou[g]) {
        best_prior_iou[g] = v;
        best_prior_idx[g] = p;
      }
      if (v > best_gt_iou[p]) {
        best_gt_iou[p] = v;
        best_gt_idx[p] = g;
      }
    }
  }
  // force matches win over threshold matches
  for (int g = 0; g < G; ++g) {
    best_gt_idx[best_prior_idx[g]] = g;
    best_gt_iou[best_prior_idx[g]] = 2.0;
  }
  for (int p = 0; p < P; ++p) {
    if (best_gt_idx[p] < 0 || best_gt_iou[p] < iou_threshold) continue;
    const GtBox& gt = gts[best_gt_idx[p]];
    res.prior_class[p] = gt.label;
    res.loc_targets[p] = encode_box(gt.box, priors.boxes[p]);
    ++res.num_pos;
  }
  return res;
}

template <class S>
struct MultiboxLossOutput {
  Tensor<S> total;       // scalar, graph-connected
  double loc_loss = 0;   // smooth-L1 part (already normalized)
  double conf_loss = 0;  // cross-entropy part (already normalized)
  int num_pos = 0;
};

namespace detail {

template <class S>
double log_sum_exp(const S* row, Index n) {
  S m = row[0];
  for (Index i = 1; i < n; ++i) m = std::max(m, row[i]);
  double s = 0;
  for (Index i = 0; i < n; ++i) s += std::exp(double(row[i]) - double(m));
  return double(m) + std::log(s);
}

}  // namespace detail

/// Multibox objective: smooth-L1 over positive priors' offsets plus softmax
/// cross-entropy over positives and the hardest negatives (neg_pos_ratio per
/// positive, per image), everything normalized by the positive count.
/// Zero positives in the whole batch yields a zero loss.
template <class S>
MultiboxLossOutput<S> multibox_loss(const Tensor<S>& loc, const Tensor<S>& conf,
                                    const std::vector<MatchResult>& matches,
                                    float neg_pos_ratio = 3.0f) {
  const Shape4 ls = loc.shape(), cs = conf.shape();
  const Index N = ls.n, P = ls.c, C = cs.h;
  if (cs.n != N || cs.c != P || ls.h != 4)
    throw std::invalid_argument("multibox_loss: loc/conf shape mismatch " + ls.str() +
                                " vs " + cs.str());
  if (Index(matches.size()) != N)
    throw std::invalid_argument("multibox_loss: batch size mismatch");

  int total_pos = 0;
  for (const auto& m : matches) total_pos += m.num_pos;

  MultiboxLossOutput<S> out;
  out.num_pos = total_pos;
  auto dloc = std::make_shared<Eigen::ArrayX<S>>(Eigen::ArrayX<S>::Zero(loc.numel()));
  auto dconf = std::make_shared<Eigen::ArrayX<S>>(Eigen::ArrayX<S>::Zero(conf.numel()));

  double loc_sum = 0, conf_sum = 0;
  if (total_pos > 0) {
    const S inv_pos = S(1) / S(total_pos);
    for (Index n = 0; n < N; ++n) {
      const MatchResult& m = matches[n];
      // localization: smooth L1 on positives
      for (Index p = 0; p < P; ++p) {
        if (m.prior_class[p] <= 0) continue;
        for (int j = 0; j < 4; ++j) {
          const Index idx = (n * P + p) * 4 + j;
          S d = loc.value()[idx] - S(m.loc_targets[p][j]);
          if (std::abs(d) < S(1)) {
            loc_sum += 0.5 * double(d) * double(d);
            (*dloc)[idx] = d * inv_pos;
          } else {
            loc_sum += std::abs(double(d)) - 0.5;
            (*dloc)[idx] = (d > 0 ? S(1) : S(-1)) * inv_pos;
          }
        }
      }
      // hard negative mining: rank background priors by their CE against
      // background and keep the worst neg_pos_ratio * num_pos of this image
      int num_pos_img = 0;
      std::vector<std::pair<double, int>> neg_rank;
      neg_rank.reserve(P);
      for (Index p = 0; p < P; ++p) {
        const S* row = conf.data() + (n * P + p) * C;
        if (m.prior_class[p] > 0) {
          ++num_pos_img;
        } else {
          neg_rank.emplace_back(detail::log_sum_exp(row, C) - double(row[0]), int(p));
        }
      }
      int num_neg = std::min<int>(int(neg_pos_ratio * num_pos_img), int(neg_rank.size()));
      std::partial_sort(neg_rank.begin(), neg_rank.begin() + num_neg, neg_rank.end(),
                        [](const auto& a, const auto& b) {
                          return a.first > b.first || (a.first == b.first && a.second < b.second);
                        });
      // cross entropy over positives and selected negatives
      auto add_ce = [&](Index p, Index target) {
        const Index base = (n * P + p) * C;
        const S* row = conf.data() + base;
        double lse = detail::log_sum_exp(row, C);
        conf_sum += lse - double(row[target]);
        for (Index c = 0; c < C; ++c) {
          S soft = S(std::exp(double(row[c]) - lse));
          (*dconf)[base + c] += (soft - (c == target ? S(1) : S(0))) * inv_pos;
        }
      };
      for (Index p = 0; p < P; ++p)
        if (m.prior_class[p] > 0) add_ce(p, m.prior_class[p]);
      for (int i = 0; i < num_neg; ++i) add_ce(neg_rank[i].second, 0);
    }
    loc_sum /= total_pos;
    conf_sum /= total_pos;
  }

  out.loc_loss = loc_sum;
  out.conf_loss = conf_sum;
  out.total = Tensor<S>::make_op(
      {1, 1, 1, 1}, {loc, conf}, [loc, conf, dloc, dconf](auto& node) {
        const S g = node.grad[0];
        if (loc.requires_grad()) {
          loc.node()->ensure_grad();
          loc.node()->grad += g * (*dloc);
        }
        if (conf.requires_grad()) {
          conf.node()->ensure_grad();
          conf.node()->grad += g * (*dconf);
        }
      });
  out.total.value()[0] = S(loc_sum + conf_sum);
  return out;
}

// ============================================================================
// detector variants
// ============================================================================

enum class VariantKind { ssd, f_ssd, a_ssd, fa_ssd };

inline const char* to_string(VariantKind k) {
  switch (k) {
    case VariantKind::ssd: return "ssd";
    case VariantKind::f_ssd: return "f_ssd";
    case VariantKind::a_ssd: return "a_ssd";
    case VariantKind::fa_ssd: return "fa_ssd";
  }
  return "?";
}

inline VariantKind variant_kind_from_string(const std::string& s) {
  if (s == "ssd") return VariantKind::ssd;
  if (s == "f_ssd") return VariantKind::f_ssd;
  if (s == "a_ssd") return VariantKind::a_ssd;
  if (s == "fa_ssd") return VariantKind::fa_ssd;
  throw std::invalid_argument("unknown variant: " + s);
}

/// Which blocks are active per variant:
///   ssd    — raw pyramid into the heads
///   f_ssd  — fusion (with target conv) on conv4_3 and conv7
///   a_ssd  — two-stage attention on conv4_3 and conv7
///   fa_ssd — fusion whose target conv is replaced by a one-stage attention
struct VariantSpec {
  VariantKind kind = VariantKind::ssd;
  BackboneSpec backbone;
  int num_classes = 21;  // including background
  bool attention_residual_form = false;
  std::vector<FusionSpec> fusions = {{"conv4_3", {"conv7", "conv8_2"}, true},
                                     {"conv7", {"conv8_2", "conv9_2"}, true}};
};

template <class S>
struct DetectorOutput {
  Tensor<S> loc;   // (N, priors, 4, 1)
  Tensor<S> conf;  // (N, priors, classes, 1)
};

/// Full detection model: backbone pyramid, optional fusion / attention on the
/// two lowest levels, and per-level 3x3 prediction heads. All variants expose
/// the same output interface for a fixed (backbone, num_classes).
template <class S>
class DetectorModel {
 public:
  DetectorModel(VariantSpec spec, uint64_t seed)
      : spec_(std::move(spec)), rng_(seed), layout_(ssd300_prior_layout()) {
    if (spec_.num_classes < 2)
      throw std::invalid_argument("detector: need at least background + 1 class");
    backbone_ = std::make_unique<Backbone<S>>(store_, "backbone", rng_, spec_.backbone);
    priors_ = generate_priors(layout_);

    std::array<int, 6> head_ch{};
    for (int i = 0; i < 6; ++i) head_ch[i] = kPyramidChannels[i];

    const bool with_fusion = spec_.kind == VariantKind::f_ssd || spec_.kind == VariantKind::fa_ssd;
    const bool fa = spec_.kind == VariantKind::fa_ssd;
    if (with_fusion) {
      for (size_t i = 0; i < spec_.fusions.size(); ++i) {
        FusionSpec fs = spec_.fusions[i];
        fs.include_target_conv = !fa;
        int li = level_index(fs.target);
        fusions_.emplace_back(store_, "fusion." + fs.target, rng_, fs);
        fusion_level_[li] = int(fusions_.size()) - 1;
        head_ch[li] = fusions_.back().fused_channels();
        if (fa) {
          attentions_.emplace_back(
              store_, "attention." + fs.target, rng_,
              AttentionModuleSpec{kPyramidChannels[li], 1, spec_.attention_residual_form});
          attention_level_[li] = int(attentions_.size()) - 1;
        }
      }
    } else if (spec_.kind == VariantKind::a_ssd) {
      for (const char* name : {"conv4_3", "conv7"}) {
        int li = level_index(name);
        attentions_.emplace_back(
            store_, std::string("attention.") + name, rng_,
            AttentionModuleSpec{kPyramidChannels[li], 2, spec_.attention_residual_form});
        attention_level_[li] = int(attentions_.size()) - 1;
      }
    }

    for (int i = 0; i < 6; ++i) {
      const int A = layout_.priors_per_cell(i);
      loc_heads_[i] = Conv2d<S>(store_, "head.loc" + std::to_string(i), rng_, head_ch[i],
                                A * 4, 3, 1, 1);
      conf_heads_[i] = Conv2d<S>(store_, "head.conf" + std::to_string(i), rng_, head_ch[i],
                                 A * spec_.num_classes, 3, 1, 1);
    }
  }

  const VariantSpec& spec() const { return spec_; }
  ParamStore<S>& store() { return store_; }
  const PriorBoxSet& priors() const { return priors_; }
  void train(bool on) { training_ = on; }
  bool training() const { return training_; }

  DetectorOutput<S> forward(const Tensor<S>& images) {
    FeaturePyramid<S> pyr = backbone_->forward(images, training_);
    last_masks_.clear();

    std::array<Tensor<S>, 6> feats;
    for (int i = 0; i < 6; ++i) feats[i] = pyr.levels[i].second;

    for (int i = 0; i < 6; ++i) {
      if (fusion_level_[i] >= 0) {
        Tensor<S> target_override;
        if (attention_level_[i] >= 0) {
          auto& attn = attentions_[attention_level_[i]];
          target_override = attn.forward(feats[i], training_);
          record_masks(pyr.levels[i].first, attn);
        }
        feats[i] = fusions_[fusion_level_[i]].fuse(pyr, training_, target_override);
      } else if (attention_level_[i] >= 0) {
        auto& attn = attentions_[attention_level_[i]];
        feats[i] = attn.forward(feats[i], training_);
        record_masks(pyr.levels[i].first, attn);
      }
    }

    std::vector<Tensor<S>> loc_parts, conf_parts;
    for (int i = 0; i < 6; ++i) {
      loc_parts.push_back(flatten_head(loc_heads_[i](feats[i]), 4));
      conf_parts.push_back(flatten_head(conf_heads_[i](feats[i]), spec_.num_classes));
    }
    return {concat_channels(loc_parts), concat_channels(conf_parts)};
  }

  /// Named masks ("conv4_3" etc., one entry per stage) from the last forward.
  struct NamedMask {
    std::string level;
    int stage;
    Tensor<S> mask;
  };
  const std::vector<NamedMask>& last_masks() const { return last_masks_; }
  bool has_attention() const { return !attentions_.empty(); }

 private:
  static int level_index(const std::string& name) {
    for (int i = 0; i < int(kPyramidNames.size()); ++i)
      if (name == kPyramidNames[i]) return i;
    throw std::invalid_argument("detector: fusion on unknown layer " + name);
  }

  void record_masks(const std::string& level, const AttentionModule<S>& attn) {
    for (size_t s = 0; s < attn.masks().size(); ++s)
      last_masks_.push_back({level, int(s) + 1, attn.masks()[s]});
  }

  VariantSpec spec_;
  Rng rng_;
  ParamStore<S> store_;
  PriorLayout layout_;
  PriorBoxSet priors_;
  std::unique_ptr<Backbone<S>> backbone_;
  std::vector<FusionBlock<S>> fusions_;
  std::vector<AttentionModule<S>> attentions_;
  std::array<int, 6> fusion_level_ = {-1, -1, -1, -1, -1, -1};
  std::array<int, 6> attention_level_ = {-1, -1, -1, -1, -1, -1};
  std::array<Conv2d<S>, 6> loc_heads_, conf_heads_;
  bool training_ = false;
  std::vector<NamedMask> last_masks_;
};

}  // namespace ssdctx
