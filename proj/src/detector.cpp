// Copyright 2026 The PBR Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "pbr/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pbr/checkpoint.hpp"
#include "pbr/error.hpp"
#include "pbr/parallel.hpp"

namespace pbr {
namespace fs = std::filesystem;

namespace {

constexpr Index kStemChannels = 16;
constexpr Index kTrunkChannels = 32;
constexpr double kReluGain = 6.0;
constexpr double kLinearGain = 3.0;
constexpr Index kInferChunk = 1024;

// Negatives are drawn from this side-length range (log-uniform), half of
// them placed around ground truths so partial overlaps are represented.
constexpr double kNegMinSide = 10.0;
constexpr double kNegMaxSide = 72.0;

template <typename T>
Tensor<T> lookup(ParameterSet<T>& params, const std::string& name) {
  auto* p = params.find(name);
  if (p == nullptr) throw InvalidArgument("missing parameter " + name);
  return p->value;
}

template <typename T>
Tensor<T> fc_trunk(const FcHeadParams<T>& h, const Tensor<T>& x) {
  auto y = relu(linear(x, h.fc1_w, h.fc1_b));
  return relu(linear(y, h.fc2_w, h.fc2_b));
}

std::vector<Index> iota_rows(std::size_t n) {
  std::vector<Index> rows(n);
  std::iota(rows.begin(), rows.end(), Index{0});
  return rows;
}

Box jitter_box(const Box& gt, double center, double log_scale, double img_w,
               double img_h, Rng& rng) {
  const double w = gt.width(), h = gt.height();
  const double cx = gt.cx() + rng.uniform(-center, center) * w;
  const double cy = gt.cy() + rng.uniform(-center, center) * h;
  const double nw = w * std::exp(rng.uniform(-log_scale, log_scale));
  const double nh = h * std::exp(rng.uniform(-log_scale, log_scale));
  return clip_to_image({cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh},
                       img_w, img_h)
      .box;
}

double max_iou(const Box& box, const std::vector<Object>& gts) {
  double best = 0;
  for (const auto& g : gts) best = std::max(best, iou(box, g.bbox));
  return best;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.8g", v);
  return buf;
}

}  // namespace

std::string to_string(RefinementMode mode) {
  switch (mode) {
    case RefinementMode::kBoundaryAreasBpn: return "boundary_areas_bpn";
    case RefinementMode::kBoundaryAreasFc: return "boundary_areas_fc";
    case RefinementMode::kWholeProposalFc: return "whole_proposal_fc";
  }
  return "?";
}

RefinementMode parse_refinement_mode(const std::string& name) {
  for (auto m : {RefinementMode::kBoundaryAreasBpn, RefinementMode::kBoundaryAreasFc,
                 RefinementMode::kWholeProposalFc}) {
    if (to_string(m) == name) return m;
  }
  throw InvalidArgument("unknown refinement mode '" + name + "'");
}

void DetectorConfig::validate() const {
  if (image_size < 32 || image_size % 32 != 0) {
    throw InvalidArgument("image_size must be a positive multiple of 32");
  }
  if (head_hidden < 1) throw InvalidArgument("head_hidden must be >= 1");
  bpn().validate();
  refine.validate();
  levels.validate();
  if (!(delta_norm.xy > 0 && delta_norm.wh > 0)) {
    throw InvalidArgument("delta normalization factors must be > 0");
  }
  if (!(loss.cls > 0 && loss.box > 0 && loss.refine > 0 && loss.beta > 0)) {
    throw InvalidArgument("loss weights and beta must be > 0");
  }
  if (optim.batch_size < 1 || optim.epochs < 0 || !(optim.lr >= 0)) {
    throw InvalidArgument("optimizer needs batch_size >= 1, epochs >= 0, lr >= 0");
  }
  if (jitter.positives_per_gt < 0 || jitter.negatives < 0 || jitter.max_tries < 1) {
    throw InvalidArgument("jitter counts must be non-negative");
  }
  if (infer.grid.scales.empty() || infer.grid.ratios.empty() || !(infer.grid.stride > 0)) {
    throw InvalidArgument("inference grid needs scales, ratios and a positive stride");
  }
  if (infer.max_detections < 1) throw InvalidArgument("max_detections must be >= 1");
}

std::vector<Proposal> generate_proposals(const std::vector<Object>& gts,
                                         const JitterConfig& jitter,
                                         const LevelAssignment& levels, double img_w,
                                         double img_h, Rng& rng, ProposalStats* stats) {
  if (gts.empty()) throw InvalidArgument("generate_proposals: need at least one gt");
  std::vector<Proposal> out;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const Box& gt = gts[g].bbox;
    for (int n = 0; n < jitter.positives_per_gt; ++n) {
      Box best = gt;
      double best_iou = -1;
      bool accepted = false;
      for (int attempt = 0; attempt < jitter.max_tries; ++attempt) {
        const Box cand = jitter_box(gt, jitter.center, jitter.log_scale, img_w, img_h, rng);
        if (!cand.valid()) continue;
        const double v = iou(cand, gt);
        if (v > best_iou) {
          best_iou = v;
          best = cand;
        }
        if (v >= jitter.positive_iou) {
          accepted = true;
          break;
        }
      }
      if (!accepted && stats) ++stats->relaxed_positives;
      out.push_back({best, static_cast<int>(g), true, assign_level(best, levels)});
    }
  }
  for (int n = 0; n < jitter.negatives; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < jitter.max_tries && !placed; ++attempt) {
      Box cand;
      if (n % 2 == 0) {
        const double w = std::exp(rng.uniform(std::log(kNegMinSide), std::log(kNegMaxSide)));
        const double h = w * std::exp(rng.uniform(-0.7, 0.7));
        const double x1 = rng.uniform(0.0, std::max(0.0, img_w - w));
        const double y1 = rng.uniform(0.0, std::max(0.0, img_h - h));
        cand = clip_to_image({x1, y1, x1 + w, y1 + h}, img_w, img_h).box;
      } else {
        const Box& gt = gts[static_cast<std::size_t>(rng.uniform_int(0, int(gts.size()) - 1))].bbox;
        cand = jitter_box(gt, 0.8, 0.7, img_w, img_h, rng);
      }
      if (!cand.valid() || cand.width() < 2 || cand.height() < 2) continue;
      if (max_iou(cand, gts) < jitter.negative_iou) {
        out.push_back({cand, -1, false, assign_level(cand, levels)});
        placed = true;
      }
    }
    if (!placed && stats) ++stats->missing_negatives;
  }
  return out;
}

std::vector<Box> grid_proposals(const GridConfig& grid, double img_w, double img_h) {
  std::vector<Box> out;
  for (double cy = 0.5 * grid.stride; cy < img_h; cy += grid.stride) {
    for (double cx = 0.5 * grid.stride; cx < img_w; cx += grid.stride) {
      for (double s : grid.scales) {
        for (double r : grid.ratios) {
          const double w = s / std::sqrt(r), h = s * std::sqrt(r);
          const ClippedBox b = clip_to_image(
              {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}, img_w, img_h);
          if (!b.degenerate && b.box.width() >= 2 && b.box.height() >= 2) out.push_back(b.box);
        }
      }
    }
  }
  return out;
}

template <typename T>
BackboneParams<T> register_backbone(ParameterSet<T>& params, int channels, Rng& rng) {
  const Index d = channels;
  BackboneParams<T> b;
  b.stem_w = params.add_uniform("backbone.stem.weight", {kStemChannels, 3, 3, 3}, 27, rng,
                                kReluGain);
  b.stem_b = params.add("backbone.stem.bias", {kStemChannels});
  b.c2a_w = params.add_uniform("backbone.c2a.weight", {kTrunkChannels, kStemChannels, 3, 3},
                               kStemChannels * 9, rng, kReluGain);
  b.c2a_b = params.add("backbone.c2a.bias", {kTrunkChannels});
  b.c2b_w = params.add_uniform("backbone.c2b.weight", {kTrunkChannels, kTrunkChannels, 3, 3},
                               kTrunkChannels * 9, rng, kReluGain);
  b.c2b_b = params.add("backbone.c2b.bias", {kTrunkChannels});
  for (int i = 0; i < 3; ++i) {
    const std::string n = "backbone.c" + std::to_string(i + 3);
    b.down_w[i] = params.add_uniform(n + ".weight", {kTrunkChannels, kTrunkChannels, 3, 3},
                                     kTrunkChannels * 9, rng, kReluGain);
    b.down_b[i] = params.add(n + ".bias", {kTrunkChannels});
  }
  for (int k = 0; k < kNumLevels; ++k) {
    const std::string n = "fpn.lateral" + std::to_string(k + kMinLevel);
    b.lateral_w[k] = params.add_uniform(n + ".weight", {d, kTrunkChannels, 1, 1},
                                        kTrunkChannels, rng, kLinearGain);
    b.lateral_b[k] = params.add(n + ".bias", {d});
  }
  for (int k = 0; k < kNumLevels; ++k) {
    const std::string n = "fpn.smooth" + std::to_string(k + kMinLevel);
    b.smooth_w[k] = params.add_uniform(n + ".weight", {d, d, 3, 3}, d * 9, rng, kLinearGain);
    b.smooth_b[k] = params.add(n + ".bias", {d});
  }
  return b;
}

template <typename T>
BackboneParams<T> bind_backbone(ParameterSet<T>& params) {
  BackboneParams<T> b;
  b.stem_w = lookup(params, "backbone.stem.weight");
  b.stem_b = lookup(params, "backbone.stem.bias");
  b.c2a_w = lookup(params, "backbone.c2a.weight");
  b.c2a_b = lookup(params, "backbone.c2a.bias");
  b.c2b_w = lookup(params, "backbone.c2b.weight");
  b.c2b_b = lookup(params, "backbone.c2b.bias");
  for (int i = 0; i < 3; ++i) {
    const std::string n = "backbone.c" + std::to_string(i + 3);
    b.down_w[i] = lookup(params, n + ".weight");
    b.down_b[i] = lookup(params, n + ".bias");
  }
  for (int k = 0; k < kNumLevels; ++k) {
    const std::string l = "fpn.lateral" + std::to_string(k + kMinLevel);
    const std::string s = "fpn.smooth" + std::to_string(k + kMinLevel);
    b.lateral_w[k] = lookup(params, l + ".weight");
    b.lateral_b[k] = lookup(params, l + ".bias");
    b.smooth_w[k] = lookup(params, s + ".weight");
    b.smooth_b[k] = lookup(params, s + ".bias");
  }
  return b;
}

template <typename T>
FeaturePyramid<T> backbone_forward(const BackboneParams<T>& p, const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("backbone_forward: expected [N,3,H,W], got " +
                     shape_string(images.shape()));
  }
  if (images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0) {
    throw InvalidArgument("backbone_forward: image sides must be divisible by 32, got " +
                          shape_string(images.shape()));
  }
  const Conv2dOptions down{.stride_h = 2, .stride_w = 2, .pad_h = 1, .pad_w = 1};
  const Conv2dOptions same{.pad_h = 1, .pad_w = 1};

  auto x = relu(conv2d(images, p.stem_w, p.stem_b, down));
  x = relu(conv2d(x, p.c2a_w, p.c2a_b, down));
  std::array<Tensor<T>, kNumLevels> c;
  c[0] = relu(conv2d(x, p.c2b_w, p.c2b_b, same));
  for (int i = 0; i < 3; ++i) c[i + 1] = relu(conv2d(c[i], p.down_w[i], p.down_b[i], down));

  std::array<Tensor<T>, kNumLevels> merged;
  merged[3] = conv2d(c[3], p.lateral_w[3], p.lateral_b[3]);
  for (int k = 2; k >= 0; --k) {
    merged[k] = conv2d(c[k], p.lateral_w[k], p.lateral_b[k]) + upsample2x(merged[k + 1]);
  }
  FeaturePyramid<T> out;
  for (int k = 0; k < kNumLevels; ++k) {
    out.levels[k] = conv2d(merged[k], p.smooth_w[k], p.smooth_b[k], same);
  }
  return out;
}

template <typename T>
FcHeadParams<T> register_fc_head(ParameterSet<T>& params, const std::string& prefix,
                                 Index in_features, Index hidden, Index outputs,
                                 Index outputs2, Rng& rng) {
  FcHeadParams<T> h;
  h.fc1_w = params.add_uniform(prefix + ".fc1.weight", {hidden, in_features}, in_features, rng,
                               kReluGain);
  h.fc1_b = params.add(prefix + ".fc1.bias", {hidden});
  h.fc2_w = params.add_uniform(prefix + ".fc2.weight", {hidden, hidden}, hidden, rng, kReluGain);
  h.fc2_b = params.add(prefix + ".fc2.bias", {hidden});
  h.out_w = params.add(prefix + ".out.weight", {outputs, hidden});
  h.out_b = params.add(prefix + ".out.bias", {outputs});
  if (outputs2 > 0) {
    h.out2_w = params.add(prefix + ".out2.weight", {outputs2, hidden});
    h.out2_b = params.add(prefix + ".out2.bias", {outputs2});
  }
  return h;
}

template <typename T>
FcHeadParams<T> bind_fc_head(ParameterSet<T>& params, const std::string& prefix) {
  FcHeadParams<T> h;
  h.fc1_w = lookup(params, prefix + ".fc1.weight");
  h.fc1_b = lookup(params, prefix + ".fc1.bias");
  h.fc2_w = lookup(params, prefix + ".fc2.weight");
  h.fc2_b = lookup(params, prefix + ".fc2.bias");
  h.out_w = lookup(params, prefix + ".out.weight");
  h.out_b = lookup(params, prefix + ".out.bias");
  if (params.find(prefix + ".out2.weight") != nullptr) {
    h.out2_w = lookup(params, prefix + ".out2.weight");
    h.out2_b = lookup(params, prefix + ".out2.bias");
  }
  return h;
}

template <typename T>
Stage1Output<T> stage1_forward(const FcHeadParams<T>& head, const FeaturePyramid<T>& pyramid,
                               std::span<const Roi> rois, std::span<const int> levels,
                               const RoiAlignOptions& roi) {
  const Index r = static_cast<Index>(rois.size());
  auto feats = roi_align(pyramid, rois, levels, roi);
  auto hidden = fc_trunk(head, reshape(feats, {r, feats.numel() / std::max<Index>(r, 1)}));
  return {linear(hidden, head.out_w, head.out_b), linear(hidden, head.out2_w, head.out2_b)};
}

Detector::Detector(DetectorConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, 0));
  const Index k = config_.num_categories;
  const Index feat = Index(config_.channels) * config_.roi.out * config_.roi.out;
  backbone_ = register_backbone(params_, config_.channels, rng);
  head_ = register_fc_head(params_, "head", feat, config_.head_hidden, k + 1, 4 * k, rng);
  for (int t = 1; t < config_.refine.num_stages; ++t) {
    const std::string prefix = "refine" + std::to_string(t);
    switch (config_.mode) {
      case RefinementMode::kBoundaryAreasBpn:
        bpn_heads_.push_back(register_bpn(params_, prefix, config_.bpn(), rng));
        break;
      case RefinementMode::kBoundaryAreasFc: {
        std::array<FcHeadParams<float>, 4> heads;
        for (Side s : kSides) {
          heads[static_cast<int>(s)] = register_fc_head(
              params_, prefix + "." + side_name(s), feat, config_.head_hidden, k, 0, rng);
        }
        side_fc_heads_.push_back(heads);
        break;
      }
      case RefinementMode::kWholeProposalFc:
        box_fc_heads_.push_back(
            register_fc_head(params_, prefix, feat, config_.head_hidden, 4 * k, 0, rng));
        break;
    }
  }
}

FeaturePyramid<float> Detector::backbone(const Tensor<float>& images) const {
  return backbone_forward(backbone_, images);
}

Stage1Output<float> Detector::stage1(const FeaturePyramid<float>& pyramid,
                                     std::span<const Roi> rois,
                                     std::span<const int> levels) const {
  return stage1_forward(head_, pyramid, rois, levels, config_.roi);
}

RefineResult Detector::refine_stage(const FeaturePyramid<float>& pyramid,
                                    std::span<const RefineBox> boxes, int t) const {
  if (t < 1 || t >= config_.refine.num_stages) {
    throw InvalidArgument("refine_stage: stage " + std::to_string(t) + " out of range");
  }
  const double img = config_.image_size;
  const bool whole = config_.mode == RefinementMode::kWholeProposalFc;
  RefineResult res;
  res.c = whole ? 0.0 : config_.refine.shrink(t);

  std::vector<int> pool_levels;
  std::vector<Index> cats;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const RefineBox& b = boxes[i];
    if (whole) {
      if (!b.box.valid()) {
        ++res.degenerate;
        continue;
      }
    } else {
      try {
        res.areas.push_back(boundary_areas(b.box, res.c, img, img));
      } catch (const DegenerateBox&) {
        ++res.degenerate;
        continue;
      }
    }
    res.rows.push_back(static_cast<Index>(i));
    pool_levels.push_back(refine_level(b.level));
    cats.push_back(b.category);
  }

  const Index p = static_cast<Index>(res.rows.size());
  if (p == 0) {
    res.prediction = Tensor<float>({0, 4});
    res.next = decode_refinement(boxes, res);
    return res;
  }
  const auto rows = iota_rows(res.rows.size());
  const Index feat = Index(config_.channels) * config_.roi.out * config_.roi.out;

  if (whole) {
    std::vector<Roi> rois;
    for (Index r : res.rows) rois.push_back({boxes[r].batch, boxes[r].box});
    auto feats = roi_align(pyramid, rois, pool_levels, config_.roi);
    const auto& head = box_fc_heads_[t - 1];
    auto out = linear(fc_trunk(head, reshape(feats, {p, feat})), head.out_w, head.out_b);
    res.prediction = gather_groups(out, rows, cats, 4);
  } else {
    std::vector<Tensor<float>> per_side;
    for (Side s : kSides) {
      std::vector<Roi> rois;
      for (std::size_t j = 0; j < res.rows.size(); ++j) {
        rois.push_back({boxes[res.rows[j]].batch, res.areas[j].area(s)});
      }
      auto feats = roi_align(pyramid, rois, pool_levels, config_.roi);
      Tensor<float> out;
      if (config_.mode == RefinementMode::kBoundaryAreasBpn) {
        out = bpn_forward(orient_feature(feats, s), bpn_heads_[t - 1].side(s), config_.bpn());
      } else {
        const auto& head = side_fc_heads_[t - 1][static_cast<int>(s)];
        out = linear(fc_trunk(head, reshape(feats, {p, feat})), head.out_w, head.out_b);
      }
      per_side.push_back(gather_groups(out, rows, cats, 1));
    }
    res.prediction = concat(per_side, 1);
  }
  res.next = decode_refinement(boxes, res);
  return res;
}

std::vector<RefineBox> Detector::decode_refinement(std::span<const RefineBox> boxes,
                                                   const RefineResult& res) const {
  std::vector<RefineBox> next(boxes.begin(), boxes.end());
  for (auto& b : next) b.level = refine_level(b.level);
  const auto pred = res.prediction.data();
  const double img = config_.image_size;
  for (std::size_t j = 0; j < res.rows.size(); ++j) {
    const Index i = res.rows[j];
    const float* v = pred.data() + j * 4;
    if (config_.mode == RefinementMode::kWholeProposalFc) {
      const Box decoded = decode_delta(boxes[i].box, {v[0], v[1], v[2], v[3]}, config_.delta_norm);
      const ClippedBox clipped = clip_to_image(decoded, img, img);
      if (!clipped.degenerate) next[i].box = clipped.box;
      continue;
    }
    Sigma sigma{v[0], v[1], v[2], v[3]};
    if (config_.refine.clamp) sigma = clamp_sigma(sigma, *config_.refine.clamp).sigma;
    try {
      next[i].box = decode_box(res.areas[j], boxes[i].box, res.c, sigma).box;
    } catch (const DegenerateBox&) {
      // keep B_t
    }
  }
  return next;
}

std::vector<Detection> Detector::infer(const Image& image) const {
  NoGradGuard no_grad;
  const double img_w = image.width, img_h = image.height;
  if (image.width != config_.image_size || image.height != config_.image_size) {
    throw InvalidArgument("infer: image is " + std::to_string(image.width) + "x" +
                          std::to_string(image.height) + ", model expects " +
                          std::to_string(config_.image_size));
  }
  const auto x = image.to_tensor();
  const auto pyramid = backbone(reshape(x, {1, 3, x.dim(1), x.dim(2)}));
  const auto grid = grid_proposals(config_.infer.grid, img_w, img_h);
  const int k = config_.num_categories;

  std::vector<ScoredBox> candidates;
  std::vector<int> cand_levels;
  for (std::size_t start = 0; start < grid.size(); start += kInferChunk) {
    const std::size_t end = std::min(grid.size(), start + kInferChunk);
    std::vector<Roi> rois;
    std::vector<int> levels;
    for (std::size_t i = start; i < end; ++i) {
      rois.push_back({0, grid[i]});
      levels.push_back(assign_level(grid[i], config_.levels));
    }
    const auto out = stage1(pyramid, rois, levels);
    const auto logits = out.cls_logits.data();
    const auto deltas = out.deltas.data();
    for (std::size_t r = 0; r < rois.size(); ++r) {
      const float* row = logits.data() + r * (k + 1);
      const float mx = *std::max_element(row, row + k + 1);
      double total = 0;
      for (int c = 0; c <= k; ++c) total += std::exp(double(row[c]) - mx);
      int best = 1;
      for (int c = 2; c <= k; ++c) {
        if (row[c] > row[best]) best = c;
      }
      const double score = std::exp(double(row[best]) - mx) / total;
      if (score < config_.infer.score_thresh) continue;
      const float* d = deltas.data() + r * 4 * k + 4 * (best - 1);
      const ClippedBox b = clip_to_image(
          decode_delta(rois[r].box, {d[0], d[1], d[2], d[3]}, config_.delta_norm), img_w, img_h);
      if (b.degenerate) continue;
      candidates.push_back({b.box, score, best - 1});
      cand_levels.push_back(levels[r]);
    }
  }

  auto keep = nms_indices(candidates, config_.infer.nms_iou);
  if (keep.size() > static_cast<std::size_t>(config_.infer.max_detections)) {
    keep.resize(config_.infer.max_detections);
  }
  std::vector<Detection> dets;
  std::vector<RefineBox> current;
  for (std::size_t i : keep) {
    dets.push_back({{candidates[i].box}, candidates[i].category, candidates[i].score});
    current.push_back({0, candidates[i].box, cand_levels[i], candidates[i].category});
  }
  if (current.empty()) return dets;
  for (int t = 1; t < config_.refine.num_stages; ++t) {
    current = refine_stage(pyramid, current, t).next;
    for (std::size_t i = 0; i < dets.size(); ++i) dets[i].stage_boxes.push_back(current[i].box);
  }
  return dets;
}

std::vector<std::vector<Box>> Detector::run_stages(const Image& image,
                                                   std::span<const Proposal> proposals,
                                                   std::span<const int> categories) const {
  NoGradGuard no_grad;
  std::vector<std::vector<Box>> out(proposals.size());
  if (proposals.empty()) return out;
  const auto x = image.to_tensor();
  const auto pyramid = backbone(reshape(x, {1, 3, x.dim(1), x.dim(2)}));
  std::vector<Roi> rois;
  std::vector<int> levels;
  for (const auto& p : proposals) {
    rois.push_back({0, p.box});
    levels.push_back(p.level);
  }
  const auto s1 = stage1(pyramid, rois, levels);
  const auto deltas = s1.deltas.data();
  const int k = config_.num_categories;
  std::vector<RefineBox> current;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const float* d = deltas.data() + i * 4 * k + 4 * categories[i];
    const ClippedBox b = clip_to_image(
        decode_delta(proposals[i].box, {d[0], d[1], d[2], d[3]}, config_.delta_norm),
        image.width, image.height);
    const Box b1 = b.degenerate ? proposals[i].box : b.box;
    current.push_back({0, b1, proposals[i].level, categories[i]});
    out[i].push_back(b1);
  }
  for (int t = 1; t < config_.refine.num_stages; ++t) {
    current = refine_stage(pyramid, current, t).next;
    for (std::size_t i = 0; i < current.size(); ++i) out[i].push_back(current[i].box);
  }
  return out;
}

std::vector<float> refinement_targets(const RefineResult& result,
                                      std::span<const RefineBox> boxes,
                                      std::span<const Box> assigned_gt,
                                      const DetectorConfig& config) {
  const bool whole = config.mode == RefinementMode::kWholeProposalFc;
  std::vector<float> out;
  out.reserve(result.rows.size() * 4);
  for (std::size_t j = 0; j < result.rows.size(); ++j) {
    const Index i = result.rows[j];
    const Box& gt = assigned_gt[i];
    if (whole) {
      for (double v : encode_delta(boxes[i].box, gt, config.delta_norm)) {
        out.push_back(static_cast<float>(v));
      }
      continue;
    }
    Sigma target = encode_sigma(result.areas[j], boxes[i].box, result.c, gt);
    if (config.refine.clamp) target = clamp_sigma(target, *config.refine.clamp).sigma;
    for (Side s : kSides) out.push_back(static_cast<float>(target[s]));
  }
  return out;
}

template <typename T>
Tensor<T> refinement_loss(const Tensor<T>& prediction, std::span<const T> targets,
                          double eta, double beta, Index num_positives) {
  if (num_positives <= 0) throw InvalidArgument("refinement_loss: num_positives must be > 0");
  const Index rows = prediction.shape().at(0);
  if (static_cast<Index>(targets.size()) != rows * 4) {
    throw ShapeError("refinement_loss: targets size differs from prediction");
  }
  auto diff = scale(prediction - Tensor<T>::from_data({rows, 4}, {targets.begin(), targets.end()}),
                    static_cast<T>(1.0 / eta));
  return scale(sum_all(smooth_l1(diff, static_cast<T>(beta))),
               static_cast<T>(1.0 / static_cast<double>(num_positives)));
}

template Tensor<float> refinement_loss(const Tensor<float>&, std::span<const float>, double,
                                       double, Index);
template Tensor<double> refinement_loss(const Tensor<double>&, std::span<const double>, double,
                                        double, Index);

StepLosses Detector::train_step(std::span<const Scene* const> batch, Rng& rng, double lr) {
  const Index n = static_cast<Index>(batch.size());
  const Index side = config_.image_size;
  const double img = side;
  const Index plane = side * side;

  std::vector<float> pixels(n * 3 * plane);
  std::vector<std::vector<Object>> objects(n);
  for (Index b = 0; b < n; ++b) {
    const Scene& s = *batch[b];
    if (s.image.width != side || s.image.height != side) {
      throw InvalidArgument("train_step: scene size differs from image_size");
    }
    const bool flip = config_.hflip && rng.uniform() < 0.5;
    const auto t = s.image.to_tensor();
    const auto src = t.data();
    for (Index c = 0; c < 3; ++c) {
      for (Index y = 0; y < side; ++y) {
        for (Index x = 0; x < side; ++x) {
          const Index sx = flip ? side - 1 - x : x;
          pixels[(b * 3 + c) * plane + y * side + x] = src[c * plane + y * side + sx];
        }
      }
    }
    objects[b] = s.annotation.objects;
    if (flip) {
      for (auto& o : objects[b]) o.bbox = {img - o.bbox.x2, o.bbox.y1, img - o.bbox.x1, o.bbox.y2};
    }
  }

  params_.zero_grad();
  const auto pyramid = backbone(Tensor<float>::from_data({n, 3, side, side}, std::move(pixels)));

  std::vector<Roi> rois;
  std::vector<int> levels, labels;
  std::vector<Index> pos_rows, pos_cats;
  std::vector<Box> pos_gt;
  for (Index b = 0; b < n; ++b) {
    if (objects[b].empty()) continue;
    const auto props =
        generate_proposals(objects[b], config_.jitter, config_.levels, img, img, rng);
    for (const auto& p : props) {
      if (p.positive) {
        const Object& gt = objects[b][p.gt_index];
        pos_rows.push_back(static_cast<Index>(rois.size()));
        pos_cats.push_back(gt.category_id);
        pos_gt.push_back(gt.bbox);
        labels.push_back(gt.category_id + 1);
      } else {
        labels.push_back(0);
      }
      rois.push_back({b, p.box});
      levels.push_back(p.level);
    }
  }

  StepLosses losses;
  losses.refine.assign(config_.refine.num_stages - 1, 0.0);
  if (rois.empty()) return losses;

  const auto s1 = stage1(pyramid, rois, levels);
  auto loss_cls = cross_entropy(s1.cls_logits, labels);
  auto total = scale(loss_cls, float(config_.loss.cls));
  losses.cls = loss_cls.item();

  const Index p = static_cast<Index>(pos_rows.size());
  losses.positives = static_cast<int>(p);
  if (p > 0) {
    const float inv_p = 1.0f / static_cast<float>(p);
    const float beta = static_cast<float>(config_.loss.beta);
    auto pred = gather_groups(s1.deltas, pos_rows, pos_cats, 4);
    std::vector<float> targets;
    for (Index j = 0; j < p; ++j) {
      for (double v : encode_delta(rois[pos_rows[j]].box, pos_gt[j], config_.delta_norm)) {
        targets.push_back(static_cast<float>(v));
      }
    }
    auto loss_box =
        scale(sum_all(smooth_l1(pred - Tensor<float>::from_data({p, 4}, targets), beta)), inv_p);
    total = total + scale(loss_box, float(config_.loss.box));
    losses.box = loss_box.item();

    // B_1 with coordinate gradients detached.
    std::vector<RefineBox> current;
    const auto pd = pred.data();
    for (Index j = 0; j < p; ++j) {
      const Roi& r = rois[pos_rows[j]];
      const ClippedBox b1 = clip_to_image(
          decode_delta(r.box, {pd[j * 4], pd[j * 4 + 1], pd[j * 4 + 2], pd[j * 4 + 3]},
                       config_.delta_norm),
          img, img);
      current.push_back({r.batch, b1.degenerate ? r.box : b1.box, levels[pos_rows[j]],
                         static_cast<int>(pos_cats[j])});
    }

    const double eta = config_.mode == RefinementMode::kWholeProposalFc
                           ? 1.0
                           : config_.refine.side_norm;
    for (int t = 1; t < config_.refine.num_stages; ++t) {
      const RefineResult res = refine_stage(pyramid, current, t);
      const Index rows = static_cast<Index>(res.rows.size());
      if (rows > 0) {
        const auto targets_t = refinement_targets(res, current, pos_gt, config_);
        auto loss_ref = refinement_loss<float>(res.prediction, targets_t, eta, beta, p);
        total = total + scale(loss_ref, float(config_.loss.refine));
        losses.refine[t - 1] = loss_ref.item();
      }
      current = res.next;
    }
  }

  losses.total = total.item();
  if (!std::isfinite(losses.total)) {
    std::ostringstream msg;
    msg << "non-finite loss: cls=" << losses.cls << " box=" << losses.box;
    for (std::size_t i = 0; i < losses.refine.size(); ++i) {
      msg << " ref" << i + 2 << "=" << losses.refine[i];
    }
    msg << " positives=" << p << " lr=" << lr;
    throw Error(msg.str());
  }
  total.backward();
  sgd_step(params_.items(), {lr, config_.optim.momentum, config_.optim.weight_decay});
  return losses;
}

StageIou validation_stage_iou(const Detector& detector, const std::vector<Scene>& scenes,
                              std::uint64_t seed) {
  const auto& cfg = detector.config();
  const int stages = cfg.refine.num_stages;
  JitterConfig jitter = cfg.jitter;
  jitter.positives_per_gt = 1;
  jitter.negatives = 0;
  std::vector<std::vector<double>> per_scene(scenes.size(), std::vector<double>(stages, 0.0));
  std::vector<int> counts(scenes.size(), 0);
  parallel_for(scenes.size(), [&](std::size_t i) {
    const Scene& s = scenes[i];
    if (s.annotation.objects.empty()) return;
    Rng rng(derive_seed(seed, i));
    const auto props = generate_proposals(s.annotation.objects, jitter, cfg.levels,
                                          s.image.width, s.image.height, rng);
    std::vector<int> cats;
    for (const auto& p : props) cats.push_back(s.annotation.objects[p.gt_index].category_id);
    const auto boxes = detector.run_stages(s.image, props, cats);
    for (std::size_t j = 0; j < props.size(); ++j) {
      const Box& gt = s.annotation.objects[props[j].gt_index].bbox;
      for (int t = 0; t < stages; ++t) per_scene[i][t] += iou(boxes[j][t], gt);
    }
    counts[i] = static_cast<int>(props.size());
  });
  StageIou out;
  out.mean_iou.assign(stages, 0.0);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    for (int t = 0; t < stages; ++t) out.mean_iou[t] += per_scene[i][t];
    out.count += counts[i];
  }
  if (out.count > 0) {
    for (double& v : out.mean_iou) v /= out.count;
  }
  return out;
}

double learning_rate(const OptimConfig& optim, int epoch, long iteration) {
  double lr = optim.lr;
  for (int step : optim.lr_steps) {
    if (epoch + 1 >= step) lr *= optim.gamma;
  }
  if (iteration < optim.warmup_iters) {
    const double progress = static_cast<double>(iteration) / optim.warmup_iters;
    lr *= optim.warmup_ratio + (1.0 - optim.warmup_ratio) * progress;
  }
  return lr;
}

void write_train_log(const fs::path& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream f(path);
  f << "epoch,step,loss_total,loss_cls,loss_box,loss_ref2,loss_ref3,miou_s1,miou_s2,miou_s3\n";
  auto opt = [](const std::vector<double>& v, std::size_t i) {
    return i < v.size() ? fmt(v[i]) : std::string();
  };
  for (const auto& r : rows) {
    f << r.epoch << "," << r.step << "," << fmt(r.loss_total) << "," << fmt(r.loss_cls) << ","
      << fmt(r.loss_box) << "," << opt(r.loss_refine, 0) << "," << opt(r.loss_refine, 1) << ","
      << opt(r.miou, 0) << "," << opt(r.miou, 1) << "," << opt(r.miou, 2) << "\n";
  }
  if (!f) throw IoError("failed to write " + path.string());
}

std::vector<TrainLogRow> train(Detector& detector, const std::vector<Scene>& train_set,
                               const std::vector<Scene>& val_set, const fs::path& out,
                               const TrainCallbacks& callbacks) {
  const auto& cfg = detector.config();
  fs::create_directories(out);
  const std::size_t n = train_set.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.optim.batch_size);
  std::vector<Scene> val_subset(
      val_set.begin(),
      val_set.begin() + std::min<std::size_t>(val_set.size(), std::max(cfg.val_images, 0)));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  Rng step_rng(derive_seed(cfg.seed, 2));
  std::vector<TrainLogRow> rows;
  long iteration = 0;
  for (int epoch = 0; epoch < cfg.optim.epochs && n > 0; ++epoch) {
    for (std::size_t i = n - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, int(i)))]);
    }
    TrainLogRow row;
    row.epoch = epoch + 1;
    row.loss_refine.assign(cfg.refine.num_stages - 1, 0.0);
    int steps = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      std::vector<const Scene*> scenes;
      for (std::size_t i = start; i < std::min(n, start + batch); ++i) {
        scenes.push_back(&train_set[order[i]]);
      }
      const StepLosses l =
          detector.train_step(scenes, step_rng, learning_rate(cfg.optim, epoch, iteration));
      row.loss_total += l.total;
      row.loss_cls += l.cls;
      row.loss_box += l.box;
      for (std::size_t t = 0; t < l.refine.size(); ++t) row.loss_refine[t] += l.refine[t];
      ++steps;
      ++iteration;
    }
    row.step = iteration;
    row.loss_total /= steps;
    row.loss_cls /= steps;
    row.loss_box /= steps;
    for (double& v : row.loss_refine) v /= steps;
    if (!val_subset.empty()) {
      row.miou = validation_stage_iou(detector, val_subset, derive_seed(cfg.seed, 3)).mean_iou;
    }
    rows.push_back(row);
    if (callbacks.on_epoch) callbacks.on_epoch(row);
  }
  save_checkpoint(out / "checkpoint", detector.params());
  write_train_log(out / "train_log.csv", rows);
  return rows;
}

std::vector<Scene> load_scenes(const Dataset& dataset) {
  std::vector<Scene> scenes(dataset.annotations.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    scenes[i].image = dataset.load_image(i);
    scenes[i].annotation = dataset.annotations[i];
  });
  return scenes;
}

#define PBR_INSTANTIATE_DETECTOR(T)                                                      \
  template BackboneParams<T> register_backbone(ParameterSet<T>&, int, Rng&);             \
  template BackboneParams<T> bind_backbone(ParameterSet<T>&);                            \
  template FeaturePyramid<T> backbone_forward(const BackboneParams<T>&, const Tensor<T>&); \
  template FcHeadParams<T> register_fc_head(ParameterSet<T>&, const std::string&, Index,  \
                                            Index, Index, Index, Rng&);                  \
  template FcHeadParams<T> bind_fc_head(ParameterSet<T>&, const std::string&);           \
  template Stage1Output<T> stage1_forward(const FcHeadParams<T>&, const FeaturePyramid<T>&, \
                                          std::span<const Roi>, std::span<const int>,    \
                                          const RoiAlignOptions&);

PBR_INSTANTIATE_DETECTOR(float)
PBR_INSTANTIATE_DETECTOR(double)

}  // namespace pbr
