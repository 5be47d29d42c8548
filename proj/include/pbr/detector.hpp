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

#pragma once

// Desk-scale two-stage detector with pyramidal boundary refinement:
// toy conv backbone + FPN, jittered training proposals, a two-fc stage-1
// head, and T-1 refinement stages that pool boundary areas one pyramid
// level finer at every stage.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pbr/boxgeom.hpp"
#include "pbr/bpn.hpp"
#include "pbr/evalkit.hpp"
#include "pbr/optim.hpp"
#include "pbr/pyramid.hpp"
#include "pbr/rng.hpp"
#include "pbr/synthdata.hpp"

namespace pbr {

enum class RefinementMode { kBoundaryAreasBpn, kBoundaryAreasFc, kWholeProposalFc };
std::string to_string(RefinementMode mode);
RefinementMode parse_refinement_mode(const std::string& name);

struct JitterConfig {
  int positives_per_gt = 4;
  int negatives = 16;
  double center = 0.2;     // uniform +- fraction of the side
  double log_scale = 0.25; // uniform +- in log space
  double positive_iou = 0.5;
  double negative_iou = 0.3;
  int max_tries = 100;
};

struct GridConfig {
  double stride = 8.0;
  std::vector<double> scales = {20.0, 32.0, 52.0};
  std::vector<double> ratios = {0.5, 1.0, 2.0};  // h / w
};

struct LossWeights {
  double cls = 1.0;
  double box = 1.0;
  double refine = 0.67;
  double beta = 1.0;  // smooth-L1 transition point
};

struct OptimConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 4;
  int epochs = 12;
  int warmup_iters = 50;
  double warmup_ratio = 1.0 / 3.0;
  std::vector<int> lr_steps = {9, 12};  // 1-based epochs that start with lr *= gamma
  double gamma = 0.1;
};

struct InferConfig {
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  int max_detections = 100;
  GridConfig grid;
};

struct DetectorConfig {
  int image_size = 128;
  int channels = 32;
  int num_categories = 5;
  int head_hidden = 128;
  int attention_groups = 4;
  RoiAlignOptions roi;
  RefineConfig refine;
  LevelAssignment levels;
  DeltaNorm delta_norm;
  JitterConfig jitter;
  LossWeights loss;
  OptimConfig optim;
  InferConfig infer;
  RefinementMode mode = RefinementMode::kBoundaryAreasBpn;
  bool hflip = false;
  int val_images = 50;  // validation scenes used for the per-epoch IoU log
  std::uint64_t seed = 1;

  BpnConfig bpn() const { return {channels, roi.out, num_categories, attention_groups}; }
  void validate() const;
};

struct Proposal {
  Box box;
  int gt_index = -1;  // -1 for background
  bool positive = false;
  int level = kMinLevel;
};

struct ProposalStats {
  int relaxed_positives = 0;  // gts where no jitter reached positive_iou
  int missing_negatives = 0;
};

std::vector<Proposal> generate_proposals(const std::vector<Object>& gts,
                                         const JitterConfig& jitter,
                                         const LevelAssignment& levels, double img_w,
                                         double img_h, Rng& rng,
                                         ProposalStats* stats = nullptr);

/// Sliding-window boxes (scales x ratios at every grid cell), clipped.
std::vector<Box> grid_proposals(const GridConfig& grid, double img_w, double img_h);

template <typename T>
struct BackboneParams {
  Tensor<T> stem_w, stem_b;
  Tensor<T> c2a_w, c2a_b, c2b_w, c2b_b;
  std::array<Tensor<T>, 3> down_w, down_b;  // C3, C4, C5
  std::array<Tensor<T>, kNumLevels> lateral_w, lateral_b;
  std::array<Tensor<T>, kNumLevels> smooth_w, smooth_b;
};

template <typename T>
BackboneParams<T> register_backbone(ParameterSet<T>& params, int channels, Rng& rng);
template <typename T>
BackboneParams<T> bind_backbone(ParameterSet<T>& params);

/// images: [N,3,H,W] with H, W divisible by 32.
template <typename T>
FeaturePyramid<T> backbone_forward(const BackboneParams<T>& params, const Tensor<T>& images);

/// Two shared fc layers followed by one or two output layers.
template <typename T>
struct FcHeadParams {
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
  Tensor<T> out_w, out_b;
  Tensor<T> out2_w, out2_b;  // stage-1 box branch only
};

template <typename T>
FcHeadParams<T> register_fc_head(ParameterSet<T>& params, const std::string& prefix,
                                 Index in_features, Index hidden, Index outputs,
                                 Index outputs2, Rng& rng);
template <typename T>
FcHeadParams<T> bind_fc_head(ParameterSet<T>& params, const std::string& prefix);

template <typename T>
struct Stage1Output {
  Tensor<T> cls_logits;  // [R, K+1], column 0 = background
  Tensor<T> deltas;      // [R, 4K]
};

template <typename T>
Stage1Output<T> stage1_forward(const FcHeadParams<T>& head, const FeaturePyramid<T>& pyramid,
                               std::span<const Roi> rois, std::span<const int> levels,
                               const RoiAlignOptions& roi);

/// Input to a refinement stage: a box B_t with its image, level and category.
struct RefineBox {
  Index batch = 0;
  Box box;
  int level = kMinLevel;
  int category = 0;
};

struct RefineResult {
  double c = 0;                 // shrink factor (boundary-area modes)
  std::vector<Index> rows;      // inputs that were refined, in prediction order
  std::vector<BoundaryAreas> areas;  // per refined row (boundary-area modes)
  Tensor<float> prediction;     // [rows, 4]: sigma (l,r,u,b) or deltas
  std::vector<RefineBox> next;  // B_{t+1}, one per input
  int degenerate = 0;           // inputs passed through unrefined
};

/// Per refined row, targets against that row's assigned ground truth:
/// sigma (clamped when configured) or whole-box deltas. Row-major [rows, 4].
std::vector<float> refinement_targets(const RefineResult& result,
                                      std::span<const RefineBox> boxes,
                                      std::span<const Box> assigned_gt,
                                      const DetectorConfig& config);

/// sum SL1((prediction - targets) / eta) / num_positives, unweighted.
template <typename T>
Tensor<T> refinement_loss(const Tensor<T>& prediction, std::span<const T> targets,
                          double eta, double beta, Index num_positives);

struct StepLosses {
  double total = 0, cls = 0, box = 0;
  std::vector<double> refine;  // one per refinement stage
  int positives = 0;
};

struct StageIou {
  std::vector<double> mean_iou;  // per stage
  int count = 0;
};

class Detector {
 public:
  explicit Detector(DetectorConfig config);

  const DetectorConfig& config() const { return config_; }
  ParameterSet<float>& params() { return params_; }
  const ParameterSet<float>& params() const { return params_; }

  FeaturePyramid<float> backbone(const Tensor<float>& images) const;
  Stage1Output<float> stage1(const FeaturePyramid<float>& pyramid, std::span<const Roi> rois,
                             std::span<const int> levels) const;

  /// Refinement stage t (1-based) turning B_t into B_{t+1}.
  RefineResult refine_stage(const FeaturePyramid<float>& pyramid,
                            std::span<const RefineBox> boxes, int t) const;

  /// Boxes from decoded stage predictions; degenerate results keep B_t.
  std::vector<RefineBox> decode_refinement(std::span<const RefineBox> boxes,
                                           const RefineResult& result) const;

  /// Full inference on one image with the configured proposal grid.
  std::vector<Detection> infer(const Image& image) const;

  /// Runs all stages on given boxes with known categories; returns
  /// per-stage boxes for each input (used for validation statistics).
  std::vector<std::vector<Box>> run_stages(const Image& image,
                                           std::span<const Proposal> proposals,
                                           std::span<const int> categories) const;

  /// One SGD step over a batch of scenes.
  StepLosses train_step(std::span<const Scene* const> batch, Rng& rng, double lr);

 private:
  DetectorConfig config_;
  ParameterSet<float> params_;
  BackboneParams<float> backbone_;
  FcHeadParams<float> head_;
  std::vector<BpnParams<float>> bpn_heads_;   // boundary_areas_bpn
  std::vector<std::array<FcHeadParams<float>, 4>> side_fc_heads_;  // boundary_areas_fc
  std::vector<FcHeadParams<float>> box_fc_heads_;  // whole_proposal_fc
};

/// Mean IoU of B_1..B_T against gt for one positive jitter per gt.
StageIou validation_stage_iou(const Detector& detector, const std::vector<Scene>& scenes,
                              std::uint64_t seed);

struct TrainLogRow {
  int epoch = 0;
  long step = 0;
  double loss_total = 0, loss_cls = 0, loss_box = 0;
  std::vector<double> loss_refine;
  std::vector<double> miou;
};

struct TrainCallbacks {
  std::function<void(const TrainLogRow&)> on_epoch;
};

/// Trains in place and writes <out>/checkpoint/{manifest.json,weights.bin}
/// plus <out>/train_log.csv. Deterministic for a given config.
std::vector<TrainLogRow> train(Detector& detector, const std::vector<Scene>& train_set,
                               const std::vector<Scene>& val_set,
                               const std::filesystem::path& out,
                               const TrainCallbacks& callbacks = {});

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows);

/// Learning rate at (0-based) epoch and global iteration.
double learning_rate(const OptimConfig& optim, int epoch, long iteration);

/// Loads a dataset fully into memory.
std::vector<Scene> load_scenes(const Dataset& dataset);

}  // namespace pbr
