#pragma once

// Single-frame set-prediction instrument detector: a strided patch backbone
// feeding a multi-scale deformable-attention encoder-decoder with learned
// queries, per-layer box refinement and Hungarian-matched training.

#include <array>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tapir/annotation.hpp"
#include "tapir/nn/ops.hpp"
#include "tapir/nn/params.hpp"

namespace tapir {

using nn::LevelShape;
using nn::Tensor;

struct MatchCost {
  double w_class = 2.0, w_l1 = 5.0, w_giou = 2.0;
};

struct DetectorConfig {
  int image_height = 64;
  int image_width = 64;
  std::vector<int> backbone_factors{4, 2};   // per-level downsampling; strides are the running products
  std::vector<int> backbone_channels{32, 64};
  int d_model = 32;
  int heads = 2;
  int enc_points = 2;
  int dec_points = 2;
  int enc_layers = 1;
  int dec_layers = 2;
  int ffn_dim = 64;
  int num_queries = 20;
  int num_classes = kNumInstruments;
  MatchCost cost;
  MatchCost loss_weights;  // same roles as the matching weights
  double eos_coef = 0.1;   // weight of the no-object class in the classification loss

  std::vector<LevelShape> level_shapes() const;
  void validate() const;  // throws std::invalid_argument
};

nlohmann::json to_json(const DetectorConfig& c);
DetectorConfig detector_config_from_json(const nlohmann::json& j);

// Flattened multi-level feature maps: value [B, S, d] with S = sum of h*w,
// level-major raster order; pos [S, d] holds positional + level embeddings.
struct FeaturePyramid {
  Tensor value;
  Tensor pos;
  std::vector<LevelShape> levels;
};

struct DeformAttnParams {
  int heads = 1, levels = 1, points = 1;
  nn::Linear sampling_offsets, attention_weights, value_proj, output_proj;
};

DeformAttnParams make_deform_attn(nn::ParamStore& ps, const std::string& name, int d_model, int heads, int levels,
                                  int points, std::mt19937_64& rng);

// Multi-scale deformable attention. query [B, Nq, d]; reference [B, Nq, 2]
// points or [B, Nq, 4] boxes in normalised centre form; input [B, S, d].
// weights_out, if given, receives the normalised sampling weights
// [B, Nq, heads, levels, points].
Tensor deformable_attention(const Tensor& query, const Tensor& reference, const Tensor& input,
                            const std::vector<LevelShape>& levels, const DeformAttnParams& p,
                            std::vector<double>* weights_out = nullptr);

// next = sigmoid(inverse_sigmoid(prev) + delta), componentwise.
Tensor refine_boxes(const Tensor& prev_boxes, const Tensor& delta);

struct GroundTruth {
  std::vector<int> classes;
  std::vector<CenterBox> boxes;  // normalised centre form
};

GroundTruth ground_truth_of(const KeyframeAnnotation& kf);

struct DetectorOutput {
  std::vector<Tensor> logits;  // per decoder layer [B, N, classes + 1]; last column is no-object
  std::vector<Tensor> boxes;   // per decoder layer [B, N, 4] centre form
  Tensor features;             // final decoder output [B, N, d]
};

class Detector {
 public:
  Detector(const DetectorConfig& config, nn::ParamStore& params, const std::string& prefix, std::mt19937_64& rng);

  // images [B, H, W, 3]
  FeaturePyramid pyramid(const Tensor& images) const;
  DetectorOutput forward(const Tensor& images) const;

  const DetectorConfig& config() const { return config_; }

 private:
  struct EncoderLayer {
    DeformAttnParams attn;
    nn::LayerNorm norm1, norm2;
    nn::Linear ffn1, ffn2;
  };
  struct DecoderLayer {
    nn::Linear self_q, self_k, self_v, self_out;
    DeformAttnParams cross;
    nn::LayerNorm norm1, norm2, norm3;
    nn::Linear ffn1, ffn2;
    nn::Linear class_head;
    std::array<nn::Linear, 3> box_head;
  };

  DetectorConfig config_;
  std::vector<nn::Linear> backbone_;
  std::vector<nn::Linear> input_proj_;
  std::vector<nn::LayerNorm> input_norm_;
  Tensor level_embed_;
  Tensor pos_sine_;     // fixed, [S, d]
  Tensor enc_ref_;      // fixed token centres, [1, S, 2]
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
  Tensor query_content_, query_pos_, query_ref_;  // [N, d], [N, d], [N, 4] (pre-sigmoid)
};

// Solves the rectangular assignment problem (rows <= cols) exactly; returns
// the column of every row. Among optimal assignments the lexicographically
// smallest (row, column) sequence is returned.
std::vector<int> linear_assignment(const std::vector<std::vector<double>>& cost, double* total = nullptr);

// Matching cost matrix [M gt][N pred] for one image.
std::vector<std::vector<double>> matching_cost(const std::vector<double>& logits, const std::vector<double>& boxes,
                                               int num_queries, int num_classes, const GroundTruth& gt,
                                               const MatchCost& cost);

// (gt index, pred index) pairs, one per ground-truth instance. Throws
// std::invalid_argument when there are more instances than queries.
std::vector<std::pair<int, int>> hungarian_match(const std::vector<double>& logits, const std::vector<double>& boxes,
                                                 int num_queries, int num_classes, const GroundTruth& gt,
                                                 const MatchCost& cost);

double generalized_iou(const CenterBox& a, const CenterBox& b);

struct DetectionLoss {
  Tensor total;
  double classification = 0, l1 = 0, giou = 0;  // weighted, summed over layers
  // assignments[layer][image] -> (gt, pred) pairs
  std::vector<std::vector<std::vector<std::pair<int, int>>>> assignments;
};

// Assignments are computed per decoder layer when `assignments` is empty.
DetectionLoss detection_loss(const DetectorOutput& out, const std::vector<GroundTruth>& gts, const DetectorConfig& cfg,
                             std::vector<std::vector<std::vector<std::pair<int, int>>>> assignments = {});

struct Detection {
  BoundingBox box;
  std::array<double, kNumInstruments> class_scores{};
  double confidence = 0;  // max class probability, no-object excluded
  std::vector<double> box_feature;
  int query = -1;
};

// Final-layer detections of image `b` with confidence >= threshold.
std::vector<Detection> select_detections(const DetectorOutput& out, int b, double threshold);
std::vector<Detection> infer(const Detector& detector, const Tensor& image, double threshold);

}  // namespace tapir
