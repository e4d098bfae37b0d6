#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "haec/cloud.hpp"
#include "haec/embed.hpp"
#include "haec/pseudolabel.hpp"
#include "haec/superpoint.hpp"

namespace haec {

// Union of thing-thing edges with affinity > threshold; components numbered by
// lowest superpoint index, stuff superpoints get -1.
std::vector<int> cluster_instances(std::size_t n_superpoints, std::span<const Edge> edges,
                                   std::span<const double> affinity, double threshold,
                                   std::span<const std::uint8_t> thing_mask);

struct QueryResult {
  std::vector<double> similarity;  // 0 for undefined points
  std::vector<std::uint8_t> mask;
};

// Cosine against text_vec; defined[p] == 0 never enters the mask.
QueryResult query(const RowMatrix& vectors, std::span<const std::uint8_t> defined, const Eigen::VectorXd& text_vec,
                  double threshold);
QueryResult query(const RowMatrix& vectors, std::span<const std::uint8_t> defined, std::string_view text,
                  const EmbeddingProvider& provider, double threshold);

// Argmax cosine over the labels (ties to the lower index); -1 where undefined.
std::vector<int> classify_points(const RowMatrix& vectors, std::span<const std::uint8_t> defined,
                                 std::span<const Label> labels);

struct SemanticScores {
  double miou = 0.0, macc = 0.0;  // percent
  std::vector<double> iou, acc;   // per class, fraction
  std::vector<std::uint8_t> present;
};

// gt == -1 is ignored; means over classes present in gt. Throws ArgumentError without gt-labeled points.
SemanticScores eval_semantic(std::span<const int> pred, std::span<const int> gt, int n_classes);

struct ClassPanoptic {
  bool present = false;
  bool stuff = false;
  int tp = 0, fp = 0, fn = 0;
  double iou_sum = 0.0;
  double pq = 0.0, sq = 0.0, rq = 0.0;  // fractions
};

struct PanopticScores {
  double pq = 0.0, rq = 0.0, sq = 0.0, miou = 0.0, macc = 0.0;  // percent
  std::vector<ClassPanoptic> per_class;
  SemanticScores semantic;
};

// Classes without any gt instance id are stuff and scored as one segment each.
// Segments match within a class at IoU > 0.5. PQ, RQ and SQ are each averaged
// over classes with a gt or predicted segment.
PanopticScores eval_panoptic(std::span<const int> pred_sem, std::span<const int> pred_inst,
                             std::span<const int> gt_sem, std::span<const int> gt_inst, int n_classes);

// Labels each pseudo-labeled point by the label nearest to class_repr[z_pc] and
// scores it against gt; points the pipeline left unlabeled are not scored.
SemanticScores eval_oracle(const PseudoLabelSet& labels, std::span<const int> gt_sem, std::span<const Label> label_set);

}  // namespace haec
