#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace uniworld {

/// Axis-aligned box in image units, corners (x1, y1) and (x2, y2).
struct Box
{
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return valid() ? width() * height() : 0.0; }
  double center_x() const noexcept { return 0.5 * (x1 + x2); }
  double center_y() const noexcept { return 0.5 * (y1 + y2); }

  /// Positive extent on both axes.
  bool valid() const noexcept { return x1 < x2 && y1 < y2; }

  bool operator==(const Box &) const = default;
};

/// Clamps every coordinate into [0, image_size].
Box clip_box(const Box & box, double image_size);

/// Intersection over union. Degenerate boxes have IoU 0 with anything, themselves included.
double iou(const Box & a, const Box & b);

struct ScoredDetection
{
  Box box;
  double score = 0.0;  ///< >= 0; calibrated scores may exceed 1
  std::string category;
  std::optional<std::string> source;

  bool operator==(const ScoredDetection &) const = default;
};

/// Stable detection order used by NMS and WBF: score descending, then category key,
/// then original position.
void sort_detections(std::vector<ScoredDetection> & dets);

/// Greedy per-category NMS. A box is suppressed when its IoU with an already kept box
/// of the same category is strictly greater than `iou_thresh`. Degenerate boxes are dropped.
std::vector<ScoredDetection> nms(std::vector<ScoredDetection> dets, double iou_thresh);

/// Same as nms() but ignores categories, every box competes with every other.
std::vector<ScoredDetection> nms_class_agnostic(std::vector<ScoredDetection> dets, double iou_thresh);

/// Weighted boxes fusion across the outputs of several models.
///
/// Boxes of one category are clustered greedily in score order; a box joins the
/// cluster whose fused box overlaps it most, provided that IoU is >= `iou_thresh`.
/// Each cluster emits the score-weighted mean of its member coordinates with the mean
/// member score scaled by min(1, members / models).
std::vector<ScoredDetection> wbf(const std::vector<std::vector<ScoredDetection>> & det_lists,
                                 double iou_thresh);

nlohmann::json to_json(const Box & box);
Box box_from_json(const nlohmann::json & j);

nlohmann::json to_json(const ScoredDetection & det);
ScoredDetection detection_from_json(const nlohmann::json & j);

nlohmann::json to_json(const std::vector<ScoredDetection> & dets);
std::vector<ScoredDetection> detections_from_json(const nlohmann::json & j);

}  // namespace uniworld
