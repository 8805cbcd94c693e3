#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "uniworld/geometry.hpp"
#include "uniworld/labelspace.hpp"
#include "uniworld/synthworld.hpp"

namespace uniworld {

/// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

/// Greedy matching for one image and one category. `dets` must already be in ranking order;
/// each detection takes the highest-IoU truth box that is still unmatched, if that IoU reaches
/// `iou_thresh`. Returns one true-positive flag per detection.
std::vector<bool> match_for_eval(const std::vector<ScoredDetection> & dets,
                                 const std::vector<Box> & truth, double iou_thresh);

/// 101-point interpolated AP of a ranked list of TP/FP flags. n_truth must be positive.
double average_precision(const std::vector<bool> & flags, std::size_t n_truth);

/// Training-instance frequency groups.
struct FrequencyThresholds
{
  int rare_max = 5;     ///< <= rare_max instances: rare
  int common_max = 30;  ///< <= common_max: common, above: frequent
};

enum class FrequencyGroup
{
  rare,
  common,
  frequent,
};

FrequencyGroup frequency_group(int train_instances, const FrequencyThresholds & t);

struct EvalGroups
{
  std::map<std::string, FrequencyGroup> frequency;
  LabelSpace base;
  LabelSpace novel;
  FrequencyThresholds thresholds;
};

/// Groups from training annotation counts; categories with no training instance are rare.
EvalGroups make_groups(const LabelSpace & test_space, const std::vector<DetDataset> & train,
                       const LabelSpace & base, const LabelSpace & novel,
                       const FrequencyThresholds & t = {});

struct EvalResult
{
  double ap = 0.0;
  double ap50 = 0.0;
  std::map<std::string, double> ap_per_category;  ///< categories with test truth only
  double ap_rare = 0.0, ap_common = 0.0, ap_frequent = 0.0;
  double ap_base = 0.0, ap_novel = 0.0;
  std::map<int, double> ar;  ///< keyed by k in {1, 10, 100}
  std::map<std::string, int> counts;  ///< categories per group, truth instances, images
  FrequencyThresholds thresholds;
};

/// `detections` is parallel to test.images and scored against full_truth.
EvalResult evaluate(const std::vector<std::vector<ScoredDetection>> & detections,
                    const DetDataset & test, const LabelSpace & test_space,
                    const EvalGroups & groups);

nlohmann::json to_json(const EvalResult & r);

/// Column names and values of the flat metrics row.
std::vector<std::string> eval_csv_header();
std::vector<double> eval_csv_values(const EvalResult & r);

}  // namespace uniworld
