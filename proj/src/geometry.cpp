#include "uniworld/geometry.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "uniworld/errors.hpp"

namespace uniworld {

Box clip_box(const Box & box, double image_size)
{
  auto clamp = [image_size](double v) { return std::clamp(v, 0.0, image_size); };
  return Box{clamp(box.x1), clamp(box.y1), clamp(box.x2), clamp(box.y2)};
}

double iou(const Box & a, const Box & b)
{
  if (!a.valid() || !b.valid()) {
    return 0.0;
  }
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) {
    return 0.0;
  }
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

namespace {

std::vector<std::size_t> detection_order(const std::vector<ScoredDetection> & dets)
{
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&dets](std::size_t l, std::size_t r) {
    if (dets[l].score != dets[r].score) {
      return dets[l].score > dets[r].score;
    }
    return dets[l].category < dets[r].category;
  });
  return order;
}

std::vector<ScoredDetection> drop_degenerate(std::vector<ScoredDetection> dets)
{
  std::erase_if(dets, [](const ScoredDetection & d) { return !d.box.valid(); });
  return dets;
}

std::vector<ScoredDetection> greedy_nms(std::vector<ScoredDetection> dets, double iou_thresh,
                                        bool per_category)
{
  if (!(iou_thresh > 0.0 && iou_thresh <= 1.0)) {
    throw std::invalid_argument("nms: iou_thresh must lie in (0, 1]");
  }
  dets = drop_degenerate(std::move(dets));
  sort_detections(dets);

  std::vector<ScoredDetection> kept;
  kept.reserve(dets.size());
  for (auto & cand : dets) {
    bool suppressed = false;
    for (const auto & k : kept) {
      if (per_category && k.category != cand.category) {
        continue;
      }
      if (iou(k.box, cand.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(std::move(cand));
    }
  }
  return kept;
}

}  // namespace

void sort_detections(std::vector<ScoredDetection> & dets)
{
  const auto order = detection_order(dets);
  std::vector<ScoredDetection> sorted;
  sorted.reserve(dets.size());
  for (auto idx : order) {
    sorted.push_back(std::move(dets[idx]));
  }
  dets = std::move(sorted);
}

std::vector<ScoredDetection> nms(std::vector<ScoredDetection> dets, double iou_thresh)
{
  return greedy_nms(std::move(dets), iou_thresh, true);
}

std::vector<ScoredDetection> nms_class_agnostic(std::vector<ScoredDetection> dets, double iou_thresh)
{
  return greedy_nms(std::move(dets), iou_thresh, false);
}

std::vector<ScoredDetection> wbf(const std::vector<std::vector<ScoredDetection>> & det_lists,
                                 double iou_thresh)
{
  if (det_lists.empty()) {
    throw std::invalid_argument("wbf: at least one detection list is required");
  }
  if (!(iou_thresh > 0.0 && iou_thresh <= 1.0)) {
    throw std::invalid_argument("wbf: iou_thresh must lie in (0, 1]");
  }
  const double n_models = static_cast<double>(det_lists.size());

  std::vector<ScoredDetection> all;
  for (const auto & list : det_lists) {
    for (const auto & d : list) {
      if (d.box.valid()) {
        all.push_back(d);
      }
    }
  }
  sort_detections(all);

  struct Cluster
  {
    std::string category;
    ScoredDetection fused;
    double weight_sum = 0.0;
    double wx1 = 0.0, wy1 = 0.0, wx2 = 0.0, wy2 = 0.0;
    std::size_t members = 0;
  };
  std::vector<Cluster> clusters;

  for (const auto & d : all) {
    std::size_t best = clusters.size();
    double best_iou = -1.0;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
      if (clusters[c].category != d.category) {
        continue;
      }
      const double v = iou(clusters[c].fused.box, d.box);
      if (v >= iou_thresh && v > best_iou) {
        best_iou = v;
        best = c;
      }
    }
    if (best == clusters.size()) {
      clusters.push_back(Cluster{d.category, d});
    }
    auto & cl = clusters[best];
    cl.members += 1;
    cl.weight_sum += d.score;
    cl.wx1 += d.score * d.box.x1;
    cl.wy1 += d.score * d.box.y1;
    cl.wx2 += d.score * d.box.x2;
    cl.wy2 += d.score * d.box.y2;
    if (cl.weight_sum > 0.0) {
      cl.fused.box = Box{cl.wx1 / cl.weight_sum, cl.wy1 / cl.weight_sum, cl.wx2 / cl.weight_sum,
                         cl.wy2 / cl.weight_sum};
    }
    cl.fused.score = cl.weight_sum / static_cast<double>(cl.members);
  }

  std::vector<ScoredDetection> out;
  out.reserve(clusters.size());
  for (auto & cl : clusters) {
    const double scale = std::min(1.0, static_cast<double>(cl.members) / n_models);
    cl.fused.score *= scale;
    cl.fused.source = "wbf";
    out.push_back(std::move(cl.fused));
  }
  sort_detections(out);
  return out;
}

nlohmann::json to_json(const Box & box)
{
  return nlohmann::json::array({box.x1, box.y1, box.x2, box.y2});
}

Box box_from_json(const nlohmann::json & j)
{
  if (!j.is_array() || j.size() != 4) {
    throw FormatError("box must be an array [x1,y1,x2,y2]");
  }
  return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

nlohmann::json to_json(const ScoredDetection & det)
{
  nlohmann::json j;
  j["box"] = to_json(det.box);
  j["score"] = det.score;
  j["category"] = det.category;
  if (det.source) {
    j["source"] = *det.source;
  }
  return j;
}

ScoredDetection detection_from_json(const nlohmann::json & j)
{
  ScoredDetection d;
  d.box = box_from_json(j.at("box"));
  d.score = j.at("score").get<double>();
  d.category = j.at("category").get<std::string>();
  if (j.contains("source") && !j["source"].is_null()) {
    d.source = j["source"].get<std::string>();
  }
  if (d.category.empty() || d.score < 0.0) {
    throw FormatError("detection needs a non-empty category and a non-negative score");
  }
  return d;
}

nlohmann::json to_json(const std::vector<ScoredDetection> & dets)
{
  auto arr = nlohmann::json::array();
  for (const auto & d : dets) {
    arr.push_back(to_json(d));
  }
  return arr;
}

std::vector<ScoredDetection> detections_from_json(const nlohmann::json & j)
{
  std::vector<ScoredDetection> out;
  for (const auto & item : j) {
    out.push_back(detection_from_json(item));
  }
  return out;
}

}  // namespace uniworld
