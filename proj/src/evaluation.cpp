#include "uniworld/evaluation.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace uniworld {

std::vector<double> coco_iou_thresholds()
{
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) {
    t.push_back(0.5 + 0.05 * i);
  }
  return t;
}

std::vector<bool> match_for_eval(const std::vector<ScoredDetection> & dets,
                                 const std::vector<Box> & truth, double iou_thresh)
{
  std::vector<bool> used(truth.size(), false);
  std::vector<bool> flags(dets.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = -1.0;
    std::size_t arg = truth.size();
    for (std::size_t t = 0; t < truth.size(); ++t) {
      if (used[t]) {
        continue;
      }
      const double v = iou(dets[d].box, truth[t]);
      if (v >= iou_thresh && v > best) {
        best = v;
        arg = t;
      }
    }
    if (arg < truth.size()) {
      used[arg] = true;
      flags[d] = true;
    }
  }
  return flags;
}

double average_precision(const std::vector<bool> & flags, std::size_t n_truth)
{
  if (n_truth == 0) {
    throw std::invalid_argument("average_precision needs at least one truth instance");
  }
  const std::size_t n = flags.size();
  std::vector<double> recall(n), precision(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += flags[i] ? 1 : 0;
    recall[i] = static_cast<double>(tp) / static_cast<double>(n_truth);
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), level);
    if (it != recall.end()) {
      sum += precision[static_cast<std::size_t>(it - recall.begin())];
    }
  }
  return sum / 101.0;
}

FrequencyGroup frequency_group(int train_instances, const FrequencyThresholds & t)
{
  if (train_instances <= t.rare_max) {
    return FrequencyGroup::rare;
  }
  return train_instances <= t.common_max ? FrequencyGroup::common : FrequencyGroup::frequent;
}

EvalGroups make_groups(const LabelSpace & test_space, const std::vector<DetDataset> & train,
                       const LabelSpace & base, const LabelSpace & novel,
                       const FrequencyThresholds & t)
{
  EvalGroups g;
  g.base = base;
  g.novel = novel;
  g.thresholds = t;
  const auto counts = train_instance_counts(train);
  for (const auto & k : test_space.keys()) {
    auto it = counts.find(k);
    g.frequency[k] = frequency_group(it == counts.end() ? 0 : it->second, t);
  }
  return g;
}

namespace {

struct Ranked
{
  std::size_t image;
  ScoredDetection det;
};

double mean_of(const std::vector<double> & v)
{
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

EvalResult evaluate(const std::vector<std::vector<ScoredDetection>> & detections,
                    const DetDataset & test, const LabelSpace & test_space,
                    const EvalGroups & groups)
{
  if (detections.size() != test.images.size()) {
    throw std::invalid_argument("evaluate: one detection list per test image required");
  }
  const auto thresholds = coco_iou_thresholds();
  const std::size_t n_img = test.images.size();

  // Truth and ranked detections per category.
  std::map<std::string, std::vector<std::vector<Box>>> truth;
  std::map<std::string, std::size_t> n_truth;
  for (std::size_t i = 0; i < n_img; ++i) {
    for (const auto & o : test.images[i].full_truth) {
      auto & per_image = truth[o.category];
      per_image.resize(n_img);
      per_image[i].push_back(o.box);
      n_truth[o.category] += 1;
    }
  }
  std::map<std::string, std::vector<Ranked>> ranked;
  for (std::size_t i = 0; i < n_img; ++i) {
    for (const auto & d : detections[i]) {
      if (!test_space.contains(d.category)) {
        throw std::invalid_argument("detection category '" + d.category + "' is not in the test space");
      }
      ranked[d.category].push_back(Ranked{i, d});
    }
  }

  EvalResult r;
  r.thresholds = groups.thresholds;
  std::vector<double> all, ap50s, rare, common, frequent, base, novel;
  for (const auto & key : test_space.keys()) {
    if (n_truth[key] == 0) {
      continue;
    }
    auto & list = ranked[key];
    std::stable_sort(list.begin(), list.end(),
                     [](const Ranked & a, const Ranked & b) { return a.det.score > b.det.score; });
    // Split the global ranking per image, keeping each detection's global position.
    std::vector<std::vector<ScoredDetection>> per_image(n_img);
    std::vector<std::vector<std::size_t>> position(n_img);
    for (std::size_t k = 0; k < list.size(); ++k) {
      per_image[list[k].image].push_back(list[k].det);
      position[list[k].image].push_back(k);
    }
    double ap_sum = 0.0;
    for (double thr : thresholds) {
      std::vector<bool> flags(list.size(), false);
      for (std::size_t i = 0; i < n_img; ++i) {
        if (per_image[i].empty()) {
          continue;
        }
        const auto f = match_for_eval(per_image[i], truth[key][i], thr);
        for (std::size_t k = 0; k < f.size(); ++k) {
          flags[position[i][k]] = f[k];
        }
      }
      const double ap = average_precision(flags, n_truth[key]);
      ap_sum += ap;
      if (thr == thresholds.front()) {
        ap50s.push_back(ap);
      }
    }
    const double ap = ap_sum / static_cast<double>(thresholds.size());
    r.ap_per_category[key] = ap;
    all.push_back(ap);
    switch (groups.frequency.at(key)) {
      case FrequencyGroup::rare:
        rare.push_back(ap);
        break;
      case FrequencyGroup::common:
        common.push_back(ap);
        break;
      case FrequencyGroup::frequent:
        frequent.push_back(ap);
        break;
    }
    if (groups.novel.contains(key)) {
      novel.push_back(ap);
    } else if (groups.base.contains(key)) {
      base.push_back(ap);
    }
  }
  r.ap = mean_of(all);
  r.ap50 = mean_of(ap50s);
  r.ap_rare = mean_of(rare);
  r.ap_common = mean_of(common);
  r.ap_frequent = mean_of(frequent);
  r.ap_base = mean_of(base);
  r.ap_novel = mean_of(novel);
  r.counts = {{"categories", static_cast<int>(all.size())},
              {"rare", static_cast<int>(rare.size())},
              {"common", static_cast<int>(common.size())},
              {"frequent", static_cast<int>(frequent.size())},
              {"base", static_cast<int>(base.size())},
              {"novel", static_cast<int>(novel.size())},
              {"images", static_cast<int>(n_img)}};

  // Class-agnostic average recall.
  for (int k : {1, 10, 100}) {
    std::vector<double> recalls;
    for (std::size_t i = 0; i < n_img; ++i) {
      const auto & objs = test.images[i].full_truth;
      if (objs.empty()) {
        continue;
      }
      std::vector<ScoredDetection> top = detections[i];
      sort_detections(top);
      if (top.size() > static_cast<std::size_t>(k)) {
        top.resize(static_cast<std::size_t>(k));
      }
      std::vector<Box> boxes;
      for (const auto & o : objs) {
        boxes.push_back(o.box);
      }
      for (double thr : thresholds) {
        const auto f = match_for_eval(top, boxes, thr);
        const auto hits = std::count(f.begin(), f.end(), true);
        recalls.push_back(static_cast<double>(hits) / static_cast<double>(boxes.size()));
      }
    }
    r.ar[k] = mean_of(recalls);
  }
  return r;
}

nlohmann::json to_json(const EvalResult & r)
{
  nlohmann::json ar = nlohmann::json::object();
  for (const auto & [k, v] : r.ar) {
    ar[std::to_string(k)] = v;
  }
  return nlohmann::json{{"ap", r.ap},
                        {"ap50", r.ap50},
                        {"ap_rare", r.ap_rare},
                        {"ap_common", r.ap_common},
                        {"ap_frequent", r.ap_frequent},
                        {"ap_base", r.ap_base},
                        {"ap_novel", r.ap_novel},
                        {"ar", ar},
                        {"ap_per_category", r.ap_per_category},
                        {"counts", r.counts},
                        {"frequency_thresholds",
                         {{"rare_max", r.thresholds.rare_max}, {"common_max", r.thresholds.common_max}}}};
}

std::vector<std::string> eval_csv_header()
{
  return {"ap", "ap50", "ap_rare", "ap_common", "ap_frequent", "ap_base", "ap_novel",
          "ar1", "ar10", "ar100"};
}

std::vector<double> eval_csv_values(const EvalResult & r)
{
  auto ar = [&](int k) {
    auto it = r.ar.find(k);
    return it == r.ar.end() ? 0.0 : it->second;
  };
  return {r.ap, r.ap50, r.ap_rare, r.ap_common, r.ap_frequent, r.ap_base, r.ap_novel,
          ar(1), ar(10), ar(100)};
}

}  // namespace uniworld
