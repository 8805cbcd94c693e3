#include "uniworld/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "uniworld/errors.hpp"

namespace uniworld {

using nlohmann::json;

std::string to_string(PriorSource s)
{
  return s == PriorSource::test_results ? "test_results" : "train_counts";
}

PriorSource prior_source_from_string(const std::string & s)
{
  if (s == "test_results") {
    return PriorSource::test_results;
  }
  if (s == "train_counts") {
    return PriorSource::train_counts;
  }
  throw ConfigError("unknown prior source '" + s + "' (expected test_results or train_counts)");
}

void InferenceConfig::validate() const
{
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(alpha) || !unit(beta)) {
    throw ConfigError("inference: alpha and beta must lie in [0, 1]");
  }
  if (!(gamma >= 0.0)) {
    throw ConfigError("inference: gamma must be >= 0");
  }
  if (categories_per_proposal < 0) {
    throw ConfigError("inference: categories_per_proposal must be >= 0");
  }
  if (top_k < 1 || max_detections < 1) {
    throw ConfigError("inference: top_k and max_detections must be >= 1");
  }
  if (!(nms_iou > 0.0 && nms_iou <= 1.0) || !(wbf_iou > 0.0 && wbf_iou <= 1.0)) {
    throw ConfigError("inference: IoU thresholds must lie in (0, 1]");
  }
}

json to_json(const InferenceConfig & c)
{
  return json{{"alpha", c.alpha},
              {"beta", c.beta},
              {"gamma", c.gamma},
              {"calibrate", c.calibrate},
              {"prior_source", to_string(c.prior_source)},
              {"eta_mode", to_string(c.eta_mode)},
              {"top_k", c.top_k},
              {"nms_iou", c.nms_iou},
              {"max_detections", c.max_detections},
              {"categories_per_proposal", c.categories_per_proposal},
              {"wbf_iou", c.wbf_iou},
              {"prior_score_thresh", c.prior_score_thresh}};
}

InferenceConfig inference_config_from_json(const json & j)
{
  InferenceConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.gamma = j.value("gamma", c.gamma);
  c.calibrate = j.value("calibrate", c.calibrate);
  c.prior_source = prior_source_from_string(j.value("prior_source", to_string(c.prior_source)));
  c.eta_mode = eta_mode_from_string(j.value("eta_mode", to_string(c.eta_mode)));
  c.top_k = j.value("top_k", c.top_k);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  c.max_detections = j.value("max_detections", c.max_detections);
  c.categories_per_proposal = j.value("categories_per_proposal", c.categories_per_proposal);
  c.wbf_iou = j.value("wbf_iou", c.wbf_iou);
  c.prior_score_thresh = j.value("prior_score_thresh", c.prior_score_thresh);
  return c;
}

double PriorTable::at(const std::string & key) const
{
  auto it = pi.find(key);
  if (it == pi.end()) {
    throw std::out_of_range("prior has no entry for category '" + key + "'");
  }
  return it->second;
}

json to_json(const PriorTable & p)
{
  return json{{"pi", p.pi},
              {"provenance", to_string(p.provenance)},
              {"gamma", p.gamma},
              {"floor", p.floor},
              {"uniform_fallback", p.uniform_fallback},
              {"count_rule", p.provenance == PriorSource::test_results
                               ? "argmax category of raw-probability scores"
                               : "annotated training instances"}};
}

PriorTable prior_table_from_json(const json & j)
{
  try {
    PriorTable p;
    p.pi = j.at("pi").get<std::map<std::string, double>>();
    p.provenance = prior_source_from_string(j.at("provenance").get<std::string>());
    p.gamma = j.at("gamma").get<double>();
    p.floor = j.at("floor").get<double>();
    p.uniform_fallback = j.value("uniform_fallback", false);
    return p;
  } catch (const json::exception & e) {
    throw FormatError(std::string("prior: ") + e.what());
  }
}

double default_prior_floor(std::size_t n_categories)
{
  return n_categories == 0 ? 0.0 : 1.0 / (10.0 * static_cast<double>(n_categories));
}

PriorTable prior_from_counts(const std::map<std::string, double> & counts, const LabelSpace & space,
                             PriorSource provenance, double gamma, double floor)
{
  if (space.empty()) {
    throw std::invalid_argument("prior over an empty label space");
  }
  PriorTable p;
  p.provenance = provenance;
  p.gamma = gamma;
  p.floor = floor;
  double total = 0.0;
  for (const auto & k : space.keys()) {
    auto it = counts.find(k);
    if (it != counts.end()) {
      if (it->second < 0.0) {
        throw std::invalid_argument("negative count for category '" + k + "'");
      }
      total += it->second;
    }
  }
  const double uniform = 1.0 / static_cast<double>(space.size());
  p.uniform_fallback = total <= 0.0;
  for (const auto & k : space.keys()) {
    double v = uniform;
    if (!p.uniform_fallback) {
      auto it = counts.find(k);
      v = it == counts.end() ? 0.0 : it->second / total;
    }
    p.pi[k] = std::max(v, floor);
  }
  return p;
}

RawImageDetections detect_raw(const TrainedSystem & system, const SyntheticImage & image,
                              const Eigen::MatrixXd & emb, const InferenceConfig & cfg)
{
  ProposeOptions opts;
  opts.top_k = cfg.top_k;
  opts.alpha = cfg.alpha;
  opts.eta_mode = cfg.eta_mode;
  opts.shared_projection = system.shared_backbone ? &system.roi.projection : nullptr;

  RawImageDetections out;
  out.image_id = image.image_id;
  out.proposals = propose(image, system.proposal, system.anchors, opts);
  out.probs.resize(static_cast<Eigen::Index>(out.proposals.size()), emb.rows());
  for (std::size_t i = 0; i < out.proposals.size(); ++i) {
    out.probs.row(static_cast<Eigen::Index>(i)) =
      classify_region(out.proposals[i].pooled_feature, system.roi, emb).transpose();
  }
  return out;
}

RawDetections detect_raw(const TrainedSystem & system, const std::vector<SyntheticImage> & images,
                         const LabelSpace & space, const EmbeddingTable & table,
                         const InferenceConfig & cfg)
{
  cfg.validate();
  const Eigen::MatrixXd emb = embedding_matrix(space, table);
  RawDetections raw;
  raw.space = space;
  raw.images.reserve(images.size());
  for (const auto & img : images) {
    raw.images.push_back(detect_raw(system, img, emb, cfg));
  }
  return raw;
}

PriorTable estimate_prior(const RawDetections & raw, const InferenceConfig & cfg)
{
  if (raw.images.empty()) {
    throw std::invalid_argument("prior estimation needs at least one image");
  }
  std::map<std::string, double> counts;
  for (const auto & img : raw.images) {
    for (std::size_t i = 0; i < img.proposals.size(); ++i) {
      Eigen::Index best = 0;
      const double p = img.probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
      if (final_score(p, img.proposals[i].eta, cfg.beta) >= cfg.prior_score_thresh) {
        counts[raw.space[static_cast<std::size_t>(best)]] += 1.0;
      }
    }
  }
  return prior_from_counts(counts, raw.space, PriorSource::test_results, cfg.gamma,
                           default_prior_floor(raw.space.size()));
}

PriorTable estimate_prior(const std::vector<DetDataset> & train, const LabelSpace & space,
                          const InferenceConfig & cfg)
{
  std::map<std::string, double> counts;
  for (const auto & [key, n] : train_instance_counts(train)) {
    counts[key] = n;
  }
  return prior_from_counts(counts, space, PriorSource::train_counts, cfg.gamma,
                           default_prior_floor(space.size()));
}

double calibrate(double p, double pi, double gamma)
{
  return p / std::pow(pi, gamma);
}

double calibrate(double p, const PriorTable & prior, const std::string & key)
{
  return calibrate(p, prior.at(key), prior.gamma);
}

double final_score(double p, double eta, double beta)
{
  if (p == eta) {
    return p;
  }
  return std::pow(p, beta) * std::pow(eta, 1.0 - beta);
}

std::vector<ScoredDetection> postprocess(const RawImageDetections & raw, const LabelSpace & space,
                                         const PriorTable * prior, const InferenceConfig & cfg)
{
  const auto n_cat = space.size();
  std::vector<double> divisor(n_cat, 1.0);
  if (prior != nullptr) {
    for (std::size_t j = 0; j < n_cat; ++j) {
      divisor[j] = std::pow(prior->at(space[j]), prior->gamma);
    }
  }
  const std::size_t per_proposal =
    cfg.categories_per_proposal == 0 ? n_cat
                                     : std::min(n_cat, static_cast<std::size_t>(cfg.categories_per_proposal));
  std::vector<ScoredDetection> dets;
  dets.reserve(raw.proposals.size() * per_proposal);
  std::vector<double> p(n_cat);
  std::vector<std::size_t> order(n_cat);
  for (std::size_t i = 0; i < raw.proposals.size(); ++i) {
    const auto & prop = raw.proposals[i];
    for (std::size_t j = 0; j < n_cat; ++j) {
      p[j] = raw.probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) / divisor[j];
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    for (std::size_t r = 0; r < per_proposal; ++r) {
      const std::size_t j = order[r];
      const double s = final_score(p[j], prop.eta, cfg.beta);
      if (s > 0.0) {
        dets.push_back(ScoredDetection{prop.box, s, space[j], std::nullopt});
      }
    }
  }
  dets = nms(std::move(dets), cfg.nms_iou);
  if (dets.size() > static_cast<std::size_t>(cfg.max_detections)) {
    dets.resize(static_cast<std::size_t>(cfg.max_detections));
  }
  return dets;
}

std::vector<std::vector<ScoredDetection>> postprocess(const RawDetections & raw,
                                                      const PriorTable * prior,
                                                      const InferenceConfig & cfg)
{
  std::vector<std::vector<ScoredDetection>> out;
  out.reserve(raw.images.size());
  for (const auto & img : raw.images) {
    out.push_back(postprocess(img, raw.space, cfg.calibrate ? prior : nullptr, cfg));
  }
  return out;
}

std::vector<std::vector<ScoredDetection>> run_open_world(const std::vector<TrainedSystem> & systems,
                                                         const DetDataset & test,
                                                         const LabelSpace & test_space,
                                                         const EmbeddingTable & table,
                                                         const InferenceConfig & cfg,
                                                         const std::vector<DetDataset> * train)
{
  cfg.validate();
  if (systems.empty()) {
    throw std::invalid_argument("run_open_world: no systems");
  }
  std::vector<std::vector<std::vector<ScoredDetection>>> per_system;
  for (const auto & sys : systems) {
    const RawDetections raw = detect_raw(sys, test.images, test_space, table, cfg);
    PriorTable prior;
    if (cfg.calibrate) {
      if (cfg.prior_source == PriorSource::train_counts) {
        if (train == nullptr) {
          throw ConfigError("train-count prior requested without training data");
        }
        prior = estimate_prior(*train, test_space, cfg);
      } else {
        prior = estimate_prior(raw, cfg);
      }
    }
    auto dets = postprocess(raw, &prior, cfg);
    for (auto & image_dets : dets) {
      for (auto & d : image_dets) {
        d.source = sys.name;
      }
    }
    per_system.push_back(std::move(dets));
  }
  if (per_system.size() == 1) {
    return std::move(per_system.front());
  }

  std::vector<std::vector<ScoredDetection>> fused(test.images.size());
  for (std::size_t i = 0; i < test.images.size(); ++i) {
    std::vector<std::vector<ScoredDetection>> lists;
    for (const auto & s : per_system) {
      lists.push_back(s[i]);
    }
    fused[i] = wbf(lists, cfg.wbf_iou);
    sort_detections(fused[i]);
    if (fused[i].size() > static_cast<std::size_t>(cfg.max_detections)) {
      fused[i].resize(static_cast<std::size_t>(cfg.max_detections));
    }
  }
  return fused;
}

DetDataset pseudo_label(const TrainedSystem & system, const DetDataset & dataset,
                        const EmbeddingTable & table, double conf_thresh,
                        const InferenceConfig & cfg)
{
  std::vector<LabelSpace> spaces;
  for (const auto & [name, space] : system.heads) {
    spaces.push_back(space);
  }
  const LabelSpace vocab = union_spaces(spaces);
  InferenceConfig plain = cfg;
  plain.calibrate = false;
  const RawDetections raw = detect_raw(system, dataset.images, vocab, table, plain);
  return append_pseudo_labels(dataset, postprocess(raw, nullptr, plain), conf_thresh);
}

std::string detections_jsonl(const std::vector<std::string> & image_ids,
                             const std::vector<std::vector<ScoredDetection>> & dets)
{
  if (image_ids.size() != dets.size()) {
    throw std::invalid_argument("detections_jsonl: one id per image required");
  }
  std::string out;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    out += json{{"image_id", image_ids[i]}, {"detections", to_json(dets[i])}}.dump();
    out += '\n';
  }
  return out;
}

void write_detections_jsonl(const std::filesystem::path & file,
                            const std::vector<std::string> & image_ids,
                            const std::vector<std::vector<ScoredDetection>> & dets)
{
  std::ofstream os(file, std::ios::binary);
  if (!os) {
    throw std::runtime_error("cannot write " + file.string());
  }
  os << detections_jsonl(image_ids, dets);
}

std::map<std::string, std::vector<ScoredDetection>> read_detections_jsonl(
  const std::filesystem::path & file)
{
  std::ifstream is(file);
  if (!is) {
    throw std::runtime_error("cannot read " + file.string());
  }
  std::map<std::string, std::vector<ScoredDetection>> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    try {
      const json j = json::parse(line);
      out[j.at("image_id").get<std::string>()] = detections_from_json(j.at("detections"));
    } catch (const json::exception & e) {
      throw FormatError(file.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace uniworld
