#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "uniworld/detector.hpp"
#include "uniworld/geometry.hpp"
#include "uniworld/labelspace.hpp"
#include "uniworld/synthworld.hpp"
#include "uniworld/training.hpp"

namespace uniworld {

enum class PriorSource
{
  test_results,
  train_counts,
};

std::string to_string(PriorSource s);
PriorSource prior_source_from_string(const std::string & s);

struct InferenceConfig
{
  double alpha = 0.3;  ///< CLN weighting
  double beta = 0.3;   ///< probability vs eta in the final score
  double gamma = 0.6;  ///< calibration exponent
  bool calibrate = true;
  PriorSource prior_source = PriorSource::test_results;
  EtaMode eta_mode = EtaMode::cln;
  int top_k = 100;                  ///< proposals per image
  double nms_iou = 0.5;             ///< per-category NMS on final detections
  int max_detections = 300;         ///< per image
  /// Labels each proposal may emit, chosen by calibrated probability; 0 keeps every category.
  int categories_per_proposal = 1;
  double wbf_iou = 0.55;
  double prior_score_thresh = 0.05; ///< raw final score needed to count towards the prior

  void validate() const;
};

nlohmann::json to_json(const InferenceConfig & c);
InferenceConfig inference_config_from_json(const nlohmann::json & j);

/// Category prior pi_j used to divide probabilities.
struct PriorTable
{
  std::map<std::string, double> pi;
  PriorSource provenance = PriorSource::test_results;
  double gamma = 0.6;
  double floor = 0.0;
  /// Every count was zero and the prior fell back to uniform.
  bool uniform_fallback = false;

  double at(const std::string & key) const;
};

nlohmann::json to_json(const PriorTable & p);
PriorTable prior_table_from_json(const nlohmann::json & j);

/// Default floor 1 / (10 |L|).
double default_prior_floor(std::size_t n_categories);

/// pi_j = count_j / sum(count), then raised to `floor`. All-zero counts give a uniform prior
/// and set uniform_fallback. Keys of `space` missing from `counts` count as zero.
PriorTable prior_from_counts(const std::map<std::string, double> & counts, const LabelSpace & space,
                             PriorSource provenance, double gamma, double floor);

/// Detections of one image before calibration: one row of probabilities per proposal.
struct RawImageDetections
{
  std::string image_id;
  std::vector<Proposal> proposals;
  Eigen::MatrixXd probs;  ///< proposals x |space|
};

struct RawDetections
{
  LabelSpace space;
  std::vector<RawImageDetections> images;
};

/// Proposals from the system's localization network, probabilities against `emb` (the rows of
/// the test vocabulary).
RawImageDetections detect_raw(const TrainedSystem & system, const SyntheticImage & image,
                              const Eigen::MatrixXd & emb, const InferenceConfig & cfg);

/// Raw detections for every image. Throws MissingEmbeddingError for unregistered categories.
RawDetections detect_raw(const TrainedSystem & system, const std::vector<SyntheticImage> & images,
                         const LabelSpace & space, const EmbeddingTable & table,
                         const InferenceConfig & cfg);

/// Prior from inference results: count_j is the number of proposals whose argmax category is j
/// and whose uncalibrated final score reaches cfg.prior_score_thresh.
PriorTable estimate_prior(const RawDetections & raw, const InferenceConfig & cfg);

/// Prior from annotated training instances.
PriorTable estimate_prior(const std::vector<DetDataset> & train, const LabelSpace & space,
                          const InferenceConfig & cfg);

/// p / pi^gamma.
double calibrate(double p, double pi, double gamma);
double calibrate(double p, const PriorTable & prior, const std::string & key);

/// p^beta * eta^(1 - beta), 0^0 = 1.
double final_score(double p, double eta, double beta);

/// Final scores for every proposal and category, per-category NMS and the per-image cap.
/// `prior` may be null for uncalibrated scoring.
std::vector<ScoredDetection> postprocess(const RawImageDetections & raw, const LabelSpace & space,
                                         const PriorTable * prior, const InferenceConfig & cfg);

/// postprocess() over every image; calibrates with `prior` when cfg.calibrate is set.
std::vector<std::vector<ScoredDetection>> postprocess(const RawDetections & raw,
                                                      const PriorTable * prior,
                                                      const InferenceConfig & cfg);

/// Full open-world inference. One system: raw detection, prior, calibration, scoring.
/// Several systems (separate structure): each runs the full pipeline and the per-image outputs
/// are fused with WBF. `train` is only read for train-count priors.
std::vector<std::vector<ScoredDetection>> run_open_world(const std::vector<TrainedSystem> & systems,
                                                         const DetDataset & test,
                                                         const LabelSpace & test_space,
                                                         const EmbeddingTable & table,
                                                         const InferenceConfig & cfg,
                                                         const std::vector<DetDataset> * train = nullptr);

/// Runs `system` over `dataset` with the vocabulary of the system's heads and appends confident
/// detections of categories the dataset does not annotate.
DetDataset pseudo_label(const TrainedSystem & system, const DetDataset & dataset,
                        const EmbeddingTable & table, double conf_thresh,
                        const InferenceConfig & cfg = {});

/// One JSON object per line: {"image_id":..., "detections":[...]}.
void write_detections_jsonl(const std::filesystem::path & file,
                            const std::vector<std::string> & image_ids,
                            const std::vector<std::vector<ScoredDetection>> & dets);
std::string detections_jsonl(const std::vector<std::string> & image_ids,
                             const std::vector<std::vector<ScoredDetection>> & dets);
std::map<std::string, std::vector<ScoredDetection>> read_detections_jsonl(
  const std::filesystem::path & file);

}  // namespace uniworld
