#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "uniworld/detector.hpp"
#include "uniworld/labelspace.hpp"
#include "uniworld/synthworld.hpp"

namespace uniworld {

enum class Structure
{
  separate,
  unified,
  partitioned,
};

enum class RoiInit
{
  random,
  aligned,
};

std::string to_string(Structure s);
Structure structure_from_string(const std::string & s);
std::string to_string(RoiInit r);
RoiInit roi_init_from_string(const std::string & s);

struct TrainConfig
{
  int epochs = 12;
  double learning_rate = 2e-5;           ///< RoI projection
  double proposal_learning_rate = 0.05;  ///< class-agnostic heads
  int batch_size = 8;                    ///< images per step
  int neg_categories_per_roi = 32;
  double match_iou_fg = 0.5;
  double match_iou_bg = 0.3;
  std::uint64_t seed = 0;
  Structure structure = Structure::partitioned;
  bool decouple = true;
  RoiInit roi_init = RoiInit::aligned;
  double tau = 0.01;
  double alpha = 0.3;
  int anchors_per_image = 64;      ///< sampled anchors per image, at most half foreground
  int proposals_per_image = 64;    ///< proposals feeding the RoI stage
  int rois_per_image = 32;         ///< sampled RoIs per image
  double roi_fg_fraction = 0.25;   ///< cap on the foreground share of sampled RoIs
  double init_scale = 0.05;
  double init_noise = 0.05;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig & c);
TrainConfig train_config_from_json(const nlohmann::json & j);

/// Per-epoch mean losses.
struct EpochLog
{
  std::string stage;
  int epoch = 0;
  double objectness = 0.0;
  double box_delta = 0.0;
  double locquality = 0.0;
  double binarycls = 0.0;
  double roi = 0.0;
};

struct TrainedSystem
{
  std::string name;
  Structure structure = Structure::partitioned;
  ProposalNetParams proposal;
  RoIClassifierParams roi;
  /// Label-space view of each classification head. Partitioned keeps one view per source
  /// over the single shared projection.
  std::map<std::string, LabelSpace> heads;
  /// Proposal descriptors read the RoI projection (jointly trained network).
  bool shared_backbone = false;
  AnchorGrid anchors;
  TrainConfig provenance;
  std::vector<EpochLog> history;
};

nlohmann::json checkpoint_json(const TrainedSystem & sys);
TrainedSystem system_from_checkpoint(const nlohmann::json & j);

enum class MatchKind
{
  foreground,
  background,
  ignore,
};

struct MatchTarget
{
  MatchKind kind = MatchKind::background;
  int truth_index = -1;  ///< argmax-IoU truth, -1 when there is no truth
  double iou = 0.0;
};

/// Foreground iff max IoU >= cfg.match_iou_fg, background iff max IoU < cfg.match_iou_bg.
std::vector<MatchTarget> match_proposals(const std::vector<Box> & boxes,
                                         const std::vector<SceneObject> & truth,
                                         const TrainConfig & cfg);

/// One RoI with the categories its loss touches. `categories` index rows of the embedding
/// matrix passed to roi_sigmoid_loss; labels are 1 for the positive, 0 for negatives.
struct RoiExample
{
  Eigen::VectorXd pooled;
  std::vector<int> categories;
  std::vector<double> labels;
};

struct RoiLoss
{
  double loss = 0.0;
  Eigen::MatrixXd grad_projection;  ///< E x D
  Eigen::MatrixXd grad_embeddings;  ///< |L| x E, filled only on request
};

/// Mean over examples of the summed per-category binary cross-entropy of
/// sigmoid((P f) . e_j / tau).
RoiLoss roi_sigmoid_loss(const std::vector<RoiExample> & examples,
                         const RoIClassifierParams & params, const Eigen::MatrixXd & emb,
                         bool embedding_grad = false);

/// Builds RoI examples for one image: matches RoI boxes against the visible truth, samples
/// at most cfg.rois_per_image of them, and draws cfg.neg_categories_per_roi negatives
/// uniformly without replacement from `negative_pool` (positive excluded). Category indices
/// refer to `index_space`.
std::vector<RoiExample> make_roi_examples(const SyntheticImage & image,
                                          const std::vector<Box> & roi_boxes,
                                          const std::vector<SceneObject> & visible,
                                          const LabelSpace & negative_pool,
                                          const LabelSpace & index_space, const TrainConfig & cfg,
                                          Rng & rng);

/// Feature standardization and zero heads; what training starts from.
ProposalNetParams initial_proposal_params(const std::vector<const DetDataset *> & datasets,
                                          const AnchorGrid & anchors);

/// Class-agnostic training of the localization network over all images of all datasets,
/// uniformly shuffled. Class labels are never read.
ProposalNetParams train_proposal_stage(const std::vector<const DetDataset *> & datasets,
                                       const TrainConfig & cfg, const AnchorGrid & anchors,
                                       std::vector<EpochLog> * history = nullptr);

/// Fast R-CNN style training of the projection on frozen proposals. `proposals_per_image`
/// is indexed [dataset][image]; `heads` maps dataset name to its negative-sampling pool.
RoIClassifierParams train_roi_stage(const std::vector<const DetDataset *> & datasets,
                                    const std::vector<std::vector<std::vector<Box>>> & proposals_per_image,
                                    const TrainConfig & cfg, const EmbeddingTable & table,
                                    const std::map<std::string, LabelSpace> & heads,
                                    std::vector<EpochLog> * history = nullptr);

/// Both stages trained in one loop on a shared projection: every step proposes with the
/// current parameters, the RoI loss consumes those proposals and the class-agnostic losses
/// also update the projection through the descriptor's embedding-space energy.
TrainedSystem train_joint(const std::vector<const DetDataset *> & datasets, const TrainConfig & cfg,
                          const EmbeddingTable & table,
                          const std::map<std::string, LabelSpace> & heads);

/// Decoupled pipeline: proposal stage, frozen proposals, RoI stage.
TrainedSystem train_decoupled(const std::vector<const DetDataset *> & datasets,
                              const TrainConfig & cfg, const EmbeddingTable & table,
                              const std::map<std::string, LabelSpace> & heads);

/// Negative-sampling pools per dataset for a structure.
std::map<std::string, LabelSpace> structure_heads(const std::vector<const DetDataset *> & datasets,
                                                  Structure structure);

/// separate: one system per source. unified: one system whose negatives come from the union of
/// all spaces. partitioned: one system whose per-source losses only touch that source's space.
std::vector<TrainedSystem> build_structure(const std::vector<DetDataset> & datasets,
                                           const TrainConfig & cfg, const EmbeddingTable & table);

/// Appends detections with score >= conf_thresh whose category is outside the dataset's own
/// label space as visible annotations; the label space grows by those categories.
/// `detections` is parallel to dataset.images.
DetDataset append_pseudo_labels(const DetDataset & dataset,
                                const std::vector<std::vector<ScoredDetection>> & detections,
                                double conf_thresh);

}  // namespace uniworld
