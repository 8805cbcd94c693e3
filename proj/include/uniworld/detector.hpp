#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "uniworld/geometry.hpp"
#include "uniworld/synthworld.hpp"

namespace uniworld {

inline double sigmoid(double x)
{
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(sigmoid(x)) without overflow.
inline double log_sigmoid(double x)
{
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

/// Inclusive range of grid cells whose centers fall inside a box.
struct CellRange
{
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;

  bool empty() const noexcept { return x1 < x0 || y1 < y0; }
  int width() const noexcept { return x1 - x0 + 1; }
  int height() const noexcept { return y1 - y0 + 1; }
  int cells() const noexcept { return empty() ? 0 : width() * height(); }
};

CellRange cell_range(const Box & box, int image_size);

/// Mean of the cells whose centers fall inside `box`. Throws std::invalid_argument when the
/// box covers no cell center.
Eigen::VectorXd pool_feature(const SyntheticImage & image, const Box & box);

/// Per-image summed-area tables behind pooling and the box descriptor: feature sums,
/// squared norms, and the dot products of horizontally and vertically adjacent cells.
class FeatureMaps
{
public:
  explicit FeatureMaps(const SyntheticImage & image);

  int size() const noexcept { return size_; }
  int dim() const noexcept { return dim_; }

  Eigen::VectorXd mean_feature(const CellRange & r) const;
  double mean_energy(const CellRange & r) const;
  /// Mean of right-neighbour products over cells [x0..x1] x [y0..y1] (pair (x,y)-(x+1,y)).
  double mean_h(int x0, int y0, int x1, int y1) const;
  /// Mean of down-neighbour products (pair (x,y)-(x,y+1)).
  double mean_v(int x0, int y0, int x1, int y1) const;

private:
  double rect(const std::vector<double> & table, int x0, int y0, int x1, int y1,
              int stride = 1, int offset = 0) const;

  int size_;
  int dim_;
  std::vector<double> feat_;    // (S+1)^2 x D
  std::vector<double> energy_;  // (S+1)^2
  std::vector<double> h_;       // (S+1)^2
  std::vector<double> v_;       // (S+1)^2
};

/// Number of entries in a box descriptor.
inline constexpr int kDescriptorSize = 20;
/// Index of the embedding-space energy entry, the one term that depends on a projection.
inline constexpr int kSemanticEnergyIndex = 2;

using Descriptor = Eigen::Matrix<double, kDescriptorSize, 1>;
using AugDescriptor = Eigen::Matrix<double, kDescriptorSize + 1, 1>;

/// Class-agnostic description of how well a box fits a coherent region: interior and
/// boundary coherence of neighbouring cells, energy, embedding-space energy and log-area.
/// `projection` (E x D), when given, measures the energy entry through it as
/// D * |P f|^2 / |P|_F^2; without it the entry is |f|^2.
Descriptor box_descriptor(const FeatureMaps & maps, const Box & box,
                          const Eigen::MatrixXd * projection = nullptr);

/// Regular grid of square anchors.
struct AnchorGrid
{
  std::vector<int> scales{4, 8, 16};
  int stride = 2;
  int image_size = 32;

  struct Anchor
  {
    Box box;
    int scale_index = 0;
  };

  /// All anchors, clipped to the image, ordered by scale, then row, then column.
  std::vector<Anchor> generate() const;
};

/// Class-agnostic localization network parameters. The proposal-side heads (objectness and
/// box deltas) hold one weight set per anchor scale; the RoI-side heads are shared.
struct ProposalNetParams
{
  std::vector<AugDescriptor> objectness;                                 ///< s_r1, per scale
  std::vector<Eigen::Matrix<double, 4, kDescriptorSize + 1>> box_delta;  ///< per scale
  AugDescriptor locquality = AugDescriptor::Zero();                      ///< s_r2
  AugDescriptor binarycls = AugDescriptor::Zero();                       ///< s_c
  Descriptor feature_mean = Descriptor::Zero();
  Descriptor feature_scale = Descriptor::Ones();

  static ProposalNetParams zeros(std::size_t n_scales);

  AugDescriptor standardize(const Descriptor & raw) const;
  bool all_finite() const;
  bool operator==(const ProposalNetParams & other) const;
};

/// Projection from pooled RoI features to the embedding space plus the sigmoid temperature.
struct RoIClassifierParams
{
  Eigen::MatrixXd projection;  ///< E x D
  double tau = 0.01;

  /// Scaled identity plus Gaussian noise; the synthetic analog of image-text pre-training.
  static RoIClassifierParams aligned(int embed_dim, int feat_dim, double tau, Rng & rng,
                                     double scale = 0.05, double noise = 0.05);
  /// Gaussian init with the same scale and no alignment.
  static RoIClassifierParams random(int embed_dim, int feat_dim, double tau, Rng & rng,
                                    double scale = 0.05);

  bool operator==(const RoIClassifierParams & other) const
  {
    return tau == other.tau && projection == other.projection;
  }
};

/// How a proposal's final confidence is formed from the three CLN scores.
enum class EtaMode
{
  cln,           ///< (s_c)^alpha * (s_r1 * s_r2)^(1 - alpha)
  localization,  ///< s_r1 * s_r2
  objectness,    ///< s_r1
};

std::string to_string(EtaMode mode);
EtaMode eta_mode_from_string(const std::string & s);

/// Geometric weighting of the classification and localization confidences. 0^0 is 1.
double cln_score(double s_c, double s_r1, double s_r2, double alpha);

struct Proposal
{
  Box box;  ///< refined and clipped
  Box anchor;
  int scale_index = 0;
  double s_r1 = 0.0;
  double s_r2 = 0.0;
  double s_c = 0.0;
  double eta = 0.0;
  Eigen::VectorXd pooled_feature;
};

struct ProposeOptions
{
  int top_k = 100;
  double alpha = 0.3;
  EtaMode eta_mode = EtaMode::cln;
  double nms_iou = 0.7;
  /// Projection shared with the RoI head (joint training); null for an independent backbone.
  const Eigen::MatrixXd * shared_projection = nullptr;
};

/// Applies (dx, dy, dlogw, dlogh) to a box, clips it and keeps at least one cell center.
Box apply_deltas(const Box & anchor, const Eigen::Vector4d & deltas, int image_size);

/// Regression targets that map `anchor` onto `target`.
Eigen::Vector4d box_deltas(const Box & anchor, const Box & target);

/// Scores every anchor, refines the best 4*top_k, rescores them with the RoI-side heads and
/// returns at most top_k proposals ordered by eta after class-agnostic NMS.
std::vector<Proposal> propose(const SyntheticImage & image, const ProposalNetParams & params,
                              const AnchorGrid & anchors, const ProposeOptions & opts);

/// Same, reusing precomputed maps and anchors.
std::vector<Proposal> propose(const SyntheticImage & image, const FeatureMaps & maps,
                              const ProposalNetParams & params,
                              const std::vector<AnchorGrid::Anchor> & anchors,
                              const ProposeOptions & opts);

/// Region-to-embedding logits (P f) . e_j / tau for every row e_j of `emb`.
Eigen::VectorXd region_logits(const Eigen::VectorXd & pooled, const RoIClassifierParams & params,
                              const Eigen::MatrixXd & emb);

/// Independent per-category sigmoid probabilities, kept strictly inside (0, 1).
Eigen::VectorXd classify_region(const Eigen::VectorXd & pooled, const RoIClassifierParams & params,
                                const Eigen::MatrixXd & emb);

/// Clamps a probability into the open unit interval.
double open_unit(double p);

nlohmann::json to_json(const ProposalNetParams & p);
ProposalNetParams proposal_params_from_json(const nlohmann::json & j);
nlohmann::json to_json(const RoIClassifierParams & p);
RoIClassifierParams roi_params_from_json(const nlohmann::json & j);
nlohmann::json to_json(const AnchorGrid & g);
AnchorGrid anchor_grid_from_json(const nlohmann::json & j);

}  // namespace uniworld
