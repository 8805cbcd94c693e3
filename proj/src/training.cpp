#include "uniworld/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "uniworld/errors.hpp"

namespace uniworld {

using nlohmann::json;

namespace {

constexpr std::uint64_t kStreamProposalTrain = 11;
constexpr std::uint64_t kStreamRoiInit = 12;
constexpr std::uint64_t kStreamRoiTrain = 13;
constexpr std::uint64_t kStreamJoint = 14;

using DeltaHead = Eigen::Matrix<double, 4, kDescriptorSize + 1>;

// Weight of the box-delta term relative to the logistic heads; the squared loss over 21 inputs
// has roughly 40x the curvature of a logistic head.
constexpr double kDeltaLossWeight = 0.1;

/// First k entries of a partial Fisher-Yates shuffle of 0..n-1.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng & rng)
{
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

struct ImageRef
{
  std::size_t dataset = 0;
  std::size_t image = 0;
};

std::vector<ImageRef> all_images(const std::vector<const DetDataset *> & datasets)
{
  std::vector<ImageRef> refs;
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    for (std::size_t i = 0; i < datasets[d]->images.size(); ++i) {
      refs.push_back(ImageRef{d, i});
    }
  }
  return refs;
}

std::pair<double, int> best_match(const Box & box, const std::vector<SceneObject> & truth)
{
  double best = 0.0;
  int arg = -1;
  for (std::size_t t = 0; t < truth.size(); ++t) {
    const double v = iou(box, truth[t].box);
    if (v > best) {
      best = v;
      arg = static_cast<int>(t);
    }
  }
  return {best, arg};
}

/// Derivative of the embedding-space energy D |P f|^2 / |P|_F^2 with respect to P.
Eigen::MatrixXd semantic_energy_grad(const Eigen::MatrixXd & proj, const Eigen::VectorXd & mean)
{
  const double frob = proj.squaredNorm();
  const Eigen::VectorXd u = proj * mean;
  const double dim = static_cast<double>(proj.cols());
  return dim * (2.0 * u * mean.transpose() / frob - 2.0 * u.squaredNorm() * proj / (frob * frob));
}

/// Accumulated gradients of the class-agnostic heads for one mini-batch.
struct ProposalGrad
{
  std::vector<AugDescriptor> objectness;
  std::vector<DeltaHead> box_delta;
  AugDescriptor locquality = AugDescriptor::Zero();
  AugDescriptor binarycls = AugDescriptor::Zero();
  // d loss / d P through the embedding-space energy, per head (joint mode only).
  Eigen::MatrixXd proj_obj, proj_delta, proj_loc, proj_cls;
  double loss_obj = 0.0, loss_delta = 0.0, loss_loc = 0.0, loss_cls = 0.0;
  int n_obj = 0, n_delta = 0, n_loc = 0, n_cls = 0;

  ProposalGrad(std::size_t n_scales, const Eigen::MatrixXd * proj)
    : objectness(n_scales, AugDescriptor::Zero()), box_delta(n_scales, DeltaHead::Zero())
  {
    if (proj != nullptr) {
      proj_obj = proj_delta = proj_loc = proj_cls = Eigen::MatrixXd::Zero(proj->rows(), proj->cols());
    }
  }
};

/// Class-agnostic losses of one image, accumulated into `acc`.
void proposal_image_step(const SyntheticImage & image, const FeatureMaps & maps,
                         const std::vector<SceneObject> & visible,
                         const std::vector<AnchorGrid::Anchor> & anchors,
                         const ProposalNetParams & params, const Eigen::MatrixXd * proj,
                         const TrainConfig & cfg, Rng & rng, ProposalGrad & acc)
{
  std::vector<std::size_t> fg, bg;
  std::vector<std::pair<double, int>> matches(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    matches[a] = best_match(anchors[a].box, visible);
    if (matches[a].first >= cfg.match_iou_fg) {
      fg.push_back(a);
    } else if (matches[a].first < cfg.match_iou_bg) {
      bg.push_back(a);
    }
  }
  const std::size_t want = static_cast<std::size_t>(cfg.anchors_per_image);
  std::vector<std::size_t> picked;
  for (auto i : sample_indices(fg.size(), want / 2, rng)) {
    picked.push_back(fg[i]);
  }
  const std::size_t n_fg = picked.size();
  for (auto i : sample_indices(bg.size(), want - n_fg, rng)) {
    picked.push_back(bg[i]);
  }

  const double sem_scale = params.feature_scale[kSemanticEnergyIndex];
  auto add_sem = [&](Eigen::MatrixXd & into, double dloss_dx, const Box & box) {
    if (proj == nullptr || dloss_dx == 0.0) {
      return;
    }
    const Eigen::VectorXd mean = maps.mean_feature(cell_range(box, image.size));
    into += (dloss_dx / sem_scale) * semantic_energy_grad(*proj, mean);
  };

  for (std::size_t n = 0; n < picked.size(); ++n) {
    const std::size_t a = picked[n];
    const bool is_fg = n < n_fg;
    const auto & anchor = anchors[a];
    const auto s = static_cast<std::size_t>(anchor.scale_index);
    const AugDescriptor x = params.standardize(box_descriptor(maps, anchor.box, proj));

    // Objectness (s_r1) on the anchor.
    const double logit = params.objectness[s].dot(x);
    const double y = is_fg ? 1.0 : 0.0;
    const double p = sigmoid(logit);
    acc.loss_obj -= y * log_sigmoid(logit) + (1.0 - y) * log_sigmoid(-logit);
    acc.objectness[s] += (p - y) * x;
    acc.n_obj += 1;
    add_sem(acc.proj_obj, (p - y) * params.objectness[s][kSemanticEnergyIndex], anchor.box);

    // Box deltas toward the matched truth, foreground only.
    const Eigen::Vector4d pred = params.box_delta[s] * x;
    if (is_fg) {
      const Box & target = visible[static_cast<std::size_t>(matches[a].second)].box;
      const Eigen::Vector4d err = pred - box_deltas(anchor.box, target);
      acc.loss_delta += err.squaredNorm();
      acc.box_delta[s] += kDeltaLossWeight * 2.0 * err * x.transpose();
      acc.n_delta += 1;
      add_sem(acc.proj_delta,
              kDeltaLossWeight * 2.0 * err.dot(params.box_delta[s].col(kSemanticEnergyIndex)),
              anchor.box);
    }

    // RoI-side heads on the refined box.
    const Box refined = apply_deltas(anchor.box, pred, image.size);
    const auto [riou, rarg] = best_match(refined, visible);
    (void)rarg;
    if (riou >= cfg.match_iou_fg || riou < cfg.match_iou_bg) {
      const AugDescriptor xr = params.standardize(box_descriptor(maps, refined, proj));
      const double ry = riou >= cfg.match_iou_fg ? 1.0 : 0.0;
      const double cl = params.binarycls.dot(xr);
      const double pc = sigmoid(cl);
      acc.loss_cls -= ry * log_sigmoid(cl) + (1.0 - ry) * log_sigmoid(-cl);
      acc.binarycls += (pc - ry) * xr;
      acc.n_cls += 1;
      add_sem(acc.proj_cls, (pc - ry) * params.binarycls[kSemanticEnergyIndex], refined);

      if (ry > 0.0) {
        const double q = sigmoid(params.locquality.dot(xr));
        const double err = q - riou;
        const double dlogit = 2.0 * err * q * (1.0 - q);
        acc.loss_loc += err * err;
        acc.locquality += dlogit * xr;
        acc.n_loc += 1;
        add_sem(acc.proj_loc, dlogit * params.locquality[kSemanticEnergyIndex], refined);
      }
    }
  }
}

/// Applies one averaged gradient step to the class-agnostic heads; returns d loss / d P.
Eigen::MatrixXd apply_proposal_grad(ProposalNetParams & params, const ProposalGrad & g, double lr)
{
  auto inv = [](int n) { return n > 0 ? 1.0 / n : 0.0; };
  for (std::size_t s = 0; s < params.objectness.size(); ++s) {
    params.objectness[s] -= lr * inv(g.n_obj) * g.objectness[s];
    params.box_delta[s] -= lr * inv(g.n_delta) * g.box_delta[s];
  }
  params.binarycls -= lr * inv(g.n_cls) * g.binarycls;
  params.locquality -= lr * inv(g.n_loc) * g.locquality;
  if (g.proj_obj.size() == 0) {
    return {};
  }
  return inv(g.n_obj) * g.proj_obj + inv(g.n_delta) * g.proj_delta + inv(g.n_loc) * g.proj_loc +
         inv(g.n_cls) * g.proj_cls;
}

void log_proposal(EpochLog & log, const ProposalGrad & g)
{
  log.objectness += g.loss_obj;
  log.box_delta += g.loss_delta;
  log.locquality += g.loss_loc;
  log.binarycls += g.loss_cls;
}

struct LossCounts
{
  int obj = 0, delta = 0, loc = 0, cls = 0, roi = 0;

  void add(const ProposalGrad & g)
  {
    obj += g.n_obj;
    delta += g.n_delta;
    loc += g.n_loc;
    cls += g.n_cls;
  }

  void finish(EpochLog & log) const
  {
    auto inv = [](int n) { return n > 0 ? 1.0 / n : 0.0; };
    log.objectness *= inv(obj);
    log.box_delta *= inv(delta);
    log.locquality *= inv(loc);
    log.binarycls *= inv(cls);
    log.roi *= inv(roi);
  }
};

AnchorGrid anchors_for(const std::vector<const DetDataset *> & datasets)
{
  for (const auto * ds : datasets) {
    if (!ds->images.empty()) {
      AnchorGrid g;
      g.image_size = ds->images.front().size;
      return g;
    }
  }
  throw std::invalid_argument("training needs at least one image");
}

LabelSpace index_space_of(const std::map<std::string, LabelSpace> & heads)
{
  std::vector<LabelSpace> spaces;
  for (const auto & [name, space] : heads) {
    spaces.push_back(space);
  }
  return union_spaces(spaces);
}

const LabelSpace & pool_for(const std::map<std::string, LabelSpace> & heads, const DetDataset & ds)
{
  auto it = heads.find(ds.name);
  if (it == heads.end()) {
    throw ConfigError("no classification head for dataset '" + ds.name + "'");
  }
  return it->second;
}

RoIClassifierParams initial_roi_params(const TrainConfig & cfg, int embed_dim, int feat_dim)
{
  Rng rng = make_rng(cfg.seed, kStreamRoiInit);
  return cfg.roi_init == RoiInit::aligned
           ? RoIClassifierParams::aligned(embed_dim, feat_dim, cfg.tau, rng, cfg.init_scale,
                                          cfg.init_noise)
           : RoIClassifierParams::random(embed_dim, feat_dim, cfg.tau, rng, cfg.init_scale);
}

void check_datasets(const std::vector<const DetDataset *> & datasets)
{
  std::size_t n = 0;
  for (const auto * ds : datasets) {
    if (ds == nullptr) {
      throw std::invalid_argument("null dataset");
    }
    n += ds->images.size();
  }
  if (n == 0) {
    throw std::invalid_argument("training needs a non-empty dataset");
  }
}

}  // namespace

std::string to_string(Structure s)
{
  switch (s) {
    case Structure::separate:
      return "separate";
    case Structure::unified:
      return "unified";
    case Structure::partitioned:
      return "partitioned";
  }
  return "partitioned";
}

Structure structure_from_string(const std::string & s)
{
  if (s == "separate") {
    return Structure::separate;
  }
  if (s == "unified") {
    return Structure::unified;
  }
  if (s == "partitioned") {
    return Structure::partitioned;
  }
  throw ConfigError("unknown structure '" + s + "' (expected separate, unified or partitioned)");
}

std::string to_string(RoiInit r) { return r == RoiInit::aligned ? "aligned" : "random"; }

RoiInit roi_init_from_string(const std::string & s)
{
  if (s == "aligned") {
    return RoiInit::aligned;
  }
  if (s == "random") {
    return RoiInit::random;
  }
  throw ConfigError("unknown roi_init '" + s + "' (expected aligned or random)");
}

void TrainConfig::validate() const
{
  if (epochs < 0) {
    throw ConfigError("train: epochs must be >= 0");
  }
  if (!(match_iou_bg > 0.0 && match_iou_bg < match_iou_fg && match_iou_fg <= 1.0)) {
    throw ConfigError("train: need 0 < match_iou_bg < match_iou_fg <= 1");
  }
  if (batch_size < 1 || neg_categories_per_roi < 0 || anchors_per_image < 2 ||
      proposals_per_image < 1 || rois_per_image < 1) {
    throw ConfigError("train: batch and sampling sizes must be positive");
  }
  if (!(learning_rate >= 0.0) || !(proposal_learning_rate >= 0.0)) {
    throw ConfigError("train: learning rates must be >= 0");
  }
  if (!(roi_fg_fraction > 0.0 && roi_fg_fraction <= 1.0)) {
    throw ConfigError("train: roi_fg_fraction must lie in (0, 1]");
  }
  if (!(tau > 0.0)) {
    throw ConfigError("train: tau must be > 0");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("train: alpha must lie in [0, 1]");
  }
}

json to_json(const TrainConfig & c)
{
  return json{{"epochs", c.epochs},
              {"learning_rate", c.learning_rate},
              {"proposal_learning_rate", c.proposal_learning_rate},
              {"batch_size", c.batch_size},
              {"neg_categories_per_roi", c.neg_categories_per_roi},
              {"match_iou_fg", c.match_iou_fg},
              {"match_iou_bg", c.match_iou_bg},
              {"seed", c.seed},
              {"structure", to_string(c.structure)},
              {"decouple", c.decouple},
              {"roi_init", to_string(c.roi_init)},
              {"tau", c.tau},
              {"alpha", c.alpha},
              {"anchors_per_image", c.anchors_per_image},
              {"proposals_per_image", c.proposals_per_image},
              {"rois_per_image", c.rois_per_image},
              {"roi_fg_fraction", c.roi_fg_fraction},
              {"init_scale", c.init_scale},
              {"init_noise", c.init_noise}};
}

TrainConfig train_config_from_json(const json & j)
{
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.proposal_learning_rate = j.value("proposal_learning_rate", c.proposal_learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.neg_categories_per_roi = j.value("neg_categories_per_roi", c.neg_categories_per_roi);
  c.match_iou_fg = j.value("match_iou_fg", c.match_iou_fg);
  c.match_iou_bg = j.value("match_iou_bg", c.match_iou_bg);
  c.seed = j.value("seed", c.seed);
  c.structure = structure_from_string(j.value("structure", to_string(c.structure)));
  c.decouple = j.value("decouple", c.decouple);
  c.roi_init = roi_init_from_string(j.value("roi_init", to_string(c.roi_init)));
  c.tau = j.value("tau", c.tau);
  c.alpha = j.value("alpha", c.alpha);
  c.anchors_per_image = j.value("anchors_per_image", c.anchors_per_image);
  c.proposals_per_image = j.value("proposals_per_image", c.proposals_per_image);
  c.rois_per_image = j.value("rois_per_image", c.rois_per_image);
  c.roi_fg_fraction = j.value("roi_fg_fraction", c.roi_fg_fraction);
  c.init_scale = j.value("init_scale", c.init_scale);
  c.init_noise = j.value("init_noise", c.init_noise);
  return c;
}

json checkpoint_json(const TrainedSystem & sys)
{
  json heads = json::object();
  for (const auto & [name, space] : sys.heads) {
    heads[name] = space.keys();
  }
  return json{{"name", sys.name},
              {"structure", to_string(sys.structure)},
              {"proposal", to_json(sys.proposal)},
              {"roi", to_json(sys.roi)},
              {"tau", sys.roi.tau},
              {"anchors", to_json(sys.anchors)},
              {"heads", heads},
              {"shared_backbone", sys.shared_backbone},
              {"config", to_json(sys.provenance)}};
}

TrainedSystem system_from_checkpoint(const json & j)
{
  try {
    TrainedSystem sys;
    sys.name = j.at("name").get<std::string>();
    sys.structure = structure_from_string(j.at("structure").get<std::string>());
    sys.proposal = proposal_params_from_json(j.at("proposal"));
    sys.roi = roi_params_from_json(j.at("roi"));
    sys.anchors = anchor_grid_from_json(j.at("anchors"));
    for (const auto & [name, keys] : j.at("heads").items()) {
      sys.heads.emplace(name, LabelSpace(keys.get<std::vector<std::string>>()));
    }
    sys.shared_backbone = j.at("shared_backbone").get<bool>();
    sys.provenance = train_config_from_json(j.at("config"));
    return sys;
  } catch (const json::exception & e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

std::vector<MatchTarget> match_proposals(const std::vector<Box> & boxes,
                                         const std::vector<SceneObject> & truth,
                                         const TrainConfig & cfg)
{
  std::vector<MatchTarget> out;
  out.reserve(boxes.size());
  for (const auto & b : boxes) {
    const auto [best, arg] = best_match(b, truth);
    MatchTarget t;
    t.iou = best;
    t.truth_index = arg;
    if (best >= cfg.match_iou_fg) {
      t.kind = MatchKind::foreground;
    } else if (best < cfg.match_iou_bg) {
      t.kind = MatchKind::background;
    } else {
      t.kind = MatchKind::ignore;
    }
    out.push_back(t);
  }
  return out;
}

RoiLoss roi_sigmoid_loss(const std::vector<RoiExample> & examples, const RoIClassifierParams & params,
                         const Eigen::MatrixXd & emb, bool embedding_grad)
{
  RoiLoss out;
  out.grad_projection = Eigen::MatrixXd::Zero(params.projection.rows(), params.projection.cols());
  if (embedding_grad) {
    out.grad_embeddings = Eigen::MatrixXd::Zero(emb.rows(), emb.cols());
  }
  if (examples.empty()) {
    return out;
  }
  const double inv_tau = 1.0 / params.tau;
  Eigen::VectorXd dz(params.projection.rows());
  for (const auto & ex : examples) {
    const Eigen::VectorXd z = params.projection * ex.pooled;
    dz.setZero();
    for (std::size_t k = 0; k < ex.categories.size(); ++k) {
      const auto row = static_cast<Eigen::Index>(ex.categories[k]);
      const double y = ex.labels[k];
      const double logit = emb.row(row).dot(z) * inv_tau;
      out.loss -= y * log_sigmoid(logit) + (1.0 - y) * log_sigmoid(-logit);
      const double g = (sigmoid(logit) - y) * inv_tau;
      dz += g * emb.row(row).transpose();
      if (embedding_grad) {
        out.grad_embeddings.row(row) += g * z.transpose();
      }
    }
    out.grad_projection += dz * ex.pooled.transpose();
  }
  const double inv_n = 1.0 / static_cast<double>(examples.size());
  out.loss *= inv_n;
  out.grad_projection *= inv_n;
  if (embedding_grad) {
    out.grad_embeddings *= inv_n;
  }
  return out;
}

std::vector<RoiExample> make_roi_examples(const SyntheticImage & image,
                                          const std::vector<Box> & roi_boxes,
                                          const std::vector<SceneObject> & visible,
                                          const LabelSpace & negative_pool,
                                          const LabelSpace & index_space, const TrainConfig & cfg,
                                          Rng & rng)
{
  std::vector<Box> boxes = roi_boxes;
  for (const auto & o : visible) {
    boxes.push_back(o.box);
  }
  const auto targets = match_proposals(boxes, visible, cfg);
  std::vector<std::size_t> fg, bg;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!boxes[i].valid() || cell_range(boxes[i], image.size).empty()) {
      continue;
    }
    if (targets[i].kind == MatchKind::foreground) {
      fg.push_back(i);
    } else if (targets[i].kind == MatchKind::background) {
      bg.push_back(i);
    }
  }
  const std::size_t want = static_cast<std::size_t>(cfg.rois_per_image);
  std::vector<std::size_t> picked;
  for (auto i : sample_indices(fg.size(), std::max<std::size_t>(1, static_cast<std::size_t>(cfg.roi_fg_fraction * static_cast<double>(want))), rng)) {
    picked.push_back(fg[i]);
  }
  const std::size_t n_fg = picked.size();
  for (auto i : sample_indices(bg.size(), want - std::min(want, n_fg), rng)) {
    picked.push_back(bg[i]);
  }

  std::vector<int> pool_rows;
  pool_rows.reserve(negative_pool.size());
  for (const auto & k : negative_pool.keys()) {
    if (!index_space.contains(k)) {
      throw ConfigError("negative pool category '" + k + "' has no embedding row");
    }
    pool_rows.push_back(static_cast<int>(index_space.index_of(k)));
  }

  std::vector<RoiExample> out;
  out.reserve(picked.size());
  for (std::size_t n = 0; n < picked.size(); ++n) {
    const std::size_t i = picked[n];
    RoiExample ex;
    ex.pooled = pool_feature(image, boxes[i]);
    int positive = -1;
    if (n < n_fg) {
      const auto & cat = visible[static_cast<std::size_t>(targets[i].truth_index)].category;
      if (!index_space.contains(cat)) {
        throw ConfigError("annotation category '" + cat + "' is unknown to the classification heads");
      }
      positive = static_cast<int>(index_space.index_of(cat));
      ex.categories.push_back(positive);
      ex.labels.push_back(1.0);
    }
    std::vector<int> candidates;
    for (int r : pool_rows) {
      if (r != positive) {
        candidates.push_back(r);
      }
    }
    const auto neg = sample_indices(candidates.size(),
                                    static_cast<std::size_t>(cfg.neg_categories_per_roi), rng);
    for (auto k : neg) {
      ex.categories.push_back(candidates[k]);
      ex.labels.push_back(0.0);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

ProposalNetParams initial_proposal_params(const std::vector<const DetDataset *> & datasets,
                                          const AnchorGrid & anchors)
{
  constexpr std::size_t kStatImages = 40;
  const auto grid = anchors.generate();
  ProposalNetParams params = ProposalNetParams::zeros(anchors.scales.size());

  Descriptor sum = Descriptor::Zero();
  Descriptor sq = Descriptor::Zero();
  std::size_t n = 0, used = 0;
  for (const auto * ds : datasets) {
    for (const auto & img : ds->images) {
      if (used++ >= kStatImages) {
        break;
      }
      const FeatureMaps maps(img);
      for (const auto & a : grid) {
        const Descriptor d = box_descriptor(maps, a.box);
        sum += d;
        sq += d.cwiseProduct(d);
        ++n;
      }
    }
  }
  if (n == 0) {
    return params;
  }
  params.feature_mean = sum / static_cast<double>(n);
  for (int k = 0; k < kDescriptorSize; ++k) {
    const double var = sq[k] / static_cast<double>(n) - params.feature_mean[k] * params.feature_mean[k];
    params.feature_scale[k] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return params;
}

ProposalNetParams train_proposal_stage(const std::vector<const DetDataset *> & datasets,
                                       const TrainConfig & cfg, const AnchorGrid & anchors,
                                       std::vector<EpochLog> * history)
{
  cfg.validate();
  check_datasets(datasets);
  ProposalNetParams params = initial_proposal_params(datasets, anchors);
  const auto grid = anchors.generate();
  Rng rng = make_rng(cfg.seed, kStreamProposalTrain);
  auto refs = all_images(datasets);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(refs.begin(), refs.end(), rng);
    EpochLog log{"proposal", epoch};
    LossCounts counts;
    for (std::size_t start = 0; start < refs.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(refs.size(), start + static_cast<std::size_t>(cfg.batch_size));
      ProposalGrad g(anchors.scales.size(), nullptr);
      for (std::size_t b = start; b < stop; ++b) {
        const auto & ds = *datasets[refs[b].dataset];
        const auto & img = ds.images[refs[b].image];
        const FeatureMaps maps(img);
        proposal_image_step(img, maps, ds.visible[refs[b].image], grid, params, nullptr, cfg, rng, g);
      }
      apply_proposal_grad(params, g, cfg.proposal_learning_rate);
      log_proposal(log, g);
      counts.add(g);
    }
    counts.finish(log);
    if (history != nullptr) {
      history->push_back(log);
    }
  }
  return params;
}

RoIClassifierParams train_roi_stage(const std::vector<const DetDataset *> & datasets,
                                    const std::vector<std::vector<std::vector<Box>>> & proposals_per_image,
                                    const TrainConfig & cfg, const EmbeddingTable & table,
                                    const std::map<std::string, LabelSpace> & heads,
                                    std::vector<EpochLog> * history)
{
  cfg.validate();
  check_datasets(datasets);
  if (proposals_per_image.size() != datasets.size()) {
    throw std::invalid_argument("train_roi_stage: proposals must be given per dataset");
  }
  const LabelSpace index_space = index_space_of(heads);
  const Eigen::MatrixXd emb = embedding_matrix(index_space, table);
  const int feat_dim = datasets.front()->images.empty() ? table.dim()
                                                        : datasets.front()->images.front().dim;
  RoIClassifierParams params = initial_roi_params(cfg, table.dim(), feat_dim);

  for (const auto * ds : datasets) {
    pool_for(heads, *ds);
  }

  Rng rng = make_rng(cfg.seed, kStreamRoiTrain);
  auto refs = all_images(datasets);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(refs.begin(), refs.end(), rng);
    EpochLog log{"roi", epoch};
    LossCounts counts;
    for (std::size_t start = 0; start < refs.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(refs.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<RoiExample> batch;
      for (std::size_t b = start; b < stop; ++b) {
        const auto & ds = *datasets[refs[b].dataset];
        auto ex = make_roi_examples(ds.images[refs[b].image],
                                    proposals_per_image[refs[b].dataset][refs[b].image],
                                    ds.visible[refs[b].image], pool_for(heads, ds), index_space,
                                    cfg, rng);
        std::move(ex.begin(), ex.end(), std::back_inserter(batch));
      }
      const RoiLoss loss = roi_sigmoid_loss(batch, params, emb);
      params.projection -= cfg.learning_rate * loss.grad_projection;
      log.roi += loss.loss * static_cast<double>(batch.size());
      counts.roi += static_cast<int>(batch.size());
    }
    counts.finish(log);
    if (history != nullptr) {
      history->push_back(log);
    }
  }
  return params;
}

std::map<std::string, LabelSpace> structure_heads(const std::vector<const DetDataset *> & datasets,
                                                  Structure structure)
{
  std::map<std::string, LabelSpace> heads;
  if (structure == Structure::unified) {
    std::vector<LabelSpace> spaces;
    for (const auto * ds : datasets) {
      spaces.push_back(ds->label_space);
    }
    const LabelSpace uni = union_spaces(spaces);
    for (const auto * ds : datasets) {
      heads[ds->name] = uni;
    }
  } else {
    for (const auto * ds : datasets) {
      heads[ds->name] = ds->label_space;
    }
  }
  return heads;
}

TrainedSystem train_decoupled(const std::vector<const DetDataset *> & datasets,
                              const TrainConfig & cfg, const EmbeddingTable & table,
                              const std::map<std::string, LabelSpace> & heads)
{
  cfg.validate();
  check_datasets(datasets);
  TrainedSystem sys;
  sys.structure = cfg.structure;
  sys.heads = heads;
  sys.anchors = anchors_for(datasets);
  sys.provenance = cfg;
  sys.shared_backbone = false;
  sys.proposal = train_proposal_stage(datasets, cfg, sys.anchors, &sys.history);

  // Freeze the proposal stage and precompute the RoI stage's inputs.
  const auto grid = sys.anchors.generate();
  ProposeOptions opts;
  opts.top_k = cfg.proposals_per_image;
  opts.alpha = cfg.alpha;
  std::vector<std::vector<std::vector<Box>>> boxes(datasets.size());
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    for (const auto & img : datasets[d]->images) {
      const FeatureMaps maps(img);
      std::vector<Box> b;
      for (const auto & p : propose(img, maps, sys.proposal, grid, opts)) {
        b.push_back(p.box);
      }
      boxes[d].push_back(std::move(b));
    }
  }
  sys.roi = train_roi_stage(datasets, boxes, cfg, table, heads, &sys.history);
  return sys;
}

TrainedSystem train_joint(const std::vector<const DetDataset *> & datasets, const TrainConfig & cfg,
                          const EmbeddingTable & table,
                          const std::map<std::string, LabelSpace> & heads)
{
  cfg.validate();
  check_datasets(datasets);
  TrainedSystem sys;
  sys.structure = cfg.structure;
  sys.heads = heads;
  sys.anchors = anchors_for(datasets);
  sys.provenance = cfg;
  sys.shared_backbone = true;

  const LabelSpace index_space = index_space_of(heads);
  const Eigen::MatrixXd emb = embedding_matrix(index_space, table);
  for (const auto * ds : datasets) {
    pool_for(heads, *ds);
  }
  sys.proposal = initial_proposal_params(datasets, sys.anchors);
  sys.roi = initial_roi_params(cfg, table.dim(), datasets.front()->images.front().dim);

  const auto grid = sys.anchors.generate();
  Rng rng = make_rng(cfg.seed, kStreamJoint);
  auto refs = all_images(datasets);
  ProposeOptions opts;
  opts.top_k = cfg.proposals_per_image;
  opts.alpha = cfg.alpha;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(refs.begin(), refs.end(), rng);
    EpochLog log{"joint", epoch};
    LossCounts counts;
    for (std::size_t start = 0; start < refs.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(refs.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const Eigen::MatrixXd & proj = sys.roi.projection;
      opts.shared_projection = &proj;
      ProposalGrad g(sys.anchors.scales.size(), &proj);
      std::vector<RoiExample> batch;
      for (std::size_t b = start; b < stop; ++b) {
        const auto & ds = *datasets[refs[b].dataset];
        const auto & img = ds.images[refs[b].image];
        const auto & vis = ds.visible[refs[b].image];
        const FeatureMaps maps(img);
        proposal_image_step(img, maps, vis, grid, sys.proposal, &proj, cfg, rng, g);
        std::vector<Box> current;
        for (const auto & p : propose(img, maps, sys.proposal, grid, opts)) {
          current.push_back(p.box);
        }
        auto ex = make_roi_examples(img, current, vis, pool_for(heads, ds), index_space, cfg, rng);
        std::move(ex.begin(), ex.end(), std::back_inserter(batch));
      }
      const RoiLoss loss = roi_sigmoid_loss(batch, sys.roi, emb);
      const Eigen::MatrixXd proposal_proj_grad =
        apply_proposal_grad(sys.proposal, g, cfg.proposal_learning_rate);
      sys.roi.projection -= cfg.learning_rate * (loss.grad_projection + proposal_proj_grad);
      log_proposal(log, g);
      counts.add(g);
      log.roi += loss.loss * static_cast<double>(batch.size());
      counts.roi += static_cast<int>(batch.size());
    }
    counts.finish(log);
    sys.history.push_back(log);
  }
  return sys;
}

std::vector<TrainedSystem> build_structure(const std::vector<DetDataset> & datasets,
                                           const TrainConfig & cfg, const EmbeddingTable & table)
{
  cfg.validate();
  if (datasets.empty()) {
    throw std::invalid_argument("build_structure: no datasets");
  }
  auto train_one = [&](const std::vector<const DetDataset *> & group) {
    const auto heads = structure_heads(group, cfg.structure);
    return cfg.decouple ? train_decoupled(group, cfg, table, heads)
                        : train_joint(group, cfg, table, heads);
  };

  std::vector<TrainedSystem> systems;
  switch (cfg.structure) {
    case Structure::separate:
      for (const auto & ds : datasets) {
        auto sys = train_one({&ds});
        sys.name = ds.name;
        systems.push_back(std::move(sys));
      }
      break;
    case Structure::unified:
    case Structure::partitioned: {
      std::vector<const DetDataset *> group;
      for (const auto & ds : datasets) {
        group.push_back(&ds);
      }
      auto sys = train_one(group);
      sys.name = to_string(cfg.structure);
      systems.push_back(std::move(sys));
      break;
    }
  }
  return systems;
}

DetDataset append_pseudo_labels(const DetDataset & dataset,
                                const std::vector<std::vector<ScoredDetection>> & detections,
                                double conf_thresh)
{
  if (detections.size() != dataset.images.size()) {
    throw std::invalid_argument("append_pseudo_labels: detections must be given per image");
  }
  DetDataset out = dataset;
  std::vector<std::string> keys = dataset.label_space.keys();
  for (std::size_t i = 0; i < detections.size(); ++i) {
    for (const auto & det : detections[i]) {
      if (det.score < conf_thresh || dataset.label_space.contains(det.category)) {
        continue;
      }
      out.visible[i].push_back(SceneObject{det.box, det.category});
      if (std::find(keys.begin(), keys.end(), det.category) == keys.end()) {
        keys.push_back(det.category);
      }
    }
  }
  out.label_space = LabelSpace(std::move(keys));
  return out;
}

}  // namespace uniworld
