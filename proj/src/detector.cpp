#include "uniworld/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "uniworld/errors.hpp"

namespace uniworld {

using nlohmann::json;

CellRange cell_range(const Box & box, int image_size)
{
  // Cell i has its center at i + 0.5; it is inside when x1 <= i + 0.5 < x2.
  CellRange r;
  r.x0 = std::max(0, static_cast<int>(std::ceil(box.x1 - 0.5)));
  r.y0 = std::max(0, static_cast<int>(std::ceil(box.y1 - 0.5)));
  r.x1 = std::min(image_size - 1, static_cast<int>(std::ceil(box.x2 - 0.5)) - 1);
  r.y1 = std::min(image_size - 1, static_cast<int>(std::ceil(box.y2 - 0.5)) - 1);
  return r;
}

Eigen::VectorXd pool_feature(const SyntheticImage & image, const Box & box)
{
  const CellRange r = cell_range(box, image.size);
  if (!box.valid() || r.empty()) {
    throw std::invalid_argument("pool_feature: box contains no cell center");
  }
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(image.dim);
  for (int y = r.y0; y <= r.y1; ++y) {
    for (int x = r.x0; x <= r.x1; ++x) {
      const float * c = image.cell(x, y);
      for (int d = 0; d < image.dim; ++d) {
        acc[d] += c[d];
      }
    }
  }
  return acc / static_cast<double>(r.cells());
}

FeatureMaps::FeatureMaps(const SyntheticImage & image) : size_(image.size), dim_(image.dim)
{
  const int s = size_;
  const std::size_t n = static_cast<std::size_t>(s + 1) * (s + 1);
  feat_.assign(n * dim_, 0.0);
  energy_.assign(n, 0.0);
  h_.assign(n, 0.0);
  v_.assign(n, 0.0);

  auto dot = [this](const float * a, const float * b) {
    double acc = 0.0;
    for (int d = 0; d < dim_; ++d) {
      acc += static_cast<double>(a[d]) * b[d];
    }
    return acc;
  };
  auto at = [s](int x, int y) { return static_cast<std::size_t>(y) * (s + 1) + x; };

  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const float * c = image.cell(x, y);
      const double e = dot(c, c);
      const double hv = x + 1 < s ? dot(c, image.cell(x + 1, y)) : 0.0;
      const double vv = y + 1 < s ? dot(c, image.cell(x, y + 1)) : 0.0;
      const std::size_t o = at(x + 1, y + 1);
      const std::size_t up = at(x + 1, y);
      const std::size_t left = at(x, y + 1);
      const std::size_t diag = at(x, y);
      energy_[o] = e + energy_[up] + energy_[left] - energy_[diag];
      h_[o] = hv + h_[up] + h_[left] - h_[diag];
      v_[o] = vv + v_[up] + v_[left] - v_[diag];
      for (int d = 0; d < dim_; ++d) {
        feat_[o * dim_ + d] = c[d] + feat_[up * dim_ + d] + feat_[left * dim_ + d] -
                              feat_[diag * dim_ + d];
      }
    }
  }
}

double FeatureMaps::rect(const std::vector<double> & table, int x0, int y0, int x1, int y1,
                         int stride, int offset) const
{
  const int w = size_ + 1;
  auto t = [&](int x, int y) {
    return table[(static_cast<std::size_t>(y) * w + x) * stride + offset];
  };
  return t(x1 + 1, y1 + 1) - t(x0, y1 + 1) - t(x1 + 1, y0) + t(x0, y0);
}

Eigen::VectorXd FeatureMaps::mean_feature(const CellRange & r) const
{
  Eigen::VectorXd out(dim_);
  if (r.empty()) {
    out.setZero();
    return out;
  }
  const double n = r.cells();
  for (int d = 0; d < dim_; ++d) {
    out[d] = rect(feat_, r.x0, r.y0, r.x1, r.y1, dim_, d) / n;
  }
  return out;
}

double FeatureMaps::mean_energy(const CellRange & r) const
{
  return r.empty() ? 0.0 : rect(energy_, r.x0, r.y0, r.x1, r.y1) / r.cells();
}

double FeatureMaps::mean_h(int x0, int y0, int x1, int y1) const
{
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, size_ - 2);
  y1 = std::min(y1, size_ - 1);
  if (x1 < x0 || y1 < y0) {
    return 0.0;
  }
  return rect(h_, x0, y0, x1, y1) / ((x1 - x0 + 1) * (y1 - y0 + 1));
}

double FeatureMaps::mean_v(int x0, int y0, int x1, int y1) const
{
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, size_ - 1);
  y1 = std::min(y1, size_ - 2);
  if (x1 < x0 || y1 < y0) {
    return 0.0;
  }
  return rect(v_, x0, y0, x1, y1) / ((x1 - x0 + 1) * (y1 - y0 + 1));
}

Descriptor box_descriptor(const FeatureMaps & maps, const Box & box,
                          const Eigen::MatrixXd * projection)
{
  Descriptor out = Descriptor::Zero();
  const CellRange r = cell_range(box, maps.size());
  if (r.empty()) {
    return out;
  }
  const int a = r.x0, b = r.x1, c = r.y0, e = r.y1;
  const int w = r.width(), h = r.height();
  const int last = maps.size() - 1;

  const int pairs_h = (w - 1) * h;
  const int pairs_v = w * (h - 1);
  if (pairs_h + pairs_v > 0) {
    out[0] = (maps.mean_h(a, c, b - 1, e) * pairs_h + maps.mean_v(a, c, b, e - 1) * pairs_v) /
             (pairs_h + pairs_v);
  }
  out[1] = maps.mean_energy(r);
  const Eigen::VectorXd mean = maps.mean_feature(r);
  if (projection != nullptr) {
    const double frob = projection->squaredNorm();
    out[kSemanticEnergyIndex] =
      frob > 0.0 ? maps.dim() * (*projection * mean).squaredNorm() / frob : 0.0;
  } else {
    out[kSemanticEnergyIndex] = mean.squaredNorm();
  }
  out[3] = std::log(static_cast<double>(r.cells())) /
           std::log(static_cast<double>(maps.size()) * maps.size());

  // Strips along the four sides: inside, across the edge, one and two cells outside.
  out[4] = maps.mean_v(a, c, a, e - 1);
  out[5] = maps.mean_v(b, c, b, e - 1);
  out[6] = maps.mean_h(a, c, b - 1, c);
  out[7] = maps.mean_h(a, e, b - 1, e);

  out[8] = a > 0 ? maps.mean_h(a - 1, c, a - 1, e) : 0.0;
  out[9] = b < last ? maps.mean_h(b, c, b, e) : 0.0;
  out[10] = c > 0 ? maps.mean_v(a, c - 1, b, c - 1) : 0.0;
  out[11] = e < last ? maps.mean_v(a, e, b, e) : 0.0;

  for (int k = 1; k <= 2; ++k) {
    const int base = 8 + 4 * k;
    out[base + 0] = a - k >= 0 ? maps.mean_v(a - k, c, a - k, e - 1) : 0.0;
    out[base + 1] = b + k <= last ? maps.mean_v(b + k, c, b + k, e - 1) : 0.0;
    out[base + 2] = c - k >= 0 ? maps.mean_h(a, c - k, b - 1, c - k) : 0.0;
    out[base + 3] = e + k <= last ? maps.mean_h(a, e + k, b - 1, e + k) : 0.0;
  }
  return out;
}

std::vector<AnchorGrid::Anchor> AnchorGrid::generate() const
{
  if (stride < 1 || scales.empty()) {
    throw std::invalid_argument("anchor grid needs stride >= 1 and at least one scale");
  }
  std::vector<Anchor> out;
  const double half_stride = 0.5 * stride;
  for (std::size_t s = 0; s < scales.size(); ++s) {
    const double half = 0.5 * scales[s];
    for (double cy = half_stride; cy < image_size; cy += stride) {
      for (double cx = half_stride; cx < image_size; cx += stride) {
        const Box b = clip_box(Box{cx - half, cy - half, cx + half, cy + half}, image_size);
        out.push_back(Anchor{b, static_cast<int>(s)});
      }
    }
  }
  return out;
}

ProposalNetParams ProposalNetParams::zeros(std::size_t n_scales)
{
  ProposalNetParams p;
  p.objectness.assign(n_scales, AugDescriptor::Zero());
  p.box_delta.assign(n_scales, Eigen::Matrix<double, 4, kDescriptorSize + 1>::Zero());
  return p;
}

AugDescriptor ProposalNetParams::standardize(const Descriptor & raw) const
{
  AugDescriptor out;
  out.head<kDescriptorSize>() = (raw - feature_mean).cwiseQuotient(feature_scale);
  out[kDescriptorSize] = 1.0;
  return out;
}

bool ProposalNetParams::all_finite() const
{
  bool ok = locquality.allFinite() && binarycls.allFinite() && feature_mean.allFinite() &&
            feature_scale.allFinite();
  for (const auto & w : objectness) {
    ok = ok && w.allFinite();
  }
  for (const auto & w : box_delta) {
    ok = ok && w.allFinite();
  }
  return ok;
}

bool ProposalNetParams::operator==(const ProposalNetParams & o) const
{
  return objectness == o.objectness && box_delta == o.box_delta && locquality == o.locquality &&
         binarycls == o.binarycls && feature_mean == o.feature_mean &&
         feature_scale == o.feature_scale;
}

RoIClassifierParams RoIClassifierParams::aligned(int embed_dim, int feat_dim, double tau,
                                                 Rng & rng, double scale, double noise)
{
  std::normal_distribution<double> normal(0.0, 1.0);
  RoIClassifierParams p;
  p.tau = tau;
  p.projection = Eigen::MatrixXd::Identity(embed_dim, feat_dim);
  for (int r = 0; r < embed_dim; ++r) {
    for (int c = 0; c < feat_dim; ++c) {
      p.projection(r, c) += noise * normal(rng);
    }
  }
  p.projection *= scale;
  return p;
}

RoIClassifierParams RoIClassifierParams::random(int embed_dim, int feat_dim, double tau, Rng & rng,
                                                double scale)
{
  std::normal_distribution<double> normal(0.0, 1.0);
  RoIClassifierParams p;
  p.tau = tau;
  p.projection.resize(embed_dim, feat_dim);
  const double entry = scale / std::sqrt(static_cast<double>(embed_dim));
  for (int r = 0; r < embed_dim; ++r) {
    for (int c = 0; c < feat_dim; ++c) {
      p.projection(r, c) = entry * normal(rng);
    }
  }
  return p;
}

std::string to_string(EtaMode mode)
{
  switch (mode) {
    case EtaMode::cln:
      return "cln";
    case EtaMode::localization:
      return "localization";
    case EtaMode::objectness:
      return "objectness";
  }
  return "cln";
}

EtaMode eta_mode_from_string(const std::string & s)
{
  if (s == "cln") {
    return EtaMode::cln;
  }
  if (s == "localization") {
    return EtaMode::localization;
  }
  if (s == "objectness") {
    return EtaMode::objectness;
  }
  throw ConfigError("unknown eta mode '" + s + "' (expected cln, localization or objectness)");
}

double cln_score(double s_c, double s_r1, double s_r2, double alpha)
{
  return std::pow(s_c, alpha) * std::pow(s_r1 * s_r2, 1.0 - alpha);
}

Box apply_deltas(const Box & anchor, const Eigen::Vector4d & deltas, int image_size)
{
  constexpr double kMaxLog = 1.3862943611198906;  // log(4)
  const double w = anchor.width();
  const double h = anchor.height();
  const double cx = anchor.center_x() + std::clamp(deltas[0], -1.0, 1.0) * w;
  const double cy = anchor.center_y() + std::clamp(deltas[1], -1.0, 1.0) * h;
  const double nw = w * std::exp(std::clamp(deltas[2], -kMaxLog, kMaxLog));
  const double nh = h * std::exp(std::clamp(deltas[3], -kMaxLog, kMaxLog));
  const Box refined =
    clip_box(Box{cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh}, image_size);
  if (!refined.valid() || cell_range(refined, image_size).empty()) {
    return clip_box(anchor, image_size);
  }
  return refined;
}

Eigen::Vector4d box_deltas(const Box & anchor, const Box & target)
{
  return Eigen::Vector4d((target.center_x() - anchor.center_x()) / anchor.width(),
                         (target.center_y() - anchor.center_y()) / anchor.height(),
                         std::log(target.width() / anchor.width()),
                         std::log(target.height() / anchor.height()));
}

namespace {

double eta_for(const Proposal & p, const ProposeOptions & opts)
{
  switch (opts.eta_mode) {
    case EtaMode::cln:
      return cln_score(p.s_c, p.s_r1, p.s_r2, opts.alpha);
    case EtaMode::localization:
      return p.s_r1 * p.s_r2;
    case EtaMode::objectness:
      return p.s_r1;
  }
  return 0.0;
}

}  // namespace

std::vector<Proposal> propose(const SyntheticImage & image, const ProposalNetParams & params,
                              const AnchorGrid & anchors, const ProposeOptions & opts)
{
  const FeatureMaps maps(image);
  return propose(image, maps, params, anchors.generate(), opts);
}

std::vector<Proposal> propose(const SyntheticImage & image, const FeatureMaps & maps,
                              const ProposalNetParams & params,
                              const std::vector<AnchorGrid::Anchor> & anchors,
                              const ProposeOptions & opts)
{
  if (opts.top_k < 1) {
    throw std::invalid_argument("propose: top_k must be >= 1");
  }
  const Eigen::MatrixXd * proj = opts.shared_projection;

  std::vector<double> r1(anchors.size());
  std::vector<AugDescriptor> feats(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto & a = anchors[i];
    feats[i] = params.standardize(box_descriptor(maps, a.box, proj));
    r1[i] = sigmoid(params.objectness[static_cast<std::size_t>(a.scale_index)].dot(feats[i]));
  }

  std::vector<std::size_t> order(anchors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&r1](std::size_t l, std::size_t r) { return r1[l] > r1[r]; });
  const std::size_t pre = std::min(order.size(), static_cast<std::size_t>(opts.top_k) * 4);

  std::vector<Proposal> cands;
  cands.reserve(pre);
  for (std::size_t n = 0; n < pre; ++n) {
    const std::size_t i = order[n];
    const auto & a = anchors[i];
    const Eigen::Vector4d deltas =
      params.box_delta[static_cast<std::size_t>(a.scale_index)] * feats[i];
    Proposal p;
    p.anchor = a.box;
    p.scale_index = a.scale_index;
    p.box = apply_deltas(a.box, deltas, image.size);
    p.s_r1 = r1[i];
    const AugDescriptor rf = params.standardize(box_descriptor(maps, p.box, proj));
    p.s_r2 = sigmoid(params.locquality.dot(rf));
    p.s_c = sigmoid(params.binarycls.dot(rf));
    p.eta = eta_for(p, opts);
    cands.push_back(std::move(p));
  }

  std::vector<std::size_t> by_eta(cands.size());
  std::iota(by_eta.begin(), by_eta.end(), std::size_t{0});
  std::stable_sort(by_eta.begin(), by_eta.end(),
                   [&cands](std::size_t l, std::size_t r) { return cands[l].eta > cands[r].eta; });

  std::vector<Proposal> kept;
  for (std::size_t idx : by_eta) {
    if (kept.size() >= static_cast<std::size_t>(opts.top_k)) {
      break;
    }
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Proposal & k) {
      return iou(k.box, cands[idx].box) > opts.nms_iou;
    });
    if (!suppressed) {
      kept.push_back(std::move(cands[idx]));
    }
  }
  for (auto & p : kept) {
    p.pooled_feature = pool_feature(image, p.box);
  }
  return kept;
}

Eigen::VectorXd region_logits(const Eigen::VectorXd & pooled, const RoIClassifierParams & params,
                              const Eigen::MatrixXd & emb)
{
  if (params.projection.cols() != pooled.size() || params.projection.rows() != emb.cols()) {
    throw std::invalid_argument("region_logits: dimension mismatch");
  }
  if (!(params.tau > 0.0)) {
    throw std::invalid_argument("region_logits: tau must be > 0");
  }
  const Eigen::VectorXd z = params.projection * pooled;
  return (emb * z) / params.tau;
}

double open_unit(double p)
{
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  return std::clamp(p, lo, hi);
}

Eigen::VectorXd classify_region(const Eigen::VectorXd & pooled, const RoIClassifierParams & params,
                                const Eigen::MatrixXd & emb)
{
  Eigen::VectorXd logits = region_logits(pooled, params, emb);
  for (Eigen::Index j = 0; j < logits.size(); ++j) {
    logits[j] = open_unit(sigmoid(logits[j]));
  }
  return logits;
}

namespace {

template <typename M>
json flat(const M & m)
{
  // Row-major flattening.
  json arr = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      arr.push_back(m(r, c));
    }
  }
  return arr;
}

template <typename M>
void unflat(const json & arr, M & m)
{
  if (!arr.is_array() || static_cast<Eigen::Index>(arr.size()) != m.rows() * m.cols()) {
    throw FormatError("checkpoint array has the wrong length");
  }
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = arr[k++].get<double>();
    }
  }
}

}  // namespace

json to_json(const ProposalNetParams & p)
{
  json obj = json::array();
  for (const auto & w : p.objectness) {
    obj.push_back(flat(w));
  }
  json deltas = json::array();
  for (const auto & w : p.box_delta) {
    deltas.push_back(flat(w));
  }
  return json{{"descriptor_size", kDescriptorSize},
              {"objectness", obj},
              {"box_delta", deltas},
              {"locquality", flat(p.locquality)},
              {"binarycls", flat(p.binarycls)},
              {"feature_mean", flat(p.feature_mean)},
              {"feature_scale", flat(p.feature_scale)}};
}

ProposalNetParams proposal_params_from_json(const json & j)
{
  try {
    if (j.at("descriptor_size").get<int>() != kDescriptorSize) {
      throw FormatError("checkpoint descriptor size does not match this build");
    }
    const auto & obj = j.at("objectness");
    const auto & deltas = j.at("box_delta");
    if (obj.size() != deltas.size()) {
      throw FormatError("checkpoint has mismatched per-scale heads");
    }
    ProposalNetParams p = ProposalNetParams::zeros(obj.size());
    for (std::size_t s = 0; s < obj.size(); ++s) {
      unflat(obj[s], p.objectness[s]);
      unflat(deltas[s], p.box_delta[s]);
    }
    unflat(j.at("locquality"), p.locquality);
    unflat(j.at("binarycls"), p.binarycls);
    unflat(j.at("feature_mean"), p.feature_mean);
    unflat(j.at("feature_scale"), p.feature_scale);
    return p;
  } catch (const json::exception & e) {
    throw FormatError(std::string("proposal checkpoint: ") + e.what());
  }
}

json to_json(const RoIClassifierParams & p)
{
  return json{{"rows", p.projection.rows()},
              {"cols", p.projection.cols()},
              {"projection", flat(p.projection)},
              {"tau", p.tau}};
}

RoIClassifierParams roi_params_from_json(const json & j)
{
  try {
    RoIClassifierParams p;
    p.projection.resize(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
    unflat(j.at("projection"), p.projection);
    p.tau = j.at("tau").get<double>();
    if (!(p.tau > 0.0)) {
      throw FormatError("roi checkpoint: tau must be > 0");
    }
    return p;
  } catch (const json::exception & e) {
    throw FormatError(std::string("roi checkpoint: ") + e.what());
  }
}

json to_json(const AnchorGrid & g)
{
  return json{{"scales", g.scales}, {"stride", g.stride}, {"image_size", g.image_size}};
}

AnchorGrid anchor_grid_from_json(const json & j)
{
  AnchorGrid g;
  g.scales = j.value("scales", g.scales);
  g.stride = j.value("stride", g.stride);
  g.image_size = j.value("image_size", g.image_size);
  return g;
}

}  // namespace uniworld
