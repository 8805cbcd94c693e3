#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "uniworld/detector.hpp"

using namespace uniworld;

namespace {

SyntheticImage blank(int size, int dim)
{
  SyntheticImage img;
  img.size = size;
  img.dim = dim;
  img.features.assign(static_cast<std::size_t>(size) * size * dim, 0.0f);
  return img;
}

SyntheticImage noise_image(int size, int dim, std::mt19937_64 & rng)
{
  std::normal_distribution<float> n(0.0f, 1.0f);
  auto img = blank(size, dim);
  for (auto & v : img.features) {
    v = n(rng);
  }
  return img;
}

double rel_err(double a, double b)
{
  if (a == b) {
    return 0.0;
  }
  return std::abs(a - b) / std::max(std::abs(a), std::abs(b));
}

double ref_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Box random_box(std::mt19937_64 & rng, int size)
{
  std::uniform_int_distribution<int> c(0, size);
  for (;;) {
    int x1 = c(rng), x2 = c(rng), y1 = c(rng), y2 = c(rng);
    if (x1 != x2 && y1 != y2) {
      return Box{double(std::min(x1, x2)), double(std::min(y1, y2)), double(std::max(x1, x2)),
                 double(std::max(y1, y2))};
    }
  }
}

ProposalNetParams random_params(std::mt19937_64 & rng, double scale)
{
  std::normal_distribution<double> n(0.0, scale);
  auto p = ProposalNetParams::zeros(3);
  for (auto & w : p.objectness) {
    for (int i = 0; i < w.size(); ++i) w[i] = n(rng);
  }
  for (auto & w : p.box_delta) {
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < w.cols(); ++c) w(r, c) = 0.1 * n(rng);
  }
  for (int i = 0; i < p.locquality.size(); ++i) {
    p.locquality[i] = n(rng);
    p.binarycls[i] = n(rng);
  }
  return p;
}

}  // namespace

TEST_CASE("pool_feature examples")
{
  auto img = blank(8, 3);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      img.cell(x, y)[0] = 2.0f;
      img.cell(x, y)[1] = -1.0f;
      img.cell(x, y)[2] = 0.5f;
    }
  }
  const auto c = pool_feature(img, Box{1, 2, 5, 7});
  CHECK(c[0] == 2.0);
  CHECK(c[1] == -1.0);
  CHECK(c[2] == 0.5);

  std::mt19937_64 rng(1);
  const auto r = noise_image(8, 2, rng);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(2);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int d = 0; d < 2; ++d) mean[d] += r.cell(x, y)[d];
  mean /= 64.0;
  CHECK((pool_feature(r, Box{0, 0, 8, 8}) - mean).norm() < 1e-12);

  auto q = blank(4, 1);
  q.cell(1, 1)[0] = 1.0f;
  q.cell(2, 1)[0] = 2.0f;
  q.cell(1, 2)[0] = 3.0f;
  q.cell(2, 2)[0] = 6.0f;
  CHECK(pool_feature(q, Box{1, 1, 3, 3})[0] == 3.0);
  // Centers at 1.5 and 2.5: a box from 1.2 to 2.8 holds the same four cells.
  CHECK(pool_feature(q, Box{1.2, 1.2, 2.8, 2.8})[0] == 3.0);
  CHECK_THROWS(pool_feature(q, Box{1.6, 1.6, 2.4, 2.4}));
  CHECK_THROWS(pool_feature(q, Box{2, 2, 1, 1}));
}

TEST_CASE("summed-area pooling matches direct pooling")
{
  std::mt19937_64 rng(2);
  const auto img = noise_image(16, 4, rng);
  const FeatureMaps maps(img);
  for (int t = 0; t < 300; ++t) {
    const Box b = random_box(rng, 16);
    const auto r = cell_range(b, 16);
    REQUIRE_FALSE(r.empty());
    REQUIRE((maps.mean_feature(r) - pool_feature(img, b)).norm() < 1e-9);
  }
}

TEST_CASE("cln_score examples and boundaries")
{
  CHECK(cln_score(1, 1, 1, 0.3) == 1.0);
  CHECK(cln_score(0, 0.7, 0.9, 0.3) == 0.0);
  CHECK(cln_score(0.8, 0.5, 0.5, 0.3) == std::pow(0.8, 0.3) * std::pow(0.25, 0.7));
  CHECK(cln_score(0.0, 0.4, 0.5, 0.0) == 0.4 * 0.5);
  CHECK(cln_score(0.6, 0.0, 0.0, 1.0) == 0.6);
}

TEST_CASE("cln_score matches a scalar oracle on 1000 inputs")
{
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double c = u(rng), r1 = u(rng), r2 = u(rng), a = u(rng);
    const double ref = std::exp(a * std::log(c) + (1.0 - a) * (std::log(r1) + std::log(r2)));
    worst = std::max(worst, rel_err(cln_score(c, r1, r2, a), ref));
    if (a > 0.0) CHECK(cln_score(0.0, r1, r2, a) == 0.0);
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("cln_score properties")
{
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double c = u(rng), r1 = u(rng), r2 = u(rng), a = 0.01 + 0.98 * u(rng);
    const double bump = u(rng) * (1.0 - std::max({c, r1, r2}));
    const double v = cln_score(c, r1, r2, a);
    REQUIRE(cln_score(c + bump, r1, r2, a) >= v);
    REQUIRE(cln_score(c, r1 + bump, r2, a) >= v);
    REQUIRE(cln_score(c, r1, r2 + bump, a) >= v);
    REQUIRE(cln_score(c, r2, r1, a) == doctest::Approx(v).epsilon(1e-14));
    // Scaling s_c and s_r1 * s_r2 by a common factor scales eta by it.
    const double k = 0.1 + 0.9 * u(rng);
    REQUIRE(cln_score(k * c, k * r1, r2, a) == doctest::Approx(k * v).epsilon(1e-12));
  }
}

TEST_CASE("classify_region examples")
{
  Eigen::MatrixXd emb(2, 2);
  emb << 1, 0, 0, 1;
  RoIClassifierParams p;
  p.projection = Eigen::MatrixXd::Identity(2, 2);
  p.tau = 0.01;
  const auto pr = classify_region(Eigen::Vector2d(0, 1), p, emb);
  CHECK(pr[0] == 0.5);
  CHECK(pr[1] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(pr[1] < 1.0);
  p.tau = 1e12;
  const auto flat = classify_region(Eigen::Vector2d(0.3, -0.8), p, emb);
  CHECK(flat[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(flat[1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK_THROWS(classify_region(Eigen::Vector3d(1, 0, 0), p, emb));
  p.tau = 0.0;
  CHECK_THROWS(classify_region(Eigen::Vector2d(1, 0), p, emb));
}

TEST_CASE("classify_region matches a scalar oracle on 1000 inputs")
{
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.05, 2.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const int d = 4, e = 3, l = 5;
    RoIClassifierParams p;
    p.projection = Eigen::MatrixXd(e, d);
    for (int r = 0; r < e; ++r)
      for (int c = 0; c < d; ++c) p.projection(r, c) = 0.1 * n(rng);
    p.tau = u(rng) * 0.05;
    Eigen::MatrixXd emb(l, e);
    for (int r = 0; r < l; ++r) {
      for (int c = 0; c < e; ++c) emb(r, c) = n(rng);
      emb.row(r).normalize();
    }
    Eigen::VectorXd f(d);
    for (int c = 0; c < d; ++c) f[c] = n(rng);
    const auto got = classify_region(f, p, emb);
    for (int j = 0; j < l; ++j) {
      double z = 0.0;
      for (int r = 0; r < e; ++r) {
        double zr = 0.0;
        for (int c = 0; c < d; ++c) zr += p.projection(r, c) * f[c];
        z += zr * emb(j, r);
      }
      worst = std::max(worst, rel_err(got[j], ref_sigmoid(z / p.tau)));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("classify_region is permutation equivariant")
{
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    RoIClassifierParams p;
    p.projection = Eigen::MatrixXd::Identity(4, 4) * 0.05;
    Eigen::MatrixXd emb(6, 4);
    for (int r = 0; r < 6; ++r) {
      for (int c = 0; c < 4; ++c) emb(r, c) = n(rng);
      emb.row(r).normalize();
    }
    Eigen::VectorXd f(4);
    for (int c = 0; c < 4; ++c) f[c] = n(rng);
    std::vector<int> perm{0, 1, 2, 3, 4, 5};
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd permuted(6, 4);
    for (int r = 0; r < 6; ++r) permuted.row(r) = emb.row(perm[static_cast<std::size_t>(r)]);
    const auto a = classify_region(f, p, emb);
    const auto b = classify_region(f, p, permuted);
    Eigen::Index ia = 0, ib = 0;
    a.maxCoeff(&ia);
    b.maxCoeff(&ib);
    for (int r = 0; r < 6; ++r) {
      REQUIRE(b[r] == a[perm[static_cast<std::size_t>(r)]]);
    }
    REQUIRE(perm[static_cast<std::size_t>(ib)] == ia);
  }
}

TEST_CASE("anchor grid covers three scales at stride 2")
{
  const AnchorGrid g;
  const auto anchors = g.generate();
  CHECK(anchors.size() == 3 * 16 * 16);
  for (const auto & a : anchors) {
    REQUIRE(a.box.valid());
    REQUIRE(a.box.x1 >= 0.0);
    REQUIRE(a.box.x2 <= 32.0);
  }
  CHECK(anchors.front().box == Box{0, 0, 3, 3});
}

TEST_CASE("box deltas invert apply_deltas")
{
  std::mt19937_64 rng(7);
  for (int t = 0; t < 300; ++t) {
    const Box a = random_box(rng, 32);
    Box target = a;
    target.x1 += 0.25 * a.width() * 0.5;
    target.y2 -= 0.25 * a.height() * 0.5;
    const Box back = apply_deltas(a, box_deltas(a, target), 32);
    if (!cell_range(target, 32).empty()) {
      REQUIRE(iou(back, target) == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  // Deltas are clamped and the result stays inside the image.
  const Box big = apply_deltas(Box{0, 0, 8, 8}, Eigen::Vector4d(5, 5, 5, 5), 32);
  CHECK(big.valid());
  CHECK(big.x2 <= 32.0);
}

TEST_CASE("descriptor energy through the identity projection equals the raw energy")
{
  std::mt19937_64 rng(8);
  const auto img = noise_image(16, 4, rng);
  const FeatureMaps maps(img);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(4, 4) * 0.3;
  for (int t = 0; t < 200; ++t) {
    const Box b = random_box(rng, 16);
    const auto plain = box_descriptor(maps, b);
    auto proj = box_descriptor(maps, b, &eye);
    REQUIRE(plain.allFinite());
    REQUIRE(proj[kSemanticEnergyIndex] == doctest::Approx(plain[kSemanticEnergyIndex]).epsilon(1e-10));
    proj[kSemanticEnergyIndex] = plain[kSemanticEnergyIndex];
    REQUIRE(proj == plain);
  }
}

TEST_CASE("propose with zero weights returns unrefined anchors at eta 0.5^1.7")
{
  std::mt19937_64 rng(9);
  auto img = noise_image(32, 16, rng);
  const auto params = ProposalNetParams::zeros(3);
  ProposeOptions o;
  o.top_k = 50;
  const auto a = propose(img, params, AnchorGrid{}, o);
  const auto b = propose(img, params, AnchorGrid{}, o);
  REQUIRE(!a.empty());
  REQUIRE(a.size() <= 50);
  const double eta = std::pow(0.5, 0.3) * std::pow(0.25, 0.7);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].s_r1 == 0.5);
    CHECK(a[i].s_r2 == 0.5);
    CHECK(a[i].s_c == 0.5);
    CHECK(a[i].eta == doctest::Approx(eta).epsilon(1e-15));
    CHECK(a[i].box == a[i].anchor);
    CHECK(b[i].box == a[i].box);
  }
  // Ties keep the anchor order: the first anchor leads.
  CHECK(a[0].anchor == AnchorGrid{}.generate().front().box);
}

TEST_CASE("propose contract on random parameters")
{
  std::mt19937_64 rng(10);
  const AnchorGrid grid;
  const auto anchors = grid.generate();
  std::uniform_int_distribution<int> k(1, 40);
  for (int t = 0; t < 200; ++t) {
    const auto img = noise_image(32, 16, rng);
    const FeatureMaps maps(img);
    const auto params = random_params(rng, 1.0);
    ProposeOptions o;
    o.top_k = k(rng);
    const auto props = propose(img, maps, params, anchors, o);
    REQUIRE(!props.empty());
    REQUIRE(props.size() <= static_cast<std::size_t>(o.top_k));
    for (std::size_t i = 0; i < props.size(); ++i) {
      const auto & p = props[i];
      REQUIRE(p.box.valid());
      REQUIRE(p.box.x1 >= 0.0);
      REQUIRE(p.box.y1 >= 0.0);
      REQUIRE(p.box.x2 <= 32.0);
      REQUIRE(p.box.y2 <= 32.0);
      REQUIRE(p.eta == doctest::Approx(cln_score(p.s_c, p.s_r1, p.s_r2, o.alpha)).epsilon(1e-14));
      REQUIRE(p.pooled_feature.size() == 16);
      if (i > 0) {
        REQUIRE(props[i - 1].eta >= p.eta);
      }
      for (std::size_t j = 0; j < i; ++j) {
        REQUIRE(iou(props[j].box, p.box) <= o.nms_iou);
      }
    }
    if (t % 20 == 0) {
      o.top_k = 1;
      const auto one = propose(img, maps, params, anchors, o);
      REQUIRE(one.size() == 1);
      // Recompute the eta-argmax over the 4 best anchors by objectness.
      std::vector<std::pair<double, std::size_t>> r1;
      for (std::size_t i = 0; i < anchors.size(); ++i) {
        const auto f = params.standardize(box_descriptor(maps, anchors[i].box));
        r1.emplace_back(1.0 / (1.0 + std::exp(-params.objectness[anchors[i].scale_index].dot(f))), i);
      }
      std::stable_sort(r1.begin(), r1.end(), [](auto & l, auto & r) { return l.first > r.first; });
      double best = -1.0;
      Box best_box;
      for (std::size_t n = 0; n < 4; ++n) {
        const auto & a = anchors[r1[n].second];
        const auto f = params.standardize(box_descriptor(maps, a.box));
        const Box b = apply_deltas(a.box, params.box_delta[a.scale_index] * f, 32);
        const auto g = params.standardize(box_descriptor(maps, b));
        const double eta = cln_score(ref_sigmoid(params.binarycls.dot(g)), r1[n].first,
                                     ref_sigmoid(params.locquality.dot(g)), o.alpha);
        if (eta > best) {
          best = eta;
          best_box = b;
        }
      }
      REQUIRE(one[0].eta == doctest::Approx(best).epsilon(1e-12));
      REQUIRE(one[0].box == best_box);
    }
  }
}

TEST_CASE("eta modes")
{
  std::mt19937_64 rng(11);
  const auto img = noise_image(32, 16, rng);
  const auto params = random_params(rng, 1.0);
  ProposeOptions o;
  o.eta_mode = EtaMode::objectness;
  for (const auto & p : propose(img, params, AnchorGrid{}, o)) {
    REQUIRE(p.eta == p.s_r1);
  }
  o.eta_mode = EtaMode::localization;
  for (const auto & p : propose(img, params, AnchorGrid{}, o)) {
    REQUIRE(p.eta == p.s_r1 * p.s_r2);
  }
  CHECK(eta_mode_from_string(to_string(EtaMode::localization)) == EtaMode::localization);
  CHECK_THROWS(eta_mode_from_string("oln"));
}

TEST_CASE("parameter json round trips")
{
  std::mt19937_64 rng(12);
  auto p = random_params(rng, 1.0);
  p.feature_mean[3] = 0.25;
  CHECK(proposal_params_from_json(to_json(p)) == p);
  Rng r = make_rng(1, 2);
  const auto roi = RoIClassifierParams::aligned(16, 16, 0.01, r);
  CHECK(roi_params_from_json(to_json(roi)) == roi);
  AnchorGrid g;
  g.stride = 4;
  CHECK(anchor_grid_from_json(to_json(g)).stride == 4);
}

TEST_CASE("aligned init is scaled identity plus noise")
{
  Rng r = make_rng(3, 4);
  const auto p = RoIClassifierParams::aligned(16, 16, 0.01, r, 0.05, 0.0);
  CHECK(p.projection == Eigen::MatrixXd::Identity(16, 16) * 0.05);
  Rng r2 = make_rng(3, 4);
  const auto q = RoIClassifierParams::random(16, 16, 0.01, r2);
  CHECK(q.projection.allFinite());
  CHECK((q.projection - Eigen::MatrixXd::Identity(16, 16) * 0.05).norm() > 0.01);
}
