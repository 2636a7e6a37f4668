#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cdvito/detection_heads.hpp"
#include "oracles.hpp"

using namespace cdvito;

namespace {

Matrix rows_of(const std::vector<std::vector<double>>& rows) {
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  return m;
}

std::vector<double> unit(std::size_t d, std::size_t i) {
  std::vector<double> v(d, 0.0);
  v[i] = 1.0;
  return v;
}

std::vector<double> random_vec(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  return v;
}

HeadParams head(std::size_t dim, std::size_t n, double temperature = 0.1) {
  return HeadParams::init(dim, n, 1, temperature);
}

QueryRegion region(std::vector<double> f, std::size_t cls) {
  return QueryRegion{std::move(f), std::nullopt, cls, std::nullopt, "img"};
}

double ce(const std::vector<QueryRegion>& regions, const PrototypeSet& s, const HeadParams& h) {
  Tape tape;
  const PrototypeVars pv = prototype_constants(tape, s);
  return classification_loss(regions, pv, HeadVars::on(tape, h, false)).item();
}

// Brute-force re-evaluation of the masked cosine head cross-entropy.
double oracle_ce(const std::vector<QueryRegion>& regions, const PrototypeSet& s, const HeadParams& h) {
  const std::size_t n = s.n_way();
  double total = 0.0;
  for (const QueryRegion& r : regions) {
    std::vector<double> logits(n + 1);
    for (std::size_t c = 0; c < n; ++c)
      logits[c] = oracle::cosine(r.roi_feature, oracle::row(s.object_prototypes, c)) / h.cls_temperature;
    double bg = -INFINITY;
    for (std::size_t b = 0; b < s.n_bg(); ++b)
      bg = std::max(bg, oracle::cosine(r.roi_feature, oracle::row(s.background_prototypes, b)));
    logits[n] = (bg + h.bg_bias(0, 0)) / h.cls_temperature;
    const std::size_t label = r.is_background() ? n : *r.gt_class;
    // Keep the top_k classes by similarity plus the label and background.
    std::vector<char> keep(n + 1, 0);
    for (std::size_t c = 0; c < n; ++c) {
      std::size_t better = 0;
      for (std::size_t o = 0; o < n; ++o)
        better += logits[o] > logits[c] || (logits[o] == logits[c] && o < c);
      keep[c] = better < h.top_k;
    }
    keep[n] = s.n_bg() > 0;
    keep[label] = 1;
    total += oracle::cross_entropy(logits, label, keep);
  }
  return total / static_cast<double>(regions.size());
}

}  // namespace

TEST(ClassifyRegion, MatchingPrototypeWins) {
  const PrototypeSet s{rows_of({unit(4, 0), unit(4, 1), unit(4, 2)}), Matrix(0, 4), {}};
  const std::vector<double> p = classify_region(region(unit(4, 2), 2), s, head(4, 3));
  EXPECT_EQ(argmax(p), 2u);
  EXPECT_EQ(p[3], 0.0);
}

TEST(ClassifyRegion, BackgroundPrototypeWins) {
  const PrototypeSet s{rows_of({unit(4, 0), unit(4, 1)}), rows_of({unit(4, 3), unit(4, 2)}), {}};
  const std::vector<double> p = classify_region(region(unit(4, 3), kBackgroundLabel), s, head(4, 2));
  EXPECT_EQ(argmax(p), 2u);
}

TEST(ClassifyRegion, TopKFollowsClassCount) {
  EXPECT_EQ(HeadParams::init(4, 3, 0).top_k, 3u);
  EXPECT_EQ(HeadParams::init(4, 5, 0).top_k, 5u);
  EXPECT_EQ(HeadParams::init(4, 20, 0).top_k, 5u);
  EXPECT_EQ(default_top_k(1), 1u);
}

TEST(ClassifyRegion, MasksAllButTopK) {
  Rng rng(2);
  std::vector<std::vector<double>> protos;
  for (int i = 0; i < 8; ++i) protos.push_back(random_vec(rng, 6));
  const PrototypeSet s{rows_of(protos), rows_of({random_vec(rng, 6)}), {}};
  HeadParams h = head(6, 8);
  const std::vector<double> p = classify_region(region(random_vec(rng, 6), 0), s, h);
  EXPECT_EQ(std::count_if(p.begin(), p.begin() + 8, [](double v) { return v > 0.0; }), 5);
  EXPECT_GT(p[8], 0.0);
}

TEST(ClassifyRegion, ScoresAreDistributions) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(9), nb = rng.below(4), d = 3 + rng.below(5);
    std::vector<std::vector<double>> protos, bgs;
    for (std::size_t i = 0; i < n; ++i) protos.push_back(random_vec(rng, d));
    for (std::size_t i = 0; i < nb; ++i) bgs.push_back(random_vec(rng, d));
    const PrototypeSet s{rows_of(protos), nb ? rows_of(bgs) : Matrix(0, d), {}};
    const std::vector<double> p = classify_region(region(random_vec(rng, d), 0), s, head(d, n, rng.uniform(0.05, 1.0)));
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
  }
}

TEST(ClassifyRegion, ArgmaxIgnoresTemperature) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> protos;
    for (int i = 0; i < 6; ++i) protos.push_back(random_vec(rng, 5));
    const PrototypeSet s{rows_of(protos), rows_of({random_vec(rng, 5), random_vec(rng, 5)}), {}};
    const QueryRegion q = region(random_vec(rng, 5), 0);
    const std::size_t ref = argmax(classify_region(q, s, head(5, 6, 0.1)));
    for (double t : {0.01, 0.05, 0.5, 2.0}) EXPECT_EQ(argmax(classify_region(q, s, head(5, 6, t))), ref);
  }
}

TEST(ClassifyRegion, FullTopKIsUnmasked) {
  Rng rng(5);
  std::vector<std::vector<double>> protos;
  for (int i = 0; i < 4; ++i) protos.push_back(random_vec(rng, 5));
  const std::vector<double> bg = random_vec(rng, 5);
  const PrototypeSet s{rows_of(protos), rows_of({bg}), {}};
  const QueryRegion q = region(random_vec(rng, 5), 0);
  const std::vector<double> p = classify_region(q, s, head(5, 4));
  std::vector<double> z;
  for (const auto& pr : protos) z.push_back(oracle::cosine(q.roi_feature, pr) / 0.1);
  z.push_back(oracle::cosine(q.roi_feature, bg) / 0.1);
  double norm = 0.0;
  for (double v : z) norm += std::exp(v);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(p[i], std::exp(z[i]) / norm, 1e-12);
}

TEST(ClassifyRegion, EmptyPrototypeSetIsContractError) {
  const PrototypeSet s{Matrix(0, 3), Matrix(0, 3), {}};
  EXPECT_THROW(classify_region(region(unit(3, 0), 0), s, head(3, 1)), ContractError);
}

TEST(ClassificationLoss, SharpMatchedRegionsApproachZero) {
  const PrototypeSet s{rows_of({unit(4, 0), unit(4, 1), unit(4, 2)}), rows_of({unit(4, 3)}), {}};
  const std::vector<QueryRegion> rs{region(unit(4, 0), 0), region(unit(4, 1), 1), region(unit(4, 2), 2),
                                    region(unit(4, 3), kBackgroundLabel)};
  EXPECT_LT(ce(rs, s, head(4, 3, 0.01)), 1e-3);
}

TEST(ClassificationLoss, IdenticalPrototypesGiveLogC) {
  const std::vector<double> v{0.3, -0.5, 0.8};
  const PrototypeSet s{rows_of({v, v, v, v}), Matrix(0, 3), {}};
  const std::vector<QueryRegion> rs{region({1.0, 2.0, 0.0}, 1), region({-1.0, 0.0, 0.5}, 3)};
  EXPECT_NEAR(ce(rs, s, head(3, 4)), std::log(4.0), 1e-12);
}

TEST(ClassificationLoss, MatchesBruteForceOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.below(8), nb = rng.below(4), d = 3 + rng.below(5);
    std::vector<std::vector<double>> protos, bgs;
    for (std::size_t i = 0; i < n; ++i) protos.push_back(random_vec(rng, d));
    for (std::size_t i = 0; i < nb; ++i) bgs.push_back(random_vec(rng, d));
    PrototypeSet s{rows_of(protos), nb ? rows_of(bgs) : Matrix(0, d), {}};
    for (std::size_t r = 0; r < s.object_prototypes.rows(); ++r) {
      const double len = std::sqrt(oracle::dot(oracle::row(s.object_prototypes, r), oracle::row(s.object_prototypes, r)));
      for (double& x : s.object_prototypes.row(r)) x /= len;
    }
    for (std::size_t r = 0; r < s.background_prototypes.rows(); ++r) {
      const double len =
          std::sqrt(oracle::dot(oracle::row(s.background_prototypes, r), oracle::row(s.background_prototypes, r)));
      for (double& x : s.background_prototypes.row(r)) x /= len;
    }
    HeadParams h = head(d, n, rng.uniform(0.05, 0.5));
    h.bg_bias(0, 0) = rng.uniform(-0.3, 0.3);
    std::vector<QueryRegion> rs;
    for (int i = 0; i < 6; ++i) {
      const bool bg = nb > 0 && rng.below(3) == 0;
      rs.push_back(region(random_vec(rng, d), bg ? kBackgroundLabel : rng.below(n)));
    }
    EXPECT_NEAR(ce(rs, s, h), oracle_ce(rs, s, h), 1e-12);
  }
}

TEST(ClassificationLoss, MissingLabelIsContractError) {
  const PrototypeSet s{rows_of({unit(3, 0)}), Matrix(0, 3), {}};
  QueryRegion r = region(unit(3, 0), 0);
  r.gt_class.reset();
  EXPECT_THROW(ce({r}, s, head(3, 1)), ContractError);
  EXPECT_THROW(ce({region(unit(3, 0), kBackgroundLabel)}, s, head(3, 1)), ContractError);
}

TEST(ClassificationLoss, GradientToInstancesMatchesFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 6, k = 2, nb = 3, d = 5;
    Matrix inst(n * k + nb, d);
    for (double& v : inst.values()) v = rng.normal();
    std::vector<QueryRegion> rs;
    for (int i = 0; i < 10; ++i) rs.push_back(region(random_vec(rng, d), i % 4 == 3 ? kBackgroundLabel : rng.below(n)));
    HeadParams h = head(d, n);
    h.bg_bias(0, 0) = 0.05;
    const ad::LossFn fn = [&](Tape& tape, std::span<const Var> l) {
      const PrototypeVars pv = assemble_prototypes(mean_prototypes(l[0], n, k), l[0], n * k, nb);
      return classification_loss(rs, pv, HeadVars::on(tape, h, false));
    };
    EXPECT_LE(ad::grad_check(fn, {inst}, 1e-5), 1e-4);
  }
}

TEST(BoxDeltas, RoundTrip) {
  const Box from{10.0, 20.0, 50.0, 80.0}, to{12.0, 18.0, 70.0, 60.0};
  const Box back = apply_deltas(from, box_deltas(from, to));
  EXPECT_NEAR(back.x_min, to.x_min, 1e-12);
  EXPECT_NEAR(back.y_min, to.y_min, 1e-12);
  EXPECT_NEAR(back.x_max, to.x_max, 1e-12);
  EXPECT_NEAR(back.y_max, to.y_max, 1e-12);
  const auto d = box_deltas(from, from);
  for (double v : d) EXPECT_EQ(v, 0.0);
  // Centers 30,50 -> 41,39; sizes 40x60 -> 58x42.
  const auto e = box_deltas(from, to);
  EXPECT_NEAR(e[0], 11.0 / 40.0, 1e-15);
  EXPECT_NEAR(e[1], -11.0 / 60.0, 1e-15);
  EXPECT_NEAR(e[2], std::log(58.0 / 40.0), 1e-15);
  EXPECT_NEAR(e[3], std::log(42.0 / 60.0), 1e-15);
}

namespace {

double loc(const std::vector<QueryRegion>& rs, const HeadParams& h) {
  Tape tape;
  const PrototypeSet s{rows_of({unit(3, 0), unit(3, 1)}), Matrix(0, 3), {}};
  return localization_loss(rs, prototype_constants(tape, s), HeadVars::on(tape, h, false)).item();
}

QueryRegion boxed(const Box& proposal, const Box& gt, std::size_t cls) {
  return QueryRegion{{0.2, 0.4, -0.1}, proposal, cls, gt, "img"};
}

}  // namespace

TEST(LocalizationLoss, ZeroRegressorOnExactProposalIsZero) {
  HeadParams h = head(3, 2);
  h.box_w = Matrix(6, 4);
  const Box b{0.0, 0.0, 10.0, 20.0};
  EXPECT_EQ(loc({boxed(b, b, 0), boxed(b, b, 1)}, h), 0.0);
}

TEST(LocalizationLoss, PredictionEqualToTargetIsZero) {
  // Zero weights, bias set to the target deltas of the single region.
  const Box proposal{10.0, 20.0, 50.0, 80.0}, gt{12.0, 18.0, 70.0, 60.0};
  HeadParams h = head(3, 2);
  h.box_w = Matrix(6, 4);
  const auto t = box_deltas(proposal, gt);
  h.box_b = Matrix(1, 4, {t[0], t[1], t[2], t[3]});
  EXPECT_EQ(loc({boxed(proposal, gt, 1)}, h), 0.0);
}

TEST(LocalizationLoss, HandComputedSmoothL1) {
  HeadParams h = head(3, 2);
  h.box_w = Matrix(6, 4);
  h.box_b = Matrix(1, 4, {0.5, -2.0, 0.0, 0.1});
  const Box b{0.0, 0.0, 10.0, 10.0};
  // 0.125 + 1.5 + 0 + 0.005 over four coordinates.
  EXPECT_NEAR(loc({boxed(b, b, 0)}, h), 0.4075, 1e-15);
}

TEST(LocalizationLoss, DegenerateBoxIsContractError) {
  const Box ok{0.0, 0.0, 10.0, 10.0}, flat{0.0, 5.0, 10.0, 5.0};
  EXPECT_THROW(loc({boxed(ok, flat, 0)}, head(3, 2)), ContractError);
}

TEST(LocalizationLoss, RegionsWithoutBoxesAreSkipped) {
  EXPECT_EQ(loc({region({0.1, 0.2, 0.3}, 0)}, head(3, 2)), 0.0);
}

TEST(TotalLoss, UnweightedSum) {
  Tape tape;
  auto s = [&](double v) { return tape.constant(Matrix::scalar(v)); };
  EXPECT_EQ(total_loss(s(1.0), s(2.0), s(0.5)).item(), 3.5);
  EXPECT_EQ(total_loss(s(1.0), s(2.0)).item(), 3.0);
  EXPECT_EQ(total_loss(s(0.0), s(0.0), s(0.0)).item(), 0.0);
}
