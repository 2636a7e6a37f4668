#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "cdvito/synth.hpp"

using namespace cdvito;

namespace {

SynthConfig small() {
  SynthConfig c;
  c.dim = 12;
  c.per_class = 7;
  c.n_background = 20;
  c.seed = 9;
  return c;
}

}  // namespace

TEST(Synth, SameSeedSameBytes) {
  std::ostringstream a, b;
  write_feature_pack(a, make_synthetic_pack(small()));
  write_feature_pack(b, make_synthetic_pack(small()));
  EXPECT_EQ(a.str(), b.str());
  SynthConfig other = small();
  other.seed = 10;
  std::ostringstream c;
  write_feature_pack(c, make_synthetic_pack(other));
  EXPECT_NE(a.str(), c.str());
}

TEST(Synth, CountsAndLayout) {
  const FeaturePack p = make_synthetic_pack(small());
  EXPECT_NO_THROW(validate_pack(p));
  EXPECT_EQ(p.class_count(), 5u);
  EXPECT_EQ(p.background_count(), 20u);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(p.records_of_class(c).size(), 7u);
  std::set<std::string> images;
  for (const auto& r : p.records) {
    ASSERT_TRUE(r.box && r.box->valid());
    EXPECT_GE(r.box->x_min, 0.0);
    EXPECT_LE(r.box->x_max, 640.0);
    EXPECT_LE(r.box->y_max, 480.0);
    if (r.is_object()) images.insert(r.image_id);
    double n = 0.0;
    for (double v : r.embedding) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
  EXPECT_EQ(images.size(), 12u);  // 35 objects, 3 per image
}

TEST(Synth, RotationIsOrthogonal) {
  Rng rng(1);
  const ad::Matrix q = random_rotation(10, rng);
  for (std::size_t a = 0; a < 10; ++a)
    for (std::size_t b = 0; b < 10; ++b) {
      double s = 0.0;
      for (std::size_t r = 0; r < 10; ++r) s += q(r, a) * q(r, b);
      EXPECT_NEAR(s, a == b ? 1.0 : 0.0, 1e-12);
    }
}

TEST(Synth, ClassesAreSeparableOnAverage) {
  SynthConfig c = small();
  c.dim = 64;
  c.per_class = 40;
  const FeaturePack p = make_synthetic_pack(c);
  std::vector<std::vector<double>> mean(5, std::vector<double>(64, 0.0));
  for (const auto& r : p.records)
    if (r.is_object())
      for (std::size_t k = 0; k < 64; ++k) mean[r.class_index][k] += r.embedding[k] / 40.0;
  std::size_t hits = 0, total = 0;
  for (const auto& r : p.records) {
    if (!r.is_object()) continue;
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t m = 0; m < 5; ++m) {
      double dist = 0.0;
      for (std::size_t k = 0; k < 64; ++k) dist += (r.embedding[k] - mean[m][k]) * (r.embedding[k] - mean[m][k]);
      if (dist < best_d) best_d = dist, best = m;
    }
    hits += best == r.class_index;
    ++total;
  }
  EXPECT_GT(static_cast<double>(hits) / static_cast<double>(total), 0.4);
}

TEST(Synth, RejectsEmptyConfigs) {
  SynthConfig c = small();
  c.n_classes = 0;
  EXPECT_THROW(make_synthetic_pack(c), ConfigError);
  c = small();
  c.objects_per_image = 0;
  EXPECT_THROW(make_synthetic_pack(c), ConfigError);
}
