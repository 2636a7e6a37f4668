#pragma once

// Desk-scale cross-domain benchmark.
//
// Source-domain class means are random unit vectors in D dimensions. Target
// samples are produced by rotating source-domain points with one fixed random
// orthogonal matrix, adding a shared "style" offset and per-sample noise:
//
//   object  x = R (signal * mu_c + noise * e) + style * s + ib * g_m
//               + sum_j a_j * h_j
//   backgr. x = R (clutter * mean of two random class means + noise * e)
//               + style * s + bg_strength * g_m
//
// g_m is one of a few background modes. The per-object amount `ib` is drawn
// from U(0, ib_max), so some objects blend into background clutter. The h_j
// are nuisance directions shared by all classes with per-object coefficients
// a_j ~ N(0, nuisance^2); they make classes confusable. Records are grouped
// into images of `objects_per_image` boxes.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cdvito/autodiff.hpp"
#include "cdvito/error.hpp"
#include "cdvito/feature_store.hpp"
#include "cdvito/rng.hpp"

namespace cdvito {

struct SynthConfig {
  std::size_t n_classes = 5;
  std::size_t dim = 64;
  std::size_t per_class = 60;
  std::size_t n_background = 600;
  std::size_t background_modes = 4;
  std::size_t objects_per_image = 3;
  std::size_t nuisance_dirs = 3;
  double signal = 0.8;
  double noise = 0.9;
  double style = 1.2;
  double ib_max = 0.5;
  double nuisance = 0.8;
  double clutter = 0.8;
  double bg_strength = 1.2;
  std::uint64_t seed = 0;
};

// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
inline ad::Matrix random_rotation(std::size_t dim, Rng& rng) {
  ad::Matrix q(dim, dim);
  for (double& v : q.values()) v = rng.normal();
  for (std::size_t c = 0; c < dim; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (std::size_t r = 0; r < dim; ++r) dot += q(r, c) * q(r, p);
      for (std::size_t r = 0; r < dim; ++r) q(r, c) -= dot * q(r, p);
    }
    double n = 0.0;
    for (std::size_t r = 0; r < dim; ++r) n += q(r, c) * q(r, c);
    n = std::sqrt(n);
    for (std::size_t r = 0; r < dim; ++r) q(r, c) /= n;
  }
  return q;
}

inline std::vector<double> random_unit(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  double n = 0.0;
  for (double& x : v) {
    x = rng.normal();
    n += x * x;
  }
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

inline FeaturePack make_synthetic_pack(const SynthConfig& cfg) {
  if (cfg.n_classes == 0 || cfg.dim == 0 || cfg.per_class == 0) throw ConfigError("synth: empty configuration");
  if (cfg.background_modes == 0 || cfg.objects_per_image == 0) throw ConfigError("synth: bad grouping");
  Rng rng(cfg.seed);
  const std::size_t d = cfg.dim;
  const ad::Matrix rot = random_rotation(d, rng);
  std::vector<std::vector<double>> means;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) means.push_back(random_unit(d, rng));
  const std::vector<double> style = random_unit(d, rng);
  std::vector<std::vector<double>> modes;
  for (std::size_t m = 0; m < cfg.background_modes; ++m) modes.push_back(random_unit(d, rng));
  std::vector<std::vector<double>> nuisance;
  for (std::size_t j = 0; j < cfg.nuisance_dirs; ++j) nuisance.push_back(random_unit(d, rng));

  FeaturePack pack;
  pack.dataset_id = "synth-" + std::to_string(cfg.seed);
  pack.dim = d;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) pack.class_names.push_back("class_" + std::to_string(c));

  auto finish = [&](std::vector<double> src, double mode_weight, std::size_t mode, const std::vector<double>& extra) {
    std::vector<float> out(d);
    for (std::size_t r = 0; r < d; ++r) {
      double v = 0.0;
      for (std::size_t k = 0; k < d; ++k) v += rot(r, k) * src[k];
      v += cfg.style * style[r] + mode_weight * modes[mode][r] + extra[r];
      out[r] = static_cast<float>(v);
    }
    return out;
  };

  auto random_box = [&]() {
    const double w = rng.uniform(24.0, 160.0), h = rng.uniform(24.0, 160.0);
    const double x = rng.uniform(0.0, 640.0 - w), y = rng.uniform(0.0, 480.0 - h);
    return Box{std::round(x), std::round(y), std::round(x + w), std::round(y + h)};
  };

  std::size_t object_index = 0;
  for (std::size_t i = 0; i < cfg.per_class; ++i) {
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
      std::vector<double> src(d);
      for (std::size_t k = 0; k < d; ++k) src[k] = cfg.signal * means[c][k] + cfg.noise * rng.normal() / std::sqrt(double(d));
      const double ib = rng.uniform(0.0, cfg.ib_max);
      const std::size_t mode = static_cast<std::size_t>(rng.below(cfg.background_modes));
      std::vector<double> extra(d, 0.0);
      for (const std::vector<double>& h : nuisance) {
        const double a = cfg.nuisance * rng.normal();
        for (std::size_t k = 0; k < d; ++k) extra[k] += a * h[k];
      }
      FeatureRecord rec;
      rec.role = Role::object;
      rec.class_index = c;
      rec.image_id = "img_" + std::to_string(object_index / cfg.objects_per_image);
      rec.box = random_box();
      rec.raw = finish(std::move(src), ib, mode, extra);
      pack.records.push_back(std::move(rec));
      ++object_index;
    }
  }
  for (std::size_t b = 0; b < cfg.n_background; ++b) {
    const std::size_t c1 = static_cast<std::size_t>(rng.below(cfg.n_classes));
    const std::size_t c2 = static_cast<std::size_t>(rng.below(cfg.n_classes));
    std::vector<double> src(d);
    for (std::size_t k = 0; k < d; ++k)
      src[k] = cfg.clutter * 0.5 * (means[c1][k] + means[c2][k]) + cfg.noise * rng.normal() / std::sqrt(double(d));
    const std::size_t mode = static_cast<std::size_t>(rng.below(cfg.background_modes));
    FeatureRecord rec;
    rec.role = Role::background;
    rec.image_id = "bg_" + std::to_string(b);
    rec.box = random_box();
    rec.raw = finish(std::move(src), cfg.bg_strength, mode, std::vector<double>(d, 0.0));
    pack.records.push_back(std::move(rec));
  }
  widen_embeddings(pack, Normalization::l2);
  return pack;
}

}  // namespace cdvito
