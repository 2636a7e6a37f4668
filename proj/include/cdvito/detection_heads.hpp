#pragma once

// Cosine one-vs-rest classification head, box-delta regressor and the total
// objective.
//
// Scoring a region r against prototypes:
//   class logit c  = cos(r, proto_c) / T                 (top_k classes kept)
//   background     = (max_b cos(r, bg_b) + bg_bias) / T   (absent if N_bg = 0)
//   scores         = softmax over the kept entries
// Outcome index N is the background channel.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "cdvito/adaptation_head.hpp"
#include "cdvito/autodiff.hpp"
#include "cdvito/error.hpp"
#include "cdvito/feature_store.hpp"
#include "cdvito/rng.hpp"

namespace cdvito {

inline constexpr std::size_t kBackgroundLabel = static_cast<std::size_t>(-1);

struct QueryRegion {
  std::vector<double> roi_feature;
  std::optional<Box> proposal_box;
  std::optional<std::size_t> gt_class;  // kBackgroundLabel for background
  std::optional<Box> gt_box;
  std::string image_id;

  bool is_background() const noexcept { return gt_class && *gt_class == kBackgroundLabel; }
};

// Top-K rule for the head: at most 5 class candidates, all of them when N < 5.
inline std::size_t default_top_k(std::size_t n_way) { return std::min<std::size_t>(5, n_way); }

struct HeadParams {
  double cls_temperature = 0.1;
  std::size_t top_k = 5;
  Matrix bg_bias;  // 1 x 1, added to the background similarity
  Matrix box_w;    // 2D x 4
  Matrix box_b;    // 1 x 4

  static HeadParams init(std::size_t dim, std::size_t n_way, std::uint64_t seed, double temperature = 0.1) {
    HeadParams h{temperature, default_top_k(n_way), Matrix(1, 1), Matrix(2 * dim, 4), Matrix(1, 4)};
    Rng rng(seed);
    const double bound = 0.1 / std::sqrt(static_cast<double>(2 * dim));
    for (double& v : h.box_w.values()) v = rng.uniform(-bound, bound);
    return h;
  }
};

struct HeadVars {
  Var bg_bias;
  Var box_w;
  Var box_b;
  double temperature = 0.1;
  std::size_t top_k = 5;

  static HeadVars on(Tape& tape, const HeadParams& p, bool trainable) {
    return {tape.leaf(p.bg_bias, trainable), tape.leaf(p.box_w, trainable), tape.leaf(p.box_b, trainable),
            p.cls_temperature, p.top_k};
  }
};

struct RegionScores {
  Var logits;          // R x (N + 1)
  ad::LogitMask mask;  // kept candidates per row
};

// Logits for every row of `regions` (R x D). Rows need not be normalized;
// similarities are cosine. When `keep_labels` is given, each row's label entry
// stays unmasked even if it falls outside the top-k candidates, so training
// cross-entropy stays finite.
inline RegionScores score_regions(const Var& regions, const PrototypeVars& protos, const HeadVars& head,
                                  const std::vector<std::size_t>* keep_labels = nullptr) {
  if (!(head.temperature > 0.0)) throw ContractError("classification temperature must be positive");
  const std::size_t n = protos.n_way();
  if (n == 0) throw ContractError("empty prototype set");
  if (head.top_k == 0) throw ContractError("top_k must be positive");
  if (regions.cols() != protos.object.cols()) throw ShapeError("region and prototype dimensions differ");
  const std::size_t r_count = regions.rows();
  Tape& tape = regions.tape();

  const Var cls_sim = ad::cosine_similarity_matrix(regions, protos.object);
  Var bg_col;
  const bool has_bg = protos.background.has_value();
  if (has_bg) {
    const Var bg_sim = ad::row_max(ad::cosine_similarity_matrix(regions, *protos.background));
    bg_col = ad::add(bg_sim, head.bg_bias);
  } else {
    bg_col = tape.constant(Matrix(r_count, 1));
  }
  const Var logits = ad::scale(ad::concat_cols({cls_sim, bg_col}), 1.0 / head.temperature);

  RegionScores out{logits, ad::LogitMask(r_count, std::vector<char>(n + 1, 0))};
  const std::size_t k = std::min(head.top_k, n);
  const Matrix& sim = cls_sim.value();
  std::vector<std::size_t> order(n);
  for (std::size_t r = 0; r < r_count; ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim(r, a) > sim(r, b); });
    for (std::size_t i = 0; i < k; ++i) out.mask[r][order[i]] = 1;
    out.mask[r][n] = has_bg ? 1 : 0;
    if (keep_labels) {
      const std::size_t lbl = (*keep_labels)[r];
      if (lbl < n) out.mask[r][lbl] = 1;
    }
  }
  return out;
}

inline Matrix stack_features(const std::vector<QueryRegion>& regions, std::size_t dim) {
  Matrix m(regions.size(), dim);
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (regions[i].roi_feature.size() != dim) throw ShapeError("region feature has wrong dimension");
    std::copy(regions[i].roi_feature.begin(), regions[i].roi_feature.end(), m.row(i).begin());
  }
  return m;
}

// Probabilities over N classes plus background (index N) for one region.
inline std::vector<double> classify_region(const QueryRegion& region, const PrototypeSet& protos,
                                           const HeadParams& params) {
  if (protos.n_way() == 0) throw ContractError("classify_region: empty prototype set");
  Tape tape;
  const PrototypeVars pv = prototype_constants(tape, protos);
  const HeadVars hv = HeadVars::on(tape, params, false);
  const Var x = tape.constant(stack_features({region}, protos.object_prototypes.cols()));
  const RegionScores s = score_regions(x, pv, hv);
  const Matrix& z = s.logits.value();
  const std::size_t c = z.cols();
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c; ++j)
    if (s.mask[0][j]) mx = std::max(mx, z(0, j));
  std::vector<double> p(c, 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < c; ++j)
    if (s.mask[0][j]) total += (p[j] = std::exp(z(0, j) - mx));
  for (double& v : p) v /= total;
  return p;
}

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::vector<std::size_t> ce_labels(const std::vector<QueryRegion>& regions, std::size_t n_way) {
  std::vector<std::size_t> labels;
  labels.reserve(regions.size());
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const QueryRegion& r = regions[i];
    if (!r.gt_class) throw ContractError("region " + std::to_string(i) + " has no gt_class");
    if (*r.gt_class != kBackgroundLabel && *r.gt_class >= n_way)
      throw ContractError("region " + std::to_string(i) + " gt_class out of range");
    labels.push_back(r.is_background() ? n_way : *r.gt_class);
  }
  return labels;
}

// Mean cross-entropy of the head's scores against each region's gt_class.
inline Var classification_loss(const std::vector<QueryRegion>& regions, const PrototypeVars& protos,
                               const HeadVars& head) {
  if (regions.empty()) throw ContractError("classification_loss: no regions");
  const std::size_t n = protos.n_way();
  const std::vector<std::size_t> labels = ce_labels(regions, n);
  if (!protos.background) {
    for (std::size_t l : labels)
      if (l == n) throw ContractError("classification_loss: background label without background prototypes");
  }
  Tape& tape = protos.object.tape();
  const Var x = tape.constant(stack_features(regions, protos.object.cols()));
  const RegionScores s = score_regions(x, protos, head, &labels);
  return ad::cross_entropy_with_logits(s.logits, labels, s.mask);
}

// Standard center-offset / log-size deltas from `from` to `to`.
inline std::array<double, 4> box_deltas(const Box& from, const Box& to) {
  const double fw = from.width(), fh = from.height();
  const double fx = from.x_min + 0.5 * fw, fy = from.y_min + 0.5 * fh;
  const double tw = to.width(), th = to.height();
  const double tx = to.x_min + 0.5 * tw, ty = to.y_min + 0.5 * th;
  return {(tx - fx) / fw, (ty - fy) / fh, std::log(tw / fw), std::log(th / fh)};
}

inline Box apply_deltas(const Box& from, const std::array<double, 4>& d) {
  const double fw = from.width(), fh = from.height();
  const double cx = from.x_min + 0.5 * fw + d[0] * fw;
  const double cy = from.y_min + 0.5 * fh + d[1] * fh;
  const double w = fw * std::exp(d[2]), h = fh * std::exp(d[3]);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// Regressor input: region feature concatenated with the (normalized)
// prototype of the region's class.
inline Var predict_deltas(const Var& features, const Var& matched_protos, const HeadVars& head) {
  return ad::add(ad::matmul(ad::concat_cols({features, matched_protos}), head.box_w), head.box_b);
}

// Smooth-L1 between predicted and target deltas over object regions with a
// ground-truth box. Regions without one are skipped; with none left the loss
// is a constant 0.
inline Var localization_loss(const std::vector<QueryRegion>& regions, const PrototypeVars& protos,
                             const HeadVars& head) {
  Tape& tape = protos.object.tape();
  std::vector<QueryRegion> used;
  std::vector<std::size_t> classes;
  std::vector<double> target_values;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const QueryRegion& r = regions[i];
    if (!r.gt_box || !r.gt_class) continue;
    if (r.is_background()) throw ContractError("localization_loss: region " + std::to_string(i) + " is background");
    if (*r.gt_class >= protos.n_way()) throw ContractError("localization_loss: gt_class out of range");
    if (!r.gt_box->valid()) throw ContractError("localization_loss: degenerate gt_box at region " + std::to_string(i));
    const Box proposal = r.proposal_box.value_or(*r.gt_box);
    if (!proposal.valid()) throw ContractError("localization_loss: degenerate proposal at region " + std::to_string(i));
    const auto t = box_deltas(proposal, *r.gt_box);
    target_values.insert(target_values.end(), t.begin(), t.end());
    used.push_back(r);
    classes.push_back(*r.gt_class);
  }
  if (used.empty()) return tape.constant(Matrix::scalar(0.0));
  const Var x = tape.constant(stack_features(used, protos.object.cols()));
  const Var matched = ad::gather_rows(protos.object, classes);
  const Var pred = predict_deltas(x, matched, head);
  const Var target = tape.constant(Matrix(used.size(), 4, std::move(target_values)));
  return ad::smooth_l1(pred, target);
}

// L = L_loc + L_cls (+ L_dp when the domain prompter is active).
inline Var total_loss(const Var& l_loc, const Var& l_cls, const std::optional<Var>& l_dp = std::nullopt) {
  Var total = ad::add(l_loc, l_cls);
  if (l_dp) total = ad::add(total, *l_dp);
  return total;
}

}  // namespace cdvito
