#pragma once

// Independent reference implementations used as test oracles. They share no
// code with the library beyond plain data types.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "cdvito/evaluator.hpp"

namespace oracle {

using cdvito::Box;
using cdvito::Detection;
using cdvito::GroundTruth;

inline double box_iou(const Box& a, const Box& b) {
  const double x0 = std::max(a.x_min, b.x_min), y0 = std::max(a.y_min, b.y_min);
  const double x1 = std::min(a.x_max, b.x_max), y1 = std::min(a.y_max, b.y_max);
  const double inter = std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0);
  const double area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
  const double area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
  return inter / (area_a + area_b - inter);
}

// Rank order: higher confidence first, earlier index first on ties.
inline bool ranks_before(const std::vector<Detection>& d, std::size_t a, std::size_t b) {
  if (d[a].confidence != d[b].confidence) return d[a].confidence > d[b].confidence;
  return a < b;
}

inline std::vector<std::size_t> ranked(const std::vector<Detection>& d) {
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // Selection sort keeps this independent of the library's stable_sort.
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = i + 1; j < idx.size(); ++j)
      if (ranks_before(d, idx[j], idx[i])) std::swap(idx[i], idx[j]);
  return idx;
}

// A detection survives iff no surviving higher-ranked detection of the same
// image and class overlaps it by more than `thr`. Output keeps rank order.
inline std::vector<Detection> nms(const std::vector<Detection>& d, double thr = 0.5) {
  const std::vector<std::size_t> order = ranked(d);
  std::function<bool(std::size_t)> survives = [&](std::size_t pos) {
    const Detection& x = d[order[pos]];
    for (std::size_t q = 0; q < pos; ++q) {
      const Detection& y = d[order[q]];
      if (y.image_id == x.image_id && y.class_index == x.class_index && box_iou(x.box, y.box) > thr && survives(q))
        return false;
    }
    return true;
  };
  std::vector<Detection> out;
  for (std::size_t pos = 0; pos < order.size(); ++pos)
    if (survives(pos)) out.push_back(d[order[pos]]);
  return out;
}

// Enumerates every injective partial assignment of ranked detections to
// ground truths and keeps the one that is consistent with greedy matching:
// each detection takes the best still-free eligible ground truth (highest
// IoU, lowest index on ties) or nothing when none is eligible.
inline std::optional<double> average_precision(const std::vector<Detection>& d, const std::vector<GroundTruth>& g,
                                               double thr) {
  if (g.empty()) return std::nullopt;
  const std::vector<std::size_t> order = ranked(d);
  const std::size_t n = order.size();
  std::vector<int> assign(n, -1), chosen;
  std::vector<char> used(g.size(), 0);
  bool found = false;

  auto consistent = [&] {
    std::vector<char> taken(g.size(), 0);
    for (std::size_t r = 0; r < n; ++r) {
      const Detection& x = d[order[r]];
      int best = -1;
      double best_iou = -1.0;
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (taken[j] || g[j].image_id != x.image_id) continue;
        const double o = box_iou(x.box, g[j].box);
        if (o >= thr && o > best_iou) {
          best_iou = o;
          best = static_cast<int>(j);
        }
      }
      if (assign[r] != best) return false;
      if (best >= 0) taken[static_cast<std::size_t>(best)] = 1;
    }
    return true;
  };

  std::function<void(std::size_t)> enumerate = [&](std::size_t r) {
    if (r == n) {
      if (consistent()) {
        if (found) throw std::logic_error("oracle: two greedy-consistent assignments");
        found = true;
        chosen = assign;
      }
      return;
    }
    assign[r] = -1;
    enumerate(r + 1);
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (used[j]) continue;
      used[j] = 1;
      assign[r] = static_cast<int>(j);
      enumerate(r + 1);
      used[j] = 0;
      assign[r] = -1;
    }
  };
  enumerate(0);
  if (!found) throw std::logic_error("oracle: no greedy-consistent assignment");

  // Precision and recall after each rank; interpolated precision at recall
  // level k/npos is the best precision at any rank reaching that recall.
  const std::size_t npos = g.size();
  std::vector<double> prec(n);
  std::vector<std::size_t> hits(n);
  std::size_t tp = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (chosen[r] >= 0) ++tp;
    hits[r] = tp;
    prec[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  double ap = 0.0;
  for (std::size_t k = 1; k <= npos; ++k) {
    double best = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      if (hits[r] >= k) best = std::max(best, prec[r]);
    ap += best;
  }
  return ap / static_cast<double>(npos);
}

inline std::optional<double> map(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                  std::size_t n_classes, const std::vector<double>& thresholds) {
  const std::vector<Detection> kept = nms(dets, 0.5);
  double total = 0.0;
  bool any = false;
  for (double t : thresholds) {
    double s = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
      std::vector<Detection> dc;
      std::vector<GroundTruth> gc;
      for (const auto& x : kept)
        if (x.class_index == c) dc.push_back(x);
      for (const auto& x : gts)
        if (x.class_index == c) gc.push_back(x);
      if (auto ap = oracle::average_precision(dc, gc, t)) {
        s += *ap;
        ++counted;
      }
    }
    if (counted) {
      total += s / static_cast<double>(counted);
      any = true;
    }
  }
  if (!any) return std::nullopt;
  return total / static_cast<double>(thresholds.size());
}

// Softmax cross-entropy of one logit row against `label`, skipping masked
// entries; evaluated term by term.
inline double cross_entropy(const std::vector<double>& logits, std::size_t label,
                            const std::vector<char>& keep = {}) {
  double mx = -INFINITY;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (keep.empty() || keep[i]) mx = std::max(mx, logits[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (keep.empty() || keep[i]) z += std::exp(logits[i] - mx);
  return -(logits[label] - mx - std::log(z));
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return dot(a, b) / std::sqrt(dot(a, a) * dot(b, b));
}

inline std::vector<double> row(const cdvito::ad::Matrix& m, std::size_t r) {
  return std::vector<double>(m.row(r).begin(), m.row(r).end());
}

inline std::vector<double> plus(std::vector<double> a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

// Mean pairwise cosine similarity between rows.
inline double mean_pairwise_cosine(const cdvito::ad::Matrix& m) {
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.rows(); ++j) {
      s += cosine(row(m, i), row(m, j));
      ++count;
    }
  return count ? s / static_cast<double>(count) : 0.0;
}

}  // namespace oracle
