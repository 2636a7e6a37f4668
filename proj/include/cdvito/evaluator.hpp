#pragma once

// Episode evaluation: query classification accuracy, box-level mAP with
// greedy IoU matching, and the module-stacking ablation harness.

#include <algorithm>
#include <cstdint>
#include <future>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdvito/adaptation_head.hpp"
#include "cdvito/detection_heads.hpp"
#include "cdvito/error.hpp"
#include "cdvito/feature_store.hpp"
#include "cdvito/finetune.hpp"

namespace cdvito {

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

struct Detection {
  std::string image_id;
  Box box;
  std::size_t class_index = 0;
  double confidence = 0.0;
};

struct GroundTruth {
  std::string image_id;
  Box box;
  std::size_t class_index = 0;
};

// COCO-style thresholds 0.50, 0.55, ..., 0.95.
inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

// Indices of `dets` sorted by descending confidence, ties by original index.
inline std::vector<std::size_t> confidence_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  return order;
}

// Greedy per-image, per-class non-maximum suppression.
inline std::vector<Detection> greedy_nms(const std::vector<Detection>& dets, double threshold = 0.5) {
  std::vector<Detection> kept;
  for (std::size_t i : confidence_order(dets)) {
    const Detection& d = dets[i];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.image_id == d.image_id && k.class_index == d.class_index && iou(k.box, d.box) > threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// Single-class AP at one IoU threshold. Detections are matched in descending
// confidence to the unmatched ground truth of the same image with the highest
// IoU (first on ties), a match needing IoU >= threshold. AP is the area under
// the monotone precision envelope (all-point interpolation), evaluated as the
// sum of envelope precision at each true positive divided by the number of
// ground truths. Returns nullopt when there are no ground truths.
inline std::optional<double> average_precision(const std::vector<Detection>& dets,
                                               const std::vector<GroundTruth>& gts, double threshold) {
  if (gts.empty()) return std::nullopt;
  const std::vector<std::size_t> order = confidence_order(dets);
  std::vector<char> matched(gts.size(), 0);
  std::vector<char> is_tp(order.size(), 0);
  std::vector<double> precision(order.size());
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Detection& d = dets[order[rank]];
    double best = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (matched[g] || gts[g].image_id != d.image_id) continue;
      const double o = iou(d.box, gts[g].box);
      if (o > best) {
        best = o;
        best_gt = g;
      }
    }
    if (best_gt < gts.size() && best >= threshold) {
      matched[best_gt] = 1;
      is_tp[rank] = 1;
      ++tp;
    }
    precision[rank] = static_cast<double>(tp) / static_cast<double>(rank + 1);
  }
  for (std::size_t i = order.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank)
    if (is_tp[rank]) ap += precision[rank];
  return ap / static_cast<double>(gts.size());
}

struct EvalReport {
  std::string stage;
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class_ap;  // averaged over thresholds
  std::optional<double> map;
  double accuracy = 0.0;
  std::vector<double> iou_thresholds;
  EpisodeSpec episode_spec;
  std::uint64_t episode_fingerprint = 0;
  std::uint64_t config_fingerprint = 0;

  nlohmann::json to_json() const {
    nlohmann::json ap = nlohmann::json::object();
    for (std::size_t c = 0; c < class_names.size(); ++c)
      ap[class_names[c]] = per_class_ap.size() > c && per_class_ap[c] ? nlohmann::json(*per_class_ap[c]) : nlohmann::json();
    return {{"stage", stage},
            {"accuracy", accuracy},
            {"mAP", map ? nlohmann::json(*map) : nlohmann::json()},
            {"per_class_ap", ap},
            {"iou_thresholds", iou_thresholds},
            {"episode", {{"n_way", episode_spec.n_way}, {"k_shot", episode_spec.k_shot},
                         {"n_bg", episode_spec.n_bg}, {"seed", episode_spec.seed}}},
            {"episode_fingerprint", episode_fingerprint},
            {"config_fingerprint", config_fingerprint}};
  }
};

inline std::string format_fixed(std::optional<double> v, int digits = 4) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << *v;
  return os.str();
}

// Aligned text table, one row per report.
inline void write_table(std::ostream& os, const std::vector<EvalReport>& reports) {
  std::size_t w = 8;
  for (const auto& r : reports) w = std::max(w, r.stage.size() + 2);
  os << std::left << std::setw(static_cast<int>(w)) << "stage" << std::right << std::setw(10) << "accuracy"
     << std::setw(10) << "mAP" << '\n';
  for (const auto& r : reports) {
    os << std::left << std::setw(static_cast<int>(w)) << r.stage << std::right << std::setw(10)
       << format_fixed(r.accuracy) << std::setw(10) << format_fixed(r.map) << '\n';
  }
}

inline void write_csv(std::ostream& os, const std::vector<EvalReport>& reports) {
  os << "stage,accuracy,mAP,episode_fingerprint,config_fingerprint\n";
  for (const auto& r : reports) {
    os << r.stage << ',' << format_fixed(r.accuracy, 6) << ',' << (r.map ? format_fixed(r.map, 6) : "") << ','
       << r.episode_fingerprint << ',' << r.config_fingerprint << '\n';
  }
}

inline std::vector<QueryRegion> query_regions(const Episode& episode) {
  std::vector<QueryRegion> out;
  out.reserve(episode.query.size());
  for (const EpisodeRecord& r : episode.query) out.push_back(QueryRegion{r.embedding, r.box, r.label, r.box, r.image_id});
  return out;
}

// Masked softmax probabilities (R x (N+1)) for a batch of regions.
inline Matrix score_probabilities(const std::vector<QueryRegion>& regions, const PrototypeSet& protos,
                                  const HeadParams& head) {
  Tape tape;
  const PrototypeVars pv = prototype_constants(tape, protos);
  const HeadVars hv = HeadVars::on(tape, head, false);
  const RegionScores s = score_regions(tape.constant(stack_features(regions, protos.object_prototypes.cols())), pv, hv);
  const Matrix& z = s.logits.value();
  Matrix p(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < z.cols(); ++c)
      if (s.mask[r][c]) mx = std::max(mx, z(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < z.cols(); ++c)
      if (s.mask[r][c]) total += (p(r, c) = std::exp(z(r, c) - mx));
    for (std::size_t c = 0; c < z.cols(); ++c) p(r, c) /= total;
  }
  return p;
}

inline std::size_t row_argmax(const Matrix& m, std::size_t r, std::size_t cols) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < cols; ++c)
    if (m(r, c) > m(r, best)) best = c;
  return best;
}

// Fraction of regions whose argmax outcome (classes plus background) equals
// the ground truth.
inline double classification_accuracy(const std::vector<QueryRegion>& regions, const PrototypeSet& protos,
                                      const HeadParams& head) {
  if (regions.empty()) throw ContractError("evaluate_classification: empty query set");
  const std::vector<std::size_t> labels = ce_labels(regions, protos.n_way());
  const Matrix p = score_probabilities(regions, protos, head);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < regions.size(); ++r)
    if (row_argmax(p, r, p.cols()) == labels[r]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(regions.size());
}

inline double evaluate_classification(const AdaptationParams& params, const Episode& episode) {
  return classification_accuracy(query_regions(episode), build_prototypes(params), params.head);
}

// One detection per boxed query region: best object class, its probability as
// confidence, and the proposal refined by the regressor.
inline std::vector<Detection> detect(const std::vector<QueryRegion>& regions, const PrototypeSet& protos,
                                     const HeadParams& head) {
  std::vector<QueryRegion> boxed;
  for (const QueryRegion& r : regions)
    if (r.proposal_box) boxed.push_back(r);
  if (boxed.empty()) return {};
  const Matrix p = score_probabilities(boxed, protos, head);
  const std::size_t n = protos.n_way();
  std::vector<std::size_t> cls(boxed.size());
  for (std::size_t r = 0; r < boxed.size(); ++r) cls[r] = row_argmax(p, r, n);

  Tape tape;
  const HeadVars hv = HeadVars::on(tape, head, false);
  const Var x = tape.constant(stack_features(boxed, protos.object_prototypes.cols()));
  const Var matched = ad::gather_rows(tape.constant(protos.object_prototypes), cls);
  const Matrix deltas = predict_deltas(x, matched, hv).value();

  std::vector<Detection> dets;
  for (std::size_t r = 0; r < boxed.size(); ++r) {
    const std::array<double, 4> d{deltas(r, 0), deltas(r, 1), deltas(r, 2), deltas(r, 3)};
    dets.push_back(Detection{boxed[r].image_id, apply_deltas(*boxed[r].proposal_box, d), cls[r], p(r, cls[r])});
  }
  return dets;
}

// mAP over classes with at least one ground truth, averaged over thresholds.
struct MapResult {
  std::vector<std::optional<double>> per_class;  // mean over thresholds
  std::optional<double> map;
};

inline MapResult mean_average_precision(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                        std::size_t n_classes, const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw ContractError("no IoU thresholds");
  MapResult out{std::vector<std::optional<double>>(n_classes), std::nullopt};
  std::vector<std::vector<Detection>> dets_by(n_classes);
  std::vector<std::vector<GroundTruth>> gts_by(n_classes);
  for (const auto& d : dets)
    if (d.class_index < n_classes) dets_by[d.class_index].push_back(d);
  for (const auto& g : gts)
    if (g.class_index < n_classes) gts_by[g.class_index].push_back(g);

  double map_sum = 0.0;
  bool any = false;
  std::vector<double> class_sum(n_classes, 0.0);
  for (double t : thresholds) {
    double s = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (auto ap = average_precision(dets_by[c], gts_by[c], t)) {
        s += *ap;
        class_sum[c] += *ap;
        ++counted;
      }
    }
    if (counted > 0) {
      map_sum += s / static_cast<double>(counted);
      any = true;
    }
  }
  const double nt = static_cast<double>(thresholds.size());
  for (std::size_t c = 0; c < n_classes; ++c)
    if (!gts_by[c].empty()) out.per_class[c] = class_sum[c] / nt;
  if (any) out.map = map_sum / nt;
  return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Class-wise NMS at IoU 0.5 followed by mAP; the detection-level core of
// evaluate_detection.
inline MapResult detection_map(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                               std::size_t n_classes, const std::vector<double>& thresholds) {
  return mean_average_precision(greedy_nms(dets, 0.5), gts, n_classes, thresholds);
}

inline EvalReport evaluate_detection(const AdaptationParams& params, const Episode& episode,
                                     const std::vector<double>& thresholds = coco_iou_thresholds()) {
  const std::vector<QueryRegion> regions = query_regions(episode);
  std::vector<GroundTruth> gts;
  for (const QueryRegion& r : regions)
    if (r.gt_box && r.gt_class) gts.push_back(GroundTruth{r.image_id, *r.gt_box, *r.gt_class});
  if (gts.empty()) throw ContractError("evaluate_detection: no annotated query regions");
  const PrototypeSet protos = build_prototypes(params);
  const MapResult m = detection_map(detect(regions, protos, params.head), gts, params.n_way, thresholds);

  EvalReport rep;
  rep.class_names = params.class_names;
  rep.per_class_ap = m.per_class;
  rep.map = m.map;
  rep.accuracy = classification_accuracy(regions, protos, params.head);
  rep.iou_thresholds = thresholds;
  rep.episode_spec = episode.spec;
  rep.episode_fingerprint = episode.fingerprint();
  return rep;
}

// Report without detection metrics, for packs that carry no boxes.
inline EvalReport evaluate_episode(const AdaptationParams& params, const Episode& episode,
                                   const std::vector<double>& thresholds = coco_iou_thresholds()) {
  bool boxed = false;
  for (const EpisodeRecord& r : episode.query) boxed = boxed || r.box.has_value();
  if (boxed) return evaluate_detection(params, episode, thresholds);
  EvalReport rep;
  rep.class_names = params.class_names;
  rep.per_class_ap.assign(params.n_way, std::nullopt);
  rep.accuracy = evaluate_classification(params, episode);
  rep.iou_thresholds = thresholds;
  rep.episode_spec = episode.spec;
  rep.episode_fingerprint = episode.fingerprint();
  return rep;
}

// ---------------------------------------------------------------------------
// Ablation

enum class Stage { frozen, heads, lif, ir, dp, full };

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::frozen: return "frozen";
    case Stage::heads: return "FT-heads";
    case Stage::lif: return "+LIF";
    case Stage::ir: return "+IR";
    case Stage::dp: return "+DP";
    case Stage::full: return "full";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::frozen, Stage::heads, Stage::lif, Stage::ir, Stage::dp, Stage::full}) {
    if (s == stage_name(st)) return st;
  }
  if (s == "heads") return Stage::heads;
  if (s == "lif") return Stage::lif;
  if (s == "ir") return Stage::ir;
  if (s == "dp") return Stage::dp;
  throw ConfigError("unknown ablation stage '" + s + "'");
}

// Modules enabled at each stage; stages stack cumulatively.
inline ModuleSet stage_modules(Stage s) {
  switch (s) {
    case Stage::frozen: return {};
    case Stage::heads: return {Module::heads};
    case Stage::lif: return {Module::heads, Module::lif};
    case Stage::ir: return {Module::heads, Module::lif, Module::ir};
    case Stage::dp:
    case Stage::full: return ModuleSet::all();
  }
  return {};
}

inline EvalReport run_stage(const Episode& episode, const FinetuneConfig& base, Stage stage,
                            const std::vector<double>& thresholds) {
  FinetuneConfig cfg = base;
  cfg.enabled = stage_modules(stage);
  EvalReport rep;
  if (stage == Stage::frozen) {
    rep = evaluate_episode(frozen_params(episode, cfg), episode, thresholds);
  } else {
    cfg = effective_config(cfg, episode.n_way());
    rep = evaluate_episode(finetune(episode, cfg).params, episode, thresholds);
  }
  rep.stage = stage_name(stage);
  rep.config_fingerprint = fnv1a(nlohmann::json(cfg).dump());
  return rep;
}

// One report per stage over the same episode and seeds. Stages may run on up
// to `workers` threads; results come back in stage order.
inline std::vector<EvalReport> run_ablation(const Episode& episode, const FinetuneConfig& base,
                                            const std::vector<Stage>& stages,
                                            const std::vector<double>& thresholds = coco_iou_thresholds(),
                                            std::size_t workers = 1) {
  std::vector<EvalReport> out(stages.size());
  workers = std::max<std::size_t>(1, workers);
  for (std::size_t begin = 0; begin < stages.size(); begin += workers) {
    const std::size_t end = std::min(stages.size(), begin + workers);
    std::vector<std::future<EvalReport>> jobs;
    for (std::size_t i = begin; i < end; ++i)
      jobs.push_back(std::async(workers == 1 ? std::launch::deferred : std::launch::async,
                                [&, i] { return run_stage(episode, base, stages[i], thresholds); }));
    for (std::size_t i = begin; i < end; ++i) out[i] = jobs[i - begin].get();
  }
  return out;
}

}  // namespace cdvito
