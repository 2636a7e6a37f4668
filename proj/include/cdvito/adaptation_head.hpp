#pragma once

// Learnable instance features and the instance-reweighting prototype builder.
//
// The learnable matrix holds N*K object rows grouped by class followed by
// N_bg background rows. Object prototypes come from a residual two-path
// combination per class c:
//
//   w        = softmax_k(rows_c . mlp_w + mlp_b)          (K weights)
//   att_c    = sum_k w_k rows_c[k]
//   proto_c  = alpha * (att_c . fuse_w + fuse_b) + (1 - alpha) * mean_k rows_c[k]
//
// Background rows bypass reweighting and are used per instance.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cdvito/autodiff.hpp"
#include "cdvito/error.hpp"
#include "cdvito/feature_store.hpp"
#include "cdvito/rng.hpp"

namespace cdvito {

using ad::Matrix;
using ad::Tape;
using ad::Var;

struct LearnableInstances {
  Matrix matrix;  // (N*K + N_bg) x D
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t n_bg = 0;

  std::size_t object_rows() const noexcept { return n_way * k_shot; }
  std::size_t dim() const noexcept { return matrix.cols(); }
};

// Stacks support rows (class-grouped) then background rows, bit-equal to the
// episode embeddings.
inline LearnableInstances init_learnable_instances(const Episode& episode) {
  const std::size_t n = episode.n_way(), k = episode.k_shot(), d = episode.dim;
  if (episode.support.size() != n * k) throw ContractError("episode support size is not N*K");
  LearnableInstances li{Matrix(n * k + episode.n_bg(), d), n, k, episode.n_bg()};
  std::size_t row = 0;
  for (const EpisodeRecord& r : episode.support) {
    if (r.embedding.size() != d) throw ShapeError("support embedding has wrong dimension");
    if (!r.label || *r.label != row / k) throw ContractError("support is not grouped by class");
    std::copy(r.embedding.begin(), r.embedding.end(), li.matrix.row(row).begin());
    ++row;
  }
  for (const EpisodeRecord& r : episode.background) {
    if (r.embedding.size() != d) throw ShapeError("background embedding has wrong dimension");
    std::copy(r.embedding.begin(), r.embedding.end(), li.matrix.row(row).begin());
    ++row;
  }
  return li;
}

struct ReweightParams {
  Matrix mlp_w;   // D x 1
  Matrix mlp_b;   // 1 x 1
  Matrix fuse_w;  // D x D, applied as x . fuse_w
  Matrix fuse_b;  // 1 x D
  double alpha = 0.7;

  // mlp_w, fuse_w noise and fuse_b drawn from U(-1/sqrt(D), 1/sqrt(D)); the
  // fuse layer starts at identity plus `fuse_noise` times that draw.
  static ReweightParams init(std::size_t dim, std::uint64_t seed, double alpha = 0.7, double fuse_noise = 0.01) {
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    ReweightParams p{Matrix(dim, 1), Matrix(1, 1), Matrix::identity(dim), Matrix(1, dim), alpha};
    for (double& v : p.mlp_w.values()) v = rng.uniform(-bound, bound);
    for (double& v : p.fuse_w.values()) v += fuse_noise * rng.uniform(-bound, bound);
    for (double& v : p.fuse_b.values()) v = fuse_noise * rng.uniform(-bound, bound);
    return p;
  }

  // Zero scorer and identity fuse: both paths reduce to the class mean.
  static ReweightParams neutral(std::size_t dim, double alpha = 0.7) {
    return {Matrix(dim, 1), Matrix(1, 1), Matrix::identity(dim), Matrix(1, dim), alpha};
  }
};

// Tape handles for ReweightParams.
struct ReweightVars {
  Var mlp_w;
  Var mlp_b;
  Var fuse_w;
  Var fuse_b;
  double alpha = 0.7;

  static ReweightVars on(Tape& tape, const ReweightParams& p, bool trainable) {
    return {tape.leaf(p.mlp_w, trainable), tape.leaf(p.mlp_b, trainable), tape.leaf(p.fuse_w, trainable),
            tape.leaf(p.fuse_b, trainable), p.alpha};
  }
};

struct ReweightResult {
  Var prototypes;  // N x D, not normalized
  Matrix weights;  // N x K softmax weights
};

// Per-class mean of the object rows (the reweighting-off path).
inline Var mean_prototypes(const Var& instances, std::size_t n_way, std::size_t k_shot) {
  if (n_way == 0 || k_shot == 0) throw ContractError("mean_prototypes: empty class layout");
  std::vector<Var> rows;
  rows.reserve(n_way);
  for (std::size_t c = 0; c < n_way; ++c) rows.push_back(ad::mean_rows(ad::slice_rows(instances, c * k_shot, k_shot)));
  return ad::concat_rows(rows);
}

inline ReweightResult reweight_prototypes(const Var& instances, std::size_t n_way, std::size_t k_shot,
                                          const ReweightVars& p) {
  if (!(p.alpha >= 0.0 && p.alpha <= 1.0)) throw ContractError("reweight_prototypes: alpha outside [0, 1]");
  if (n_way == 0 || k_shot == 0) throw ContractError("reweight_prototypes: empty class layout");
  const std::size_t d = instances.cols();
  if (p.mlp_w.rows() != d || p.mlp_w.cols() != 1 || p.fuse_w.rows() != d || p.fuse_w.cols() != d ||
      p.fuse_b.cols() != d) {
    throw ShapeError("reweight_prototypes: parameter shapes do not match D=" + std::to_string(d));
  }
  if (instances.rows() < n_way * k_shot) throw ShapeError("reweight_prototypes: too few instance rows");

  ReweightResult out{Var{}, Matrix(n_way, k_shot)};
  std::vector<Var> protos;
  protos.reserve(n_way);
  for (std::size_t c = 0; c < n_way; ++c) {
    const Var rows = ad::slice_rows(instances, c * k_shot, k_shot);
    const Var logits = ad::reshape(ad::add(ad::matmul(rows, p.mlp_w), p.mlp_b), 1, k_shot);
    const Var weights = ad::row_softmax(logits);
    for (std::size_t k = 0; k < k_shot; ++k) out.weights(c, k) = weights.value()(0, k);
    const Var attended = ad::matmul(weights, rows);
    const Var fused = ad::add(ad::matmul(attended, p.fuse_w), p.fuse_b);
    const Var avg = ad::mean_rows(rows);
    protos.push_back(ad::add(ad::scale(fused, p.alpha), ad::scale(avg, 1.0 - p.alpha)));
  }
  out.prototypes = ad::concat_rows(protos);
  return out;
}

// Normalized prototype tensors on a tape. `background` is empty when N_bg = 0.
struct PrototypeVars {
  Var object;
  std::optional<Var> background;

  std::size_t n_way() const { return object.rows(); }
};

inline PrototypeVars assemble_prototypes(const Var& object_prototypes, const Var& instances, std::size_t object_rows,
                                         std::size_t n_bg) {
  if (object_prototypes.cols() != instances.cols()) throw ShapeError("assemble_prototypes: dimension mismatch");
  if (object_rows + n_bg != instances.rows()) throw ShapeError("assemble_prototypes: instance layout mismatch");
  PrototypeVars out{ad::l2_normalize_rows(object_prototypes), std::nullopt};
  if (n_bg > 0) out.background = ad::l2_normalize_rows(ad::slice_rows(instances, object_rows, n_bg));
  return out;
}

// Plain-value prototype set, e.g. for scoring outside a training step.
struct PrototypeSet {
  Matrix object_prototypes;
  Matrix background_prototypes;  // 0 x D when absent
  std::vector<std::string> class_names;

  std::size_t n_way() const noexcept { return object_prototypes.rows(); }
  std::size_t n_bg() const noexcept { return background_prototypes.rows(); }
};

inline PrototypeSet to_prototype_set(const PrototypeVars& v, std::vector<std::string> names = {}) {
  PrototypeSet s{v.object.value(), v.background ? v.background->value() : Matrix(0, v.object.cols()),
                 std::move(names)};
  return s;
}

// Loads a PrototypeSet onto a tape as constants.
inline PrototypeVars prototype_constants(Tape& tape, const PrototypeSet& s) {
  if (s.n_way() == 0) throw ContractError("empty prototype set");
  PrototypeVars v{tape.constant(s.object_prototypes), std::nullopt};
  if (s.n_bg() > 0) v.background = tape.constant(s.background_prototypes);
  return v;
}

}  // namespace cdvito
