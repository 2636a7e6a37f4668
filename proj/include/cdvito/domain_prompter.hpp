#pragma once

// Domain prompter: learnable virtual-domain vectors that perturb object
// prototypes additively, trained with three losses.
//
//   L_domain    InfoNCE over raw dot products of the domain vectors; each
//               vector's positive is itself.
//   L_proto     for class i with sampled domains (k_i, m_i): anchor
//               p_i + d_k, candidates p_j + d_m for all classes j, positive j = i.
//   L_proto_cls cross-entropy of the head's scores for every perturbed
//               prototype p_i + d_k and p_i + d_m against the unperturbed set.
//   L_dp        = L_domain + L_proto + L_proto_cls.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "cdvito/adaptation_head.hpp"
#include "cdvito/autodiff.hpp"
#include "cdvito/detection_heads.hpp"
#include "cdvito/error.hpp"
#include "cdvito/rng.hpp"

namespace cdvito {

struct DpConfig {
  double tau_domain = 0.1;
  double tau_proto = 2.0;
  std::size_t domains_per_class = 2;  // N_dom = domains_per_class * N
  double init_stddev = 0.02;

  std::size_t domain_count(std::size_t n_way) const noexcept { return domains_per_class * n_way; }
};

// N_dom x D matrix of N(0, init_stddev^2) entries.
inline Matrix init_domains(std::size_t n_way, std::size_t dim, const DpConfig& config, std::uint64_t seed) {
  if (n_way == 0) throw ContractError("init_domains: N must be at least 1");
  if (dim == 0) throw ContractError("init_domains: D must be positive");
  Matrix m(config.domain_count(n_way), dim);
  Rng rng(seed);
  for (double& v : m.values()) v = rng.normal(0.0, config.init_stddev);
  return m;
}

inline Var perturb(const Var& prototype, const Var& domain) {
  if (prototype.rows() != domain.rows() || prototype.cols() != domain.cols())
    throw ShapeError("perturb: prototype " + prototype.value().shape_string() + " vs domain " +
                     domain.value().shape_string());
  return ad::add(prototype, domain);
}

inline Var domain_diversity_loss(const Var& domains, double tau) {
  if (!(tau > 0.0)) throw ContractError("domain_diversity_loss: tau must be positive");
  const std::size_t n = domains.rows();
  if (n == 0) throw ContractError("domain_diversity_loss: no domains");
  const Var logits = ad::scale(ad::matmul(domains, ad::transpose(domains)), 1.0 / tau);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i;
  return ad::cross_entropy_with_logits(logits, labels);
}

// Per-class pair of distinct domain indices (k_i, m_i).
struct PairChoice {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

// Draws (k_i, m_i) uniformly among ordered pairs of distinct domains, one
// pair per class.
inline PairChoice sample_pairs(std::size_t n_way, std::size_t n_dom, Rng& rng) {
  if (n_dom < 2) throw ContractError("sample_pairs: need at least two domains");
  PairChoice pc;
  pc.pairs.reserve(n_way);
  for (std::size_t i = 0; i < n_way; ++i) {
    const std::size_t k = static_cast<std::size_t>(rng.below(n_dom));
    std::size_t m = static_cast<std::size_t>(rng.below(n_dom - 1));
    if (m >= k) ++m;
    pc.pairs.emplace_back(k, m);
  }
  return pc;
}

inline void check_pairs(const PairChoice& pc, std::size_t n_way, std::size_t n_dom) {
  if (pc.pairs.size() != n_way) throw ContractError("pair choice must have one pair per class");
  for (const auto& [k, m] : pc.pairs) {
    if (k == m) throw ContractError("pair choice repeats a domain within a class");
    if (k >= n_dom || m >= n_dom) throw ContractError("pair choice domain index out of range");
  }
}

struct LossTerm {
  Var value;
  bool degenerate = false;  // true when the loss is identically zero by construction
};

inline LossTerm prototype_consistency_loss(const Var& prototypes, const Var& domains, const PairChoice& pc,
                                           double tau) {
  if (!(tau > 0.0)) throw ContractError("prototype_consistency_loss: tau must be positive");
  if (prototypes.cols() != domains.cols()) throw ShapeError("prototype_consistency_loss: dimension mismatch");
  const std::size_t n = prototypes.rows();
  check_pairs(pc, n, domains.rows());
  if (n == 1) return {prototypes.tape().constant(Matrix::scalar(0.0)), true};

  std::vector<Var> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [k, m] = pc.pairs[i];
    const Var anchor = perturb(ad::slice_rows(prototypes, i, 1), ad::slice_rows(domains, k, 1));
    const Var candidates = ad::add(prototypes, ad::slice_rows(domains, m, 1));
    rows.push_back(ad::matmul(anchor, ad::transpose(candidates)));
  }
  const Var logits = ad::scale(ad::concat_rows(rows), 1.0 / tau);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i;
  return {ad::cross_entropy_with_logits(logits, labels), false};
}

inline Var perturbed_classification_loss(const PrototypeVars& protos, const Var& domains, const PairChoice& pc,
                                         const HeadVars& head) {
  const std::size_t n = protos.n_way();
  check_pairs(pc, n, domains.rows());
  std::vector<Var> perturbed;
  std::vector<std::size_t> labels;
  perturbed.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const Var p = ad::slice_rows(protos.object, i, 1);
    perturbed.push_back(perturb(p, ad::slice_rows(domains, pc.pairs[i].first, 1)));
    perturbed.push_back(perturb(p, ad::slice_rows(domains, pc.pairs[i].second, 1)));
    labels.push_back(i);
    labels.push_back(i);
  }
  const RegionScores s = score_regions(ad::concat_rows(perturbed), protos, head, &labels);
  return ad::cross_entropy_with_logits(s.logits, labels, s.mask);
}

struct DpLoss {
  Var total;
  Var domain;
  Var proto;
  Var proto_cls;
};

inline DpLoss dp_loss(const Var& domains, const PrototypeVars& protos, const PairChoice& pc, const DpConfig& config,
                      const HeadVars& head) {
  DpLoss out;
  out.domain = domain_diversity_loss(domains, config.tau_domain);
  out.proto = prototype_consistency_loss(protos.object, domains, pc, config.tau_proto).value;
  out.proto_cls = perturbed_classification_loss(protos, domains, pc, head);
  out.total = ad::add(ad::add(out.domain, out.proto), out.proto_cls);
  return out;
}

}  // namespace cdvito
