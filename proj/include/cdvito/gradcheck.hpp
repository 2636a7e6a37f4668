#pragma once

// Finite-difference audit of every training loss on small random fixtures.
// Each loss is checked with respect to all parameter groups at once.

#include <cstdint>
#include <string>
#include <vector>

#include "cdvito/autodiff.hpp"
#include "cdvito/finetune.hpp"

namespace cdvito {

enum class CheckedLoss { cls, loc, domain, proto, proto_cls, total };

inline std::string loss_name(CheckedLoss l) {
  switch (l) {
    case CheckedLoss::cls: return "L_cls";
    case CheckedLoss::loc: return "L_loc";
    case CheckedLoss::domain: return "L_domain";
    case CheckedLoss::proto: return "L_proto";
    case CheckedLoss::proto_cls: return "L_proto_cls";
    case CheckedLoss::total: return "L";
  }
  return "?";
}

inline std::vector<CheckedLoss> all_checked_losses() {
  return {CheckedLoss::cls,   CheckedLoss::loc,       CheckedLoss::domain,
          CheckedLoss::proto, CheckedLoss::proto_cls, CheckedLoss::total};
}

struct GradCheckFixture {
  AdaptationParams params;
  TrainingBatch batch;
  PairChoice pairs;
  FinetuneConfig config;
};

// N=6 so the Top-K mask (5 of 6) is exercised; parameters are drawn away from
// their usual initial values so every term has non-trivial curvature.
inline GradCheckFixture make_gradcheck_fixture(std::uint64_t seed, std::size_t n_way = 6, std::size_t k_shot = 2,
                                               std::size_t dim = 6, std::size_t n_bg = 4) {
  Rng rng(seed);
  GradCheckFixture f;
  f.config.seed = seed;
  AdaptationParams& p = f.params;
  p.n_way = n_way;
  p.k_shot = k_shot;
  p.dim = dim;
  for (std::size_t c = 0; c < n_way; ++c) p.class_names.push_back("c" + std::to_string(c));
  p.active = ModuleSet::all();
  p.instances = LearnableInstances{Matrix(n_way * k_shot + n_bg, dim), n_way, k_shot, n_bg};
  for (double& v : p.instances.matrix.values()) v = rng.normal();
  p.reweight = ReweightParams::init(dim, rng.next_u64(), f.config.alpha, 0.3);
  for (double& v : p.reweight.mlp_w.values()) v = rng.uniform(-1.0, 1.0);
  p.reweight.mlp_b(0, 0) = rng.uniform(-0.5, 0.5);
  p.domains = Matrix(2 * n_way, dim);
  for (double& v : p.domains.values()) v = rng.normal(0.0, 0.3);
  p.head = HeadParams::init(dim, n_way, rng.next_u64(), f.config.cls_temperature);
  p.head.bg_bias(0, 0) = rng.uniform(-0.2, 0.2);
  for (double& v : p.head.box_w.values()) v = rng.normal(0.0, 0.2);
  for (double& v : p.head.box_b.values()) v = rng.normal(0.0, 0.1);

  auto feature = [&] {
    std::vector<double> x(dim);
    for (double& v : x) v = rng.normal();
    return x;
  };
  auto box = [&] {
    const double x = rng.uniform(0.0, 200.0), y = rng.uniform(0.0, 200.0);
    return Box{x, y, x + rng.uniform(20.0, 80.0), y + rng.uniform(20.0, 80.0)};
  };
  for (std::size_t c = 0; c < n_way; ++c) {
    for (std::size_t k = 0; k < k_shot; ++k) {
      const Box gt = box();
      const Box proposal{gt.x_min + rng.uniform(-4.0, 4.0), gt.y_min + rng.uniform(-4.0, 4.0),
                         gt.x_max + rng.uniform(-4.0, 4.0), gt.y_max + rng.uniform(-4.0, 4.0)};
      f.batch.objects.push_back(QueryRegion{feature(), proposal, c, gt, "img"});
    }
  }
  for (std::size_t b = 0; b < 2 * n_bg; ++b)
    f.batch.backgrounds.push_back(QueryRegion{feature(), box(), kBackgroundLabel, std::nullopt, "bg"});
  f.pairs = sample_pairs(n_way, p.domains.rows(), rng);
  return f;
}

inline std::vector<Matrix> fixture_point(const GradCheckFixture& f) {
  std::vector<Matrix> point;
  for (const auto& [name, m] : f.params.named()) point.push_back(*m);
  return point;
}

// Leaves follow AdaptationParams::named() order.
inline ad::LossFn loss_closure(const GradCheckFixture& f, CheckedLoss which) {
  return [&f, which](Tape&, std::span<const Var> l) {
    const AdaptationParams& p = f.params;
    const ParamVars v{l[0], ReweightVars{l[1], l[2], l[3], l[4], p.reweight.alpha}, l[5],
                      HeadVars{l[6], l[7], l[8], p.head.cls_temperature, p.head.top_k}};
    const PrototypeVars protos = forward_prototypes(v, p, true).protos;
    const DpConfig dp = f.config.dp_config();
    switch (which) {
      case CheckedLoss::cls: return balanced_classification_loss(f.batch, protos, v.head);
      case CheckedLoss::loc: return localization_loss(f.batch.objects, protos, v.head);
      case CheckedLoss::domain: return domain_diversity_loss(v.domains, dp.tau_domain);
      case CheckedLoss::proto: return prototype_consistency_loss(protos.object, v.domains, f.pairs, dp.tau_proto).value;
      case CheckedLoss::proto_cls: return perturbed_classification_loss(protos, v.domains, f.pairs, v.head);
      case CheckedLoss::total: return training_objective(v, p, f.batch, f.config, &f.pairs).total;
    }
    throw ContractError("unknown loss");
  };
}

struct GradCheckSummary {
  CheckedLoss loss = CheckedLoss::total;
  std::size_t fixtures = 0;
  double max_relative_error = 0.0;
};

inline std::vector<GradCheckSummary> gradcheck_all(std::size_t fixtures, std::uint64_t seed = 0, double eps = 1e-5) {
  std::vector<GradCheckSummary> out;
  for (CheckedLoss which : all_checked_losses()) out.push_back({which, fixtures, 0.0});
  for (std::size_t i = 0; i < fixtures; ++i) {
    const GradCheckFixture f = make_gradcheck_fixture(derive_seed(seed, i));
    const std::vector<Matrix> point = fixture_point(f);
    for (GradCheckSummary& s : out) {
      const double err = ad::grad_check(loss_closure(f, s.loss), point, eps);
      s.max_relative_error = std::max(s.max_relative_error, err);
    }
  }
  return out;
}

}  // namespace cdvito
