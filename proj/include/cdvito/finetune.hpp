#pragma once

// Full-batch SGD finetuning of the adaptation parameters on a support episode.

#include <array>
#include <chrono>
#include <cstdint>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cdvito/adaptation_head.hpp"
#include "cdvito/autodiff.hpp"
#include "cdvito/detection_heads.hpp"
#include "cdvito/domain_prompter.hpp"
#include "cdvito/error.hpp"
#include "cdvito/feature_store.hpp"
#include "cdvito/rng.hpp"

namespace cdvito {

enum class Module : unsigned { heads = 1u, lif = 2u, ir = 4u, dp = 8u };

class ModuleSet {
 public:
  constexpr ModuleSet() = default;
  constexpr ModuleSet(std::initializer_list<Module> mods) {
    for (Module m : mods) bits_ |= static_cast<unsigned>(m);
  }
  static constexpr ModuleSet all() { return {Module::heads, Module::lif, Module::ir, Module::dp}; }

  constexpr bool has(Module m) const noexcept { return (bits_ & static_cast<unsigned>(m)) != 0; }
  constexpr bool empty() const noexcept { return bits_ == 0; }
  constexpr void insert(Module m) noexcept { bits_ |= static_cast<unsigned>(m); }
  constexpr void erase(Module m) noexcept { bits_ &= ~static_cast<unsigned>(m); }
  constexpr unsigned bits() const noexcept { return bits_; }

  // Comma-separated names, e.g. "heads,lif,ir,dp"; "none" when empty.
  std::string to_string() const {
    std::string s;
    for (const auto& [m, name] : names())
      if (has(m)) s += (s.empty() ? "" : ",") + std::string(name);
    return s.empty() ? "none" : s;
  }

  static ModuleSet parse(const std::string& text) {
    ModuleSet out;
    if (text == "none" || text.empty()) return out;
    if (text == "all") return all();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      bool found = false;
      for (const auto& [m, name] : names()) {
        if (item == name) {
          out.insert(m);
          found = true;
        }
      }
      if (!found) throw ConfigError("unknown module '" + item + "' (expected heads, lif, ir, dp)");
    }
    return out;
  }

  friend constexpr bool operator==(ModuleSet, ModuleSet) = default;

 private:
  static constexpr std::array<std::pair<Module, const char*>, 4> names() {
    return {{{Module::heads, "heads"}, {Module::lif, "lif"}, {Module::ir, "ir"}, {Module::dp, "dp"}}};
  }
  unsigned bits_ = 0;
};

struct FinetuneConfig {
  double lr = 0.002;
  std::optional<std::size_t> epochs;  // default: 80 for 1-shot, otherwise 40
  double alpha = 0.7;
  double tau_proto = 2.0;
  double tau_domain = 0.1;
  std::size_t n_bg = 530;
  double cls_temperature = 0.1;
  ModuleSet enabled = ModuleSet::all();
  std::uint64_t seed = 0;

  std::size_t resolved_epochs(std::size_t k_shot) const { return epochs ? *epochs : (k_shot == 1 ? 80 : 40); }

  void validate(std::size_t n_way) const {
    if (enabled.empty()) throw ConfigError("no modules enabled for finetuning");
    if (enabled.has(Module::dp) && n_way < 2) throw ConfigError("domain prompter needs at least two classes");
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (!(tau_proto > 0.0) || !(tau_domain > 0.0) || !(cls_temperature > 0.0))
      throw ConfigError("temperatures must be positive");
  }

  DpConfig dp_config() const { return DpConfig{tau_domain, tau_proto, 2, 0.02}; }
};

// The domain prompter is meaningless with a single class; drop it there.
inline FinetuneConfig effective_config(FinetuneConfig config, std::size_t n_way) {
  if (n_way < 2) config.enabled.erase(Module::dp);
  return config;
}

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"alpha", c.alpha},
                     {"tau_proto", c.tau_proto},
                     {"tau_domain", c.tau_domain},
                     {"n_bg", c.n_bg},
                     {"cls_temperature", c.cls_temperature},
                     {"enabled_modules", c.enabled.to_string()},
                     {"seed", c.seed}};
  if (c.epochs) j["epochs"] = *c.epochs;
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  static const std::array<const char*, 9> known{"lr",  "epochs", "alpha", "tau_proto", "tau_domain",
                                                 "n_bg", "cls_temperature", "enabled_modules", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    c.lr = j.value("lr", c.lr);
    if (j.contains("epochs") && !j["epochs"].is_null()) c.epochs = j["epochs"].get<std::size_t>();
    c.alpha = j.value("alpha", c.alpha);
    c.tau_proto = j.value("tau_proto", c.tau_proto);
    c.tau_domain = j.value("tau_domain", c.tau_domain);
    c.n_bg = j.value("n_bg", c.n_bg);
    c.cls_temperature = j.value("cls_temperature", c.cls_temperature);
    if (j.contains("enabled_modules")) c.enabled = ModuleSet::parse(j["enabled_modules"].get<std::string>());
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
}

// Every trainable tensor of one adaptation run.
struct AdaptationParams {
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t dim = 0;
  std::vector<std::string> class_names;
  ModuleSet active;  // modules shaping inference (reweighting on/off)
  LearnableInstances instances;
  ReweightParams reweight;
  Matrix domains;
  HeadParams head;

  std::size_t n_bg() const noexcept { return instances.n_bg; }

  // Fixed order used by checkpoints and checksums.
  std::vector<std::pair<std::string, const Matrix*>> named() const {
    return {{"instances", &instances.matrix}, {"ir.mlp_w", &reweight.mlp_w}, {"ir.mlp_b", &reweight.mlp_b},
            {"ir.fuse_w", &reweight.fuse_w},   {"ir.fuse_b", &reweight.fuse_b}, {"dp.domains", &domains},
            {"head.bg_bias", &head.bg_bias},   {"head.box_w", &head.box_w},     {"head.box_b", &head.box_b}};
  }
  std::vector<std::pair<std::string, Matrix*>> named_mut() {
    std::vector<std::pair<std::string, Matrix*>> out;
    for (const auto& [name, m] : std::as_const(*this).named()) out.emplace_back(name, const_cast<Matrix*>(m));
    return out;
  }
};

namespace detail {
inline constexpr std::uint64_t kReweightInitStream = 11;
inline constexpr std::uint64_t kHeadInitStream = 12;
inline constexpr std::uint64_t kDomainInitStream = 13;
inline constexpr std::uint64_t kPairStream = 14;
}  // namespace detail

inline AdaptationParams init_params(const Episode& episode, const FinetuneConfig& config) {
  AdaptationParams p;
  p.n_way = episode.n_way();
  p.k_shot = episode.k_shot();
  p.dim = episode.dim;
  p.class_names = episode.class_names;
  p.active = config.enabled;
  p.instances = init_learnable_instances(episode);
  p.reweight = ReweightParams::init(p.dim, derive_seed(config.seed, detail::kReweightInitStream), config.alpha);
  p.head = HeadParams::init(p.dim, p.n_way, derive_seed(config.seed, detail::kHeadInitStream), config.cls_temperature);
  p.domains = init_domains(p.n_way, p.dim, config.dp_config(), derive_seed(config.seed, detail::kDomainInitStream));
  return p;
}

// Base path without any finetuning: mean prototypes and the single-candidate
// Top-K used for direct inference.
inline AdaptationParams frozen_params(const Episode& episode, const FinetuneConfig& config = {}) {
  AdaptationParams p = init_params(episode, config);
  p.active = ModuleSet{};
  p.head.top_k = 1;
  return p;
}

// Tape handles for every parameter group.
struct ParamVars {
  Var instances;
  ReweightVars reweight;
  Var domains;
  HeadVars head;
};

inline ParamVars params_on(Tape& tape, const AdaptationParams& p, ModuleSet trainable) {
  return {tape.leaf(p.instances.matrix, trainable.has(Module::lif)),
          ReweightVars::on(tape, p.reweight, trainable.has(Module::ir)),
          tape.leaf(p.domains, trainable.has(Module::dp)), HeadVars::on(tape, p.head, trainable.has(Module::heads))};
}

struct PrototypeForward {
  PrototypeVars protos;
  std::optional<Matrix> weights;  // reweighting softmax, N x K, when active
};

inline PrototypeForward forward_prototypes(const ParamVars& v, const AdaptationParams& p, bool use_reweighting) {
  const std::size_t obj_rows = p.instances.object_rows();
  PrototypeForward out;
  Var object;
  if (use_reweighting) {
    ReweightResult rr = reweight_prototypes(v.instances, p.n_way, p.k_shot, v.reweight);
    object = rr.prototypes;
    out.weights = std::move(rr.weights);
  } else {
    object = mean_prototypes(v.instances, p.n_way, p.k_shot);
  }
  out.protos = assemble_prototypes(object, v.instances, obj_rows, p.n_bg());
  return out;
}

inline PrototypeSet build_prototypes(const AdaptationParams& p) {
  Tape tape;
  const ParamVars v = params_on(tape, p, ModuleSet{});
  return to_prototype_set(forward_prototypes(v, p, p.active.has(Module::ir)).protos, p.class_names);
}

// Reweighting softmax weights (N x K) under the current parameters.
inline Matrix instance_weights(const AdaptationParams& p) {
  Tape tape;
  const ParamVars v = params_on(tape, p, ModuleSet{});
  return reweight_prototypes(v.instances, p.n_way, p.k_shot, v.reweight).weights;
}

// Support instances serve as the labelled regions: one object region per
// support record and one background region per background record.
struct TrainingBatch {
  std::vector<QueryRegion> objects;
  std::vector<QueryRegion> backgrounds;
};

inline TrainingBatch build_training_batch(const Episode& episode) {
  TrainingBatch b;
  for (const EpisodeRecord& r : episode.support)
    b.objects.push_back(QueryRegion{r.embedding, r.box, r.label, r.box, r.image_id});
  for (const EpisodeRecord& r : episode.background)
    b.backgrounds.push_back(QueryRegion{r.embedding, r.box, kBackgroundLabel, std::nullopt, r.image_id});
  return b;
}

struct EpochLosses {
  double total = 0.0;
  double loc = 0.0;
  double cls = 0.0;
  double domain = 0.0;
  double proto = 0.0;
  double proto_cls = 0.0;
};

struct TrainLog {
  std::vector<EpochLosses> epochs;
  double wall_seconds = 0.0;

  // One JSON object per epoch. Wall time is left out so logs of identical
  // runs compare byte for byte.
  void write_jsonl(std::ostream& os) const {
    for (std::size_t i = 0; i < epochs.size(); ++i) {
      const EpochLosses& e = epochs[i];
      nlohmann::json j{{"epoch", i},          {"L", e.total},         {"L_loc", e.loc},
                       {"L_cls", e.cls},      {"L_domain", e.domain}, {"L_proto", e.proto},
                       {"L_proto_cls", e.proto_cls}};
      os << j.dump() << '\n';
    }
  }
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, TrainLog log) : Error(what), log_(std::move(log)) {}
  const TrainLog& log() const noexcept { return log_; }

 private:
  TrainLog log_;
};

struct ObjectiveTerms {
  Var total;
  Var loc;
  Var cls;
  std::optional<DpLoss> dp;
};

// Class-balanced classification term: object regions and background regions
// are averaged separately and the two means added, so the few object regions
// are not drowned out by hundreds of background crops.
inline Var balanced_classification_loss(const TrainingBatch& batch, const PrototypeVars& protos,
                                        const HeadVars& head) {
  const bool with_bg = !batch.backgrounds.empty() && protos.background.has_value();
  if (batch.objects.empty() && !with_bg) throw ContractError("training batch has no usable regions");
  if (batch.objects.empty()) return classification_loss(batch.backgrounds, protos, head);
  Var cls = classification_loss(batch.objects, protos, head);
  if (with_bg) cls = ad::add(cls, classification_loss(batch.backgrounds, protos, head));
  return cls;
}

// L = L_loc + L_cls (+ L_dp).
inline ObjectiveTerms training_objective(const ParamVars& v, const AdaptationParams& p, const TrainingBatch& batch,
                                         const FinetuneConfig& config, const PairChoice* pairs) {
  const PrototypeForward fwd = forward_prototypes(v, p, p.active.has(Module::ir));
  ObjectiveTerms t;
  t.cls = balanced_classification_loss(batch, fwd.protos, v.head);
  t.loc = localization_loss(batch.objects, fwd.protos, v.head);
  std::optional<Var> dp_total;
  if (pairs) {
    t.dp = dp_loss(v.domains, fwd.protos, *pairs, config.dp_config(), v.head);
    dp_total = t.dp->total;
  }
  t.total = total_loss(t.loc, t.cls, dp_total);
  return t;
}

// p <- p - lr * g.
inline void sgd_step(Matrix& param, const Matrix& grad, double lr) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols())
    throw ShapeError("sgd_step: parameter " + param.shape_string() + " vs gradient " + grad.shape_string());
  for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr * grad[i];
}

struct FinetuneResult {
  AdaptationParams params;
  TrainLog log;
};

// Called after each epoch with the epoch index and the updated parameters.
using EpochObserver = std::function<void(std::size_t, const AdaptationParams&)>;

inline FinetuneResult finetune(const Episode& episode, const FinetuneConfig& config,
                               const EpochObserver& observer = {}) {
  config.validate(episode.n_way());
  const auto start = std::chrono::steady_clock::now();
  FinetuneResult r{init_params(episode, config), {}};
  AdaptationParams& p = r.params;
  const TrainingBatch batch = build_training_batch(episode);
  const bool use_dp = config.enabled.has(Module::dp);
  Rng pair_rng(derive_seed(config.seed, detail::kPairStream));
  const std::size_t epochs = config.resolved_epochs(episode.k_shot());

  for (std::size_t e = 0; e < epochs; ++e) {
    std::optional<PairChoice> pairs;
    if (use_dp) pairs = sample_pairs(p.n_way, p.domains.rows(), pair_rng);
    try {
      Tape tape;
      const ParamVars v = params_on(tape, p, config.enabled);
      const ObjectiveTerms t = training_objective(v, p, batch, config, pairs ? &*pairs : nullptr);
      EpochLosses losses{t.total.item(), t.loc.item(), t.cls.item(), 0.0, 0.0, 0.0};
      if (t.dp) {
        losses.domain = t.dp->domain.item();
        losses.proto = t.dp->proto.item();
        losses.proto_cls = t.dp->proto_cls.item();
      }
      const ad::Gradients g = tape.backward(t.total);
      std::vector<std::pair<Matrix*, Matrix>> updates;
      auto stage = [&](const Var& var, Matrix& target) {
        if (g.contains(var)) updates.emplace_back(&target, g[var]);
      };
      stage(v.instances, p.instances.matrix);
      stage(v.reweight.mlp_w, p.reweight.mlp_w);
      stage(v.reweight.mlp_b, p.reweight.mlp_b);
      stage(v.reweight.fuse_w, p.reweight.fuse_w);
      stage(v.reweight.fuse_b, p.reweight.fuse_b);
      stage(v.domains, p.domains);
      stage(v.head.bg_bias, p.head.bg_bias);
      stage(v.head.box_w, p.head.box_w);
      stage(v.head.box_b, p.head.box_b);
      for (const auto& [target, grad] : updates) {
        if (!grad.all_finite()) throw NumericError("non-finite gradient");
      }
      for (auto& [target, grad] : updates) sgd_step(*target, grad, config.lr);
      r.log.epochs.push_back(losses);
    } catch (const NumericError& err) {
      throw TrainingError("training diverged at epoch " + std::to_string(e) + ": " + err.what(), r.log);
    }
    for (const auto& [name, m] : std::as_const(p).named()) {
      if (!m->all_finite())
        throw TrainingError("training diverged at epoch " + std::to_string(e) + ": " + name + " non-finite", r.log);
    }
    if (observer) observer(e, p);
  }
  r.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CKP1", u32 little-endian JSON length, JSON metadata, then each
// named parameter as rows*cols little-endian binary64 values in metadata order.

inline constexpr std::array<char, 4> kCheckpointMagic{'C', 'K', 'P', '1'};

inline void write_checkpoint(std::ostream& os, const AdaptationParams& p) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, m] : p.named()) params.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
  const nlohmann::json meta{{"format", "cdvito-checkpoint"},
                            {"n_way", p.n_way},
                            {"k_shot", p.k_shot},
                            {"n_bg", p.n_bg()},
                            {"dim", p.dim},
                            {"class_names", p.class_names},
                            {"active_modules", p.active.to_string()},
                            {"alpha", p.reweight.alpha},
                            {"cls_temperature", p.head.cls_temperature},
                            {"top_k", p.head.top_k},
                            {"parameters", params}};
  const std::string text = meta.dump();
  os.write(kCheckpointMagic.data(), 4);
  detail::write_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : p.named())
    os.write(reinterpret_cast<const char*>(m->values().data()), static_cast<std::streamsize>(m->size() * 8));
  if (!os) throw Error("failed writing checkpoint");
}

inline AdaptationParams read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) throw FormatError("bad magic: not a checkpoint");
  const std::uint32_t len = detail::read_u32(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), len)) throw FormatError("truncated checkpoint metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
  AdaptationParams p;
  p.n_way = detail::json_field<std::size_t>(meta, "n_way");
  p.k_shot = detail::json_field<std::size_t>(meta, "k_shot");
  p.dim = detail::json_field<std::size_t>(meta, "dim");
  p.class_names = detail::json_field<std::vector<std::string>>(meta, "class_names");
  p.active = ModuleSet::parse(detail::json_field<std::string>(meta, "active_modules"));
  p.instances.n_way = p.n_way;
  p.instances.k_shot = p.k_shot;
  p.instances.n_bg = detail::json_field<std::size_t>(meta, "n_bg");
  p.reweight.alpha = detail::json_field<double>(meta, "alpha");
  p.head.cls_temperature = detail::json_field<double>(meta, "cls_temperature");
  p.head.top_k = detail::json_field<std::size_t>(meta, "top_k");
  const auto entries = detail::json_field<nlohmann::json>(meta, "parameters");
  auto slots = p.named_mut();
  if (!entries.is_array() || entries.size() != slots.size()) throw FormatError("checkpoint parameter list mismatch");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (detail::json_field<std::string>(entries[i], "name") != slots[i].first)
      throw FormatError("checkpoint parameter " + std::to_string(i) + " is not '" + slots[i].first + "'");
    const auto rows = detail::json_field<std::size_t>(entries[i], "rows");
    const auto cols = detail::json_field<std::size_t>(entries[i], "cols");
    Matrix m(rows, cols);
    if (!is.read(reinterpret_cast<char*>(m.values().data()), static_cast<std::streamsize>(m.size() * 8)))
      throw FormatError("truncated payload for '" + slots[i].first + "'");
    *slots[i].second = std::move(m);
  }
  if (p.instances.matrix.rows() != p.n_way * p.k_shot + p.instances.n_bg)
    throw FormatError("instance matrix does not match n_way * k_shot + n_bg");
  return p;
}

}  // namespace cdvito
