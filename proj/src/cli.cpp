#include "cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "cdvito/domain_metrics.hpp"
#include "cdvito/evaluator.hpp"
#include "cdvito/finetune.hpp"
#include "cdvito/gradcheck.hpp"
#include "cdvito/synth.hpp"

namespace cdvito::cli {

namespace {

using nlohmann::json;

// Flag combinations that parse but make no sense together.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpisodeFlags {
  std::string pack;
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_bg;
  std::vector<std::size_t> classes;
};

struct ConfigFlags {
  std::string path;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::string> modules;
};

struct OutputFlags {
  std::string format = "table";
  std::string iou = "coco";
  std::string csv;
  std::string manifest;
};

void add_episode_flags(CLI::App* app, EpisodeFlags& f) {
  app->add_option("--pack", f.pack, "Feature pack (FPK1)")->required()->check(CLI::ExistingFile);
  app->add_option("--n", f.n_way, "Classes per episode (N-way)")->capture_default_str();
  app->add_option("--k", f.k_shot, "Support instances per class (K-shot)")->capture_default_str();
  app->add_option("--seed", f.seed, "Seed for episode sampling and parameter init (default: config seed)");
  app->add_option("--n-bg", f.n_bg, "Background instances (default: config n_bg, 530)");
  app->add_option("--classes", f.classes, "Explicit pack class indices (default: the N smallest)")->delimiter(',');
}

void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.path, "JSON file mirroring the finetune configuration")->check(CLI::ExistingFile);
  app->add_option("--epochs", f.epochs, "Epochs (default: 80 for 1-shot, else 40)");
  app->add_option("--lr", f.lr, "SGD learning rate (default 0.002)");
  app->add_option("--modules", f.modules, "Trainable modules, e.g. heads,lif,ir,dp");
}

void add_output_flags(CLI::App* app, OutputFlags& f) {
  app->add_option("--format", f.format, "Report format")->check(CLI::IsMember({"table", "json", "csv"}))->capture_default_str();
  app->add_option("--iou", f.iou, "IoU thresholds: coco (0.50:0.95) or 50")
      ->check(CLI::IsMember({"coco", "50"}))
      ->capture_default_str();
  app->add_option("--emit-csv", f.csv, "Also write the reports as CSV to this path");
  app->add_option("--manifest", f.manifest, "Write a run manifest to this path");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw Error("cannot write '" + path + "'");
}

json read_json(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("'" + path + "' is not valid JSON: " + e.what());
  }
}

FinetuneConfig resolve_config(const ConfigFlags& f, const EpisodeFlags& ep) {
  FinetuneConfig c;
  if (!f.path.empty()) from_json(read_json(f.path), c);
  if (f.epochs) c.epochs = *f.epochs;
  if (f.lr) c.lr = *f.lr;
  if (f.modules) c.enabled = ModuleSet::parse(*f.modules);
  if (ep.seed) c.seed = *ep.seed;
  if (ep.n_bg) c.n_bg = *ep.n_bg;
  return c;
}

EpisodeSpec episode_spec(const EpisodeFlags& f, const FinetuneConfig& c) {
  return EpisodeSpec{f.n_way, f.k_shot, c.n_bg, c.seed, f.classes};
}

std::vector<double> thresholds(const OutputFlags& f) {
  return f.iou == "50" ? std::vector<double>{0.5} : coco_iou_thresholds();
}

std::size_t resolve_workers(std::optional<std::size_t> flag) {
  if (flag) return std::max<std::size_t>(1, *flag);
  if (const char* env = std::getenv(kWorkersEnv)) {
    try {
      return std::max<std::size_t>(1, std::stoul(env));
    } catch (const std::exception&) {
      throw UsageError(std::string(kWorkersEnv) + " must be a positive integer");
    }
  }
  return 1;
}

struct RunManifest {
  std::vector<std::string> argv;
  json config = json::object();
  json seeds = json::object();
  std::map<std::string, std::string> inputs;  // path -> sha256

  void add_input(const std::string& path) { inputs[path] = file_sha256(path); }

  json to_json() const {
    return {{"artifact_version", kArtifactVersion}, {"command", argv.empty() ? "" : argv.front()},
            {"argv", argv},                         {"config", config},
            {"seeds", seeds},                       {"input_digests", inputs}};
  }

  void write(const std::string& path) const {
    if (!path.empty()) write_file(path, to_json().dump(2) + "\n");
  }
};

void emit_reports(std::ostream& out, const std::vector<EvalReport>& reports, const OutputFlags& f) {
  if (f.format == "json") {
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(r.to_json());
    out << arr.dump(2) << '\n';
  } else if (f.format == "csv") {
    write_csv(out, reports);
  } else {
    write_table(out, reports);
  }
  if (!f.csv.empty()) {
    std::ostringstream csv;
    write_csv(csv, reports);
    write_file(f.csv, csv.str());
  }
}

// Runs jobs on up to `workers` threads and returns results in job order.
template <typename T>
std::vector<T> fan_out(const std::vector<std::function<T()>>& jobs, std::size_t workers) {
  std::vector<T> out;
  for (std::size_t begin = 0; begin < jobs.size(); begin += workers) {
    std::vector<std::future<T>> running;
    for (std::size_t i = begin; i < std::min(jobs.size(), begin + workers); ++i)
      running.push_back(std::async(workers == 1 ? std::launch::deferred : std::launch::async, jobs[i]));
    for (auto& r : running) out.push_back(r.get());
  }
  return out;
}

json episode_json(const Episode& ep) {
  auto records = [](const std::vector<EpisodeRecord>& rs) {
    json a = json::array();
    for (const auto& r : rs)
      a.push_back({{"record_id", r.record_id}, {"label", r.label ? json(*r.label) : json()}, {"image_id", r.image_id}});
    return a;
  };
  json bg = json::array();
  for (const auto& r : ep.background) bg.push_back(r.record_id);
  return {{"n_way", ep.n_way()},
          {"k_shot", ep.k_shot()},
          {"n_bg", ep.n_bg()},
          {"seed", ep.spec.seed},
          {"classes", ep.class_indices},
          {"class_names", ep.class_names},
          {"fingerprint", ep.fingerprint()},
          {"support", records(ep.support)},
          {"background", bg},
          {"query", records(ep.query)}};
}

json summary_json(const PackSummary& s) {
  return {{"dataset_id", s.dataset_id}, {"dim", s.dim},
          {"records", s.records},       {"backgrounds", s.backgrounds},
          {"per_class", s.per_class},   {"no_background", s.no_background},
          {"single_class", s.single_class}};
}

// --- subcommands -----------------------------------------------------------

int cmd_pack_validate(const std::string& path, bool raw, std::ostream& out) {
  const FeaturePack pack = load_feature_pack(path, raw ? Normalization::none : Normalization::l2);
  validate_pack(pack);
  json j = summary_json(summarize_pack(pack));
  j["sha256"] = file_sha256(path);
  out << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_episode(const EpisodeFlags& ef, const ConfigFlags& cf, const std::string& out_path, std::ostream& out) {
  const FinetuneConfig cfg = resolve_config(cf, ef);
  const Episode ep = sample_episode(load_feature_pack(ef.pack), episode_spec(ef, cfg));
  const std::string text = episode_json(ep).dump(2) + "\n";
  if (out_path.empty()) out << text;
  else write_file(out_path, text);
  return kExitOk;
}

int cmd_finetune(const std::vector<std::string>& argv, const EpisodeFlags& ef, const ConfigFlags& cf,
                 const std::string& out_dir, std::ostream& out) {
  FinetuneConfig cfg = resolve_config(cf, ef);
  const Episode ep = sample_episode(load_feature_pack(ef.pack), episode_spec(ef, cfg));
  cfg.validate(ep.n_way());
  const FinetuneResult r = finetune(ep, cfg);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  std::ostringstream ckpt, log;
  write_checkpoint(ckpt, r.params);
  r.log.write_jsonl(log);
  write_file((dir / "checkpoint.ckp").string(), ckpt.str());
  write_file((dir / "train_log.jsonl").string(), log.str());

  RunManifest m{argv, json(cfg), {{"seed", cfg.seed}, {"episode_fingerprint", ep.fingerprint()}}, {}};
  m.add_input(ef.pack);
  if (!cf.path.empty()) m.add_input(cf.path);
  m.write((dir / "manifest.json").string());

  const EpochLosses& last = r.log.epochs.back();
  out << "epochs " << r.log.epochs.size() << " final_L " << format_fixed(last.total, 6) << " L_cls "
      << format_fixed(last.cls, 6) << " L_loc " << format_fixed(last.loc, 6) << '\n';
  return kExitOk;
}

int cmd_eval(const std::vector<std::string>& argv, const EpisodeFlags& ef, const ConfigFlags& cf,
             const OutputFlags& of, const std::string& checkpoint, const std::string& stage_text,
             std::size_t episodes, std::optional<std::size_t> workers_flag, std::ostream& out) {
  if (episodes == 0) throw UsageError("--episodes must be at least 1");
  if (!checkpoint.empty() && episodes != 1) throw UsageError("--checkpoint evaluates a single episode");
  const FinetuneConfig cfg = resolve_config(cf, ef);
  const Stage stage = parse_stage(stage_text);
  const FeaturePack pack = load_feature_pack(ef.pack);
  const std::vector<double> thr = thresholds(of);

  std::vector<std::function<EvalReport()>> jobs;
  json seeds = json::array();
  for (std::size_t e = 0; e < episodes; ++e) {
    FinetuneConfig c = cfg;
    c.seed = cfg.seed + e;
    seeds.push_back(c.seed);
    jobs.push_back([&pack, &ef, &checkpoint, &thr, c, stage] {
      const Episode ep = sample_episode(pack, episode_spec(ef, c));
      if (checkpoint.empty()) return run_stage(ep, c, stage, thr);
      std::ifstream in(checkpoint, std::ios::binary);
      if (!in) throw ValidationError("cannot open '" + checkpoint + "'");
      const AdaptationParams p = read_checkpoint(in);
      if (p.class_names != ep.class_names || p.k_shot != ep.k_shot() || p.dim != ep.dim)
        throw ValidationError("checkpoint does not match the sampled episode");
      EvalReport rep = evaluate_episode(p, ep, thr);
      rep.stage = "checkpoint";
      return rep;
    });
  }
  const std::vector<EvalReport> reports = fan_out(jobs, resolve_workers(workers_flag));
  emit_reports(out, reports, of);

  RunManifest m{argv, json(cfg), {{"episode_seeds", seeds}}, {}};
  m.add_input(ef.pack);
  if (!checkpoint.empty()) m.add_input(checkpoint);
  if (!cf.path.empty()) m.add_input(cf.path);
  m.write(of.manifest);
  return kExitOk;
}

int cmd_ablate(const std::vector<std::string>& argv, const EpisodeFlags& ef, const ConfigFlags& cf,
               const OutputFlags& of, const std::vector<std::string>& stage_names,
               std::optional<std::size_t> workers_flag, std::ostream& out) {
  const FinetuneConfig cfg = resolve_config(cf, ef);
  std::vector<Stage> stages;
  for (const auto& s : stage_names) stages.push_back(parse_stage(s));
  const Episode ep = sample_episode(load_feature_pack(ef.pack), episode_spec(ef, cfg));
  const std::vector<EvalReport> reports = run_ablation(ep, cfg, stages, thresholds(of), resolve_workers(workers_flag));
  emit_reports(out, reports, of);

  RunManifest m{argv, json(cfg), {{"seed", cfg.seed}, {"episode_fingerprint", ep.fingerprint()}}, {}};
  m.add_input(ef.pack);
  if (!cf.path.empty()) m.add_input(cf.path);
  m.write(of.manifest);
  return kExitOk;
}

int cmd_icv(const std::string& path, double low, double high, std::ostream& out) {
  const FeaturePack pack = load_feature_pack(path, Normalization::none);
  std::vector<const FeatureRecord*> rows;
  for (const auto& r : pack.records)
    if (r.is_object()) rows.push_back(&r);
  ad::Matrix f(rows.size(), pack.dim);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(rows[i]->embedding.begin(), rows[i]->embedding.end(), f.row(i).begin());
  const std::optional<double> v = icv(f);
  if (!v) {
    out << "n/a\n";
    return kExitOk;
  }
  out << format_fixed(*v, 6) << ' ' << to_string(icv_level(*v, low, high)) << '\n';
  return kExitOk;
}

std::array<double, 3> survey_entry(const json& j) {
  if (j.is_array() && j.size() == 3) return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
  if (j.is_object() && j.contains("slight"))
    return {j.at("slight").get<double>(), j.at("moderate").get<double>(), j.at("significant").get<double>()};
  throw ValidationError("survey entry must be [slight, moderate, significant] or an object with those keys");
}

int cmd_ib(const std::string& path, std::ostream& out) {
  const json j = read_json(path);
  auto line = [&out](const std::array<double, 3>& p) {
    const double s = ib_score(p[0], p[1], p[2]);
    out << format_fixed(s, 3) << ' ' << to_string(ib_level(s)) << '\n';
  };
  try {
    if (j.is_array() || (j.is_object() && j.contains("slight"))) {
      line(survey_entry(j));
      return kExitOk;
    }
    if (!j.is_object() || j.empty()) throw ValidationError("survey must map dataset ids to percentages");
    for (const auto& [name, entry] : j.items()) {
      out << name << ' ';
      line(survey_entry(entry));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad survey value: ") + e.what());
  }
  return kExitOk;
}

int cmd_gradcheck(bool all, const std::vector<std::string>& names, std::size_t fixtures, std::uint64_t seed,
                  double tol, std::ostream& out) {
  std::vector<CheckedLoss> losses;
  if (all) losses = all_checked_losses();
  for (const auto& n : names) {
    bool found = false;
    for (CheckedLoss l : all_checked_losses()) {
      if (loss_name(l) == n) {
        losses.push_back(l);
        found = true;
      }
    }
    if (!found) throw UsageError("unknown loss '" + n + "'");
  }
  if (losses.empty()) throw UsageError("pass --all or at least one --loss");
  std::vector<double> worst(losses.size(), 0.0);
  for (std::size_t i = 0; i < fixtures; ++i) {
    const GradCheckFixture f = make_gradcheck_fixture(derive_seed(seed, i));
    const std::vector<ad::Matrix> point = fixture_point(f);
    for (std::size_t l = 0; l < losses.size(); ++l)
      worst[l] = std::max(worst[l], ad::grad_check(loss_closure(f, losses[l]), point, 1e-5));
  }
  bool ok = true;
  for (std::size_t l = 0; l < losses.size(); ++l) {
    const bool pass = worst[l] <= tol;
    ok = ok && pass;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", worst[l]);
    out << loss_name(losses[l]) << ' ' << buf << ' ' << (pass ? "PASS" : "FAIL") << '\n';
  }
  return ok ? kExitOk : kExitValidation;
}

int cmd_synth(const std::vector<std::string>& argv, const SynthConfig& sc, const std::string& out_path,
              const std::string& manifest, std::ostream& out) {
  const FeaturePack pack = make_synthetic_pack(sc);
  save_feature_pack(out_path, pack);
  RunManifest m{argv,
                {{"n_classes", sc.n_classes}, {"dim", sc.dim}, {"per_class", sc.per_class},
                 {"n_background", sc.n_background}, {"objects_per_image", sc.objects_per_image}},
                {{"seed", sc.seed}},
                {}};
  m.write(manifest);
  out << out_path << ' ' << file_sha256(out_path) << '\n';
  return kExitOk;
}

int cmd_replay(const std::string& path, std::ostream& out, std::ostream& err) {
  const json m = read_json(path);
  if (!m.contains("argv") || !m["argv"].is_array()) throw ValidationError("manifest has no argv");
  const auto argv = m["argv"].get<std::vector<std::string>>();
  if (!argv.empty() && argv.front() == "replay") throw ValidationError("manifest replays itself");
  const json digests = m.value("input_digests", json::object());
  for (const auto& [input, digest] : digests.items()) {
    if (file_sha256(input) != digest.get<std::string>())
      throw ValidationError("input '" + input + "' changed since the manifest was written");
  }
  return run(argv, out, err);
}

}  // namespace

std::string file_sha256(const std::string& path) {
  const std::string bytes = read_file(path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed for '" + path + "'");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Feature-space cross-domain few-shot adaptation head", "cdvito"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  auto* pack = app.add_subcommand("pack", "Feature pack utilities");
  pack->require_subcommand(1);
  auto* validate = pack->add_subcommand("validate", "Check a pack and print its summary");
  std::string pack_path;
  bool raw = false;
  validate->add_option("path", pack_path, "Feature pack")->required()->check(CLI::ExistingFile);
  validate->add_flag("--raw", raw, "Keep embeddings unnormalized");

  auto* episode = app.add_subcommand("episode", "Episode utilities");
  episode->require_subcommand(1);
  auto* sample = episode->add_subcommand("sample", "Sample an N-way K-shot episode and print its record ids");
  EpisodeFlags sample_ep;
  ConfigFlags sample_cfg;
  std::string sample_out;
  add_episode_flags(sample, sample_ep);
  sample->add_option("--config", sample_cfg.path, "JSON finetune configuration (seed, n_bg)")
      ->check(CLI::ExistingFile);
  sample->add_option("--out", sample_out, "Write the episode JSON here instead of stdout");

  auto* ft = app.add_subcommand("finetune", "Adapt the head on one episode");
  EpisodeFlags ft_ep;
  ConfigFlags ft_cfg;
  std::string ft_out = "run";
  add_episode_flags(ft, ft_ep);
  add_config_flags(ft, ft_cfg);
  ft->add_option("--out", ft_out, "Output directory for checkpoint, log and manifest")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "Evaluate frozen, finetuned or checkpointed parameters");
  EpisodeFlags ev_ep;
  ConfigFlags ev_cfg;
  OutputFlags ev_out;
  std::string ev_ckpt, ev_stage = "frozen";
  std::size_t ev_episodes = 1;
  std::optional<std::size_t> ev_workers;
  add_episode_flags(ev, ev_ep);
  add_config_flags(ev, ev_cfg);
  add_output_flags(ev, ev_out);
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint from `finetune`")->check(CLI::ExistingFile);
  ev->add_option("--stage", ev_stage, "Stage when no checkpoint: frozen, heads, lif, ir, dp, full")
      ->capture_default_str();
  ev->add_option("--episodes", ev_episodes, "Episodes with seeds seed, seed+1, ...")->capture_default_str();
  ev->add_option("--workers", ev_workers, std::string("Worker threads (default: $") + kWorkersEnv + " or 1)");

  auto* ab = app.add_subcommand("ablate", "Run the cumulative module ablation on one episode");
  EpisodeFlags ab_ep;
  ConfigFlags ab_cfg;
  OutputFlags ab_out;
  std::vector<std::string> ab_stages{"frozen", "FT-heads", "+LIF", "+IR", "+DP"};
  std::optional<std::size_t> ab_workers;
  add_episode_flags(ab, ab_ep);
  add_config_flags(ab, ab_cfg);
  add_output_flags(ab, ab_out);
  ab->add_option("--stages", ab_stages, "Stages in report order")->delimiter(',')->capture_default_str();
  ab->add_option("--workers", ab_workers, std::string("Worker threads (default: $") + kWorkersEnv + " or 1)");

  auto* metrics = app.add_subcommand("metrics", "Domain-gap measures");
  metrics->require_subcommand(1);
  auto* icv_cmd = metrics->add_subcommand("icv", "Inter-class variance of a text-feature pack (raw features)");
  std::string icv_path;
  double icv_low = kIcvLow, icv_high = kIcvHigh;
  icv_cmd->add_option("--features", icv_path, "Text-feature pack, one object record per class")
      ->required()
      ->check(CLI::ExistingFile);
  icv_cmd->add_option("--low", icv_low, "Lower level bound")->capture_default_str();
  icv_cmd->add_option("--high", icv_high, "Upper level bound")->capture_default_str();
  auto* ib_cmd = metrics->add_subcommand("ib", "Indefinable-boundary score from survey percentages");
  std::string ib_path;
  ib_cmd->add_option("--survey", ib_path, "JSON: [slight, moderate, significant] or {dataset: [...]}")
      ->required()
      ->check(CLI::ExistingFile);

  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  bool gc_all = false;
  std::vector<std::string> gc_losses;
  std::size_t gc_fixtures = 20;
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  gc->add_flag("--all", gc_all, "Check every loss");
  gc->add_option("--loss", gc_losses, "Loss to check: L_cls, L_loc, L_domain, L_proto, L_proto_cls, L");
  gc->add_option("--fixtures", gc_fixtures, "Random fixtures per loss")->capture_default_str();
  gc->add_option("--seed", gc_seed, "Fixture seed")->capture_default_str();
  gc->add_option("--tol", gc_tol, "Maximum relative error")->capture_default_str();

  auto* sy = app.add_subcommand("synth", "Generate the synthetic benchmark pack");
  SynthConfig sc;
  std::string sy_out, sy_manifest;
  sy->add_option("--out", sy_out, "Output pack path")->required();
  sy->add_option("--seed", sc.seed, "Generator seed")->capture_default_str();
  sy->add_option("--classes", sc.n_classes, "Classes")->capture_default_str();
  sy->add_option("--dim", sc.dim, "Feature dimension")->capture_default_str();
  sy->add_option("--per-class", sc.per_class, "Object records per class")->capture_default_str();
  sy->add_option("--n-bg", sc.n_background, "Background records")->capture_default_str();
  sy->add_option("--objects-per-image", sc.objects_per_image, "Objects grouped per image")->capture_default_str();
  sy->add_option("--manifest", sy_manifest, "Write a run manifest to this path");

  auto* rp = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  std::string rp_path;
  rp->add_option("manifest", rp_path, "Manifest JSON")->required()->check(CLI::ExistingFile);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*validate) return cmd_pack_validate(pack_path, raw, out);
    if (*sample) return cmd_episode(sample_ep, sample_cfg, sample_out, out);
    if (*ft) return cmd_finetune(args, ft_ep, ft_cfg, ft_out, out);
    if (*ev) return cmd_eval(args, ev_ep, ev_cfg, ev_out, ev_ckpt, ev_stage, ev_episodes, ev_workers, out);
    if (*ab) return cmd_ablate(args, ab_ep, ab_cfg, ab_out, ab_stages, ab_workers, out);
    if (*icv_cmd) return cmd_icv(icv_path, icv_low, icv_high, out);
    if (*ib_cmd) return cmd_ib(ib_path, out);
    if (*gc) return cmd_gradcheck(gc_all, gc_losses, gc_fixtures, gc_seed, gc_tol, out);
    if (*sy) return cmd_synth(args, sc, sy_out, sy_manifest, out);
    if (*rp) return cmd_replay(rp_path, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\nRun with --help for more information.\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitUsage;
}

}  // namespace cdvito::cli
