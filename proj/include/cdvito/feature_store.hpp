#pragma once

// Feature packs: precomputed instance embeddings with object/background roles.
//
// On-disk layout (all integers little-endian):
//   bytes 0..3   magic "FPK1"
//   bytes 4..7   u32 header length H
//   H bytes      UTF-8 JSON header
//                {dataset_id, dim, class_names, record_count,
//                 records: [{role, class_index?, image_id, box?}], no_background?}
//   then         record_count * dim IEEE-754 binary32 values, row-major,
//                in record order.
//
// The raw float rows are kept verbatim so save(load(x)) reproduces x byte for
// byte; the double-precision, L2-normalized copy is what the math consumes.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdvito/error.hpp"
#include "cdvito/rng.hpp"

namespace cdvito {

static_assert(std::endian::native == std::endian::little, "feature packs assume a little-endian host");

inline constexpr std::array<char, 4> kPackMagic{'F', 'P', 'K', '1'};

struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const noexcept { return x_max - x_min; }
  double height() const noexcept { return y_max - y_min; }
  double area() const noexcept { return width() * height(); }
  bool valid() const noexcept { return x_min < x_max && y_min < y_max; }

  friend bool operator==(const Box&, const Box&) = default;
};

enum class Role { object, background };

struct FeatureRecord {
  Role role = Role::object;
  std::size_t class_index = 0;  // meaningful only for Role::object
  std::string image_id;
  std::optional<Box> box;
  std::vector<float> raw;         // as stored on disk
  std::vector<double> embedding;  // widened, normalized per load mode

  bool is_object() const noexcept { return role == Role::object; }
};

enum class Normalization { l2, none };

struct FeaturePack {
  std::string dataset_id;
  std::size_t dim = 0;
  std::vector<std::string> class_names;
  std::vector<FeatureRecord> records;
  bool no_background = false;

  std::size_t class_count() const noexcept { return class_names.size(); }

  std::size_t background_count() const noexcept {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [](const FeatureRecord& r) { return !r.is_object(); }));
  }

  std::vector<std::size_t> records_of_class(std::size_t c) const {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].is_object() && records[i].class_index == c) ids.push_back(i);
    return ids;
  }

  std::vector<std::size_t> background_ids() const {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (!records[i].is_object()) ids.push_back(i);
    return ids;
  }
};

// Fills `embedding` from `raw` for every record. Rejects non-finite values and,
// for L2 mode, zero rows.
inline void widen_embeddings(FeaturePack& pack, Normalization mode) {
  for (std::size_t i = 0; i < pack.records.size(); ++i) {
    FeatureRecord& r = pack.records[i];
    r.embedding.assign(r.raw.begin(), r.raw.end());
    double ss = 0.0;
    for (double v : r.embedding) {
      if (!std::isfinite(v)) throw ValidationError("row " + std::to_string(i) + ": non-finite value");
      ss += v * v;
    }
    if (ss == 0.0) throw ValidationError("row " + std::to_string(i) + ": zero embedding cannot be normalized");
    if (mode == Normalization::l2) {
      const double n = std::sqrt(ss);
      for (double& v : r.embedding) v /= n;
    }
  }
}

// Checks every pack invariant; throws ValidationError naming the first offender.
inline void validate_pack(const FeaturePack& pack) {
  if (pack.dim == 0) throw ValidationError("dim must be positive");
  if (pack.class_names.empty()) throw ValidationError("pack declares no classes");
  std::size_t backgrounds = 0;
  for (std::size_t i = 0; i < pack.records.size(); ++i) {
    const FeatureRecord& r = pack.records[i];
    const std::string where = "row " + std::to_string(i);
    if (r.raw.size() != pack.dim) {
      throw ValidationError(where + ": " + std::to_string(r.raw.size()) + " values, expected dim " +
                            std::to_string(pack.dim));
    }
    for (float v : r.raw)
      if (!std::isfinite(v)) throw ValidationError(where + ": non-finite value");
    if (r.is_object() && r.class_index >= pack.class_count()) {
      throw ValidationError(where + ": class_index " + std::to_string(r.class_index) + " out of range");
    }
    if (r.box && !r.box->valid()) throw ValidationError(where + ": degenerate box");
    if (!r.is_object()) ++backgrounds;
  }
  if (backgrounds == 0 && !pack.no_background) {
    throw ValidationError("pack has no background records and is not flagged no_background");
  }
}

namespace detail {

inline nlohmann::json pack_header(const FeaturePack& pack) {
  nlohmann::json records = nlohmann::json::array();
  for (const FeatureRecord& r : pack.records) {
    nlohmann::json j;
    j["role"] = r.is_object() ? "object" : "background";
    if (r.is_object()) j["class_index"] = r.class_index;
    j["image_id"] = r.image_id;
    if (r.box) j["box"] = {r.box->x_min, r.box->y_min, r.box->x_max, r.box->y_max};
    records.push_back(std::move(j));
  }
  nlohmann::json h;
  h["dataset_id"] = pack.dataset_id;
  h["dim"] = pack.dim;
  h["class_names"] = pack.class_names;
  h["record_count"] = pack.records.size();
  h["records"] = std::move(records);
  if (pack.no_background) h["no_background"] = true;
  return h;
}

template <typename T>
T json_field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("header missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header field '") + key + "': " + e.what());
  }
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError("truncated length prefix");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write_feature_pack(std::ostream& os, const FeaturePack& pack) {
  validate_pack(pack);
  const std::string header = detail::pack_header(pack).dump();
  os.write(kPackMagic.data(), kPackMagic.size());
  detail::write_u32(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const FeatureRecord& r : pack.records)
    os.write(reinterpret_cast<const char*>(r.raw.data()), static_cast<std::streamsize>(r.raw.size() * 4));
  if (!os) throw Error("failed writing feature pack");
}

inline FeaturePack read_feature_pack(std::istream& is, Normalization mode = Normalization::l2) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kPackMagic) throw FormatError("bad magic: not a FPK1 feature pack");
  const std::uint32_t header_len = detail::read_u32(is);
  std::string header_text(header_len, '\0');
  if (!is.read(header_text.data(), header_len)) throw FormatError("truncated header");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what());
  }
  if (!h.is_object()) throw FormatError("header is not a JSON object");

  FeaturePack pack;
  pack.dataset_id = detail::json_field<std::string>(h, "dataset_id");
  pack.dim = detail::json_field<std::size_t>(h, "dim");
  pack.class_names = detail::json_field<std::vector<std::string>>(h, "class_names");
  const auto count = detail::json_field<std::size_t>(h, "record_count");
  pack.no_background = h.value("no_background", false);
  const nlohmann::json& recs = h.contains("records") ? h["records"] : nlohmann::json();
  if (!recs.is_array() || recs.size() != count) throw FormatError("records array does not match record_count");
  if (pack.dim == 0) throw FormatError("dim must be positive");

  pack.records.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const nlohmann::json& j = recs[i];
    FeatureRecord& r = pack.records[i];
    const auto role = detail::json_field<std::string>(j, "role");
    if (role == "object") {
      r.role = Role::object;
      r.class_index = detail::json_field<std::size_t>(j, "class_index");
    } else if (role == "background") {
      r.role = Role::background;
    } else {
      throw FormatError("record " + std::to_string(i) + ": unknown role '" + role + "'");
    }
    r.image_id = detail::json_field<std::string>(j, "image_id");
    if (j.contains("box") && !j["box"].is_null()) {
      const auto b = detail::json_field<std::vector<double>>(j, "box");
      if (b.size() != 4) throw FormatError("record " + std::to_string(i) + ": box needs 4 numbers");
      r.box = Box{b[0], b[1], b[2], b[3]};
    }
  }

  std::vector<char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::size_t floats = payload.size() / 4;
  const std::size_t expected = count * pack.dim;
  if (floats < expected || payload.size() % 4 != 0) {
    const std::size_t row = floats / pack.dim;
    throw ValidationError("row " + std::to_string(row) + ": " + std::to_string(floats % pack.dim) +
                          " values, expected dim " + std::to_string(pack.dim));
  }
  if (floats > expected) throw ValidationError("payload has trailing values beyond record_count * dim");
  for (std::size_t i = 0; i < count; ++i) {
    FeatureRecord& r = pack.records[i];
    r.raw.resize(pack.dim);
    std::memcpy(r.raw.data(), payload.data() + i * pack.dim * 4, pack.dim * 4);
  }
  validate_pack(pack);
  widen_embeddings(pack, mode);
  return pack;
}

inline FeaturePack load_feature_pack(const std::string& path, Normalization mode = Normalization::l2) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open feature pack '" + path + "'");
  return read_feature_pack(in, mode);
}

inline void save_feature_pack(const std::string& path, const FeaturePack& pack) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot create '" + path + "'");
  write_feature_pack(out, pack);
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeSpec {
  std::size_t n_way = 1;
  std::size_t k_shot = 1;
  std::size_t n_bg = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> classes;  // explicit pack class indices; empty = the n_way smallest
};

// One record as seen by an episode. `label` is the episode-local class
// (0..N-1) or empty for background.
struct EpisodeRecord {
  std::size_t record_id = 0;
  std::optional<std::size_t> label;
  std::string image_id;
  std::optional<Box> box;
  std::vector<double> embedding;
};

struct Episode {
  EpisodeSpec spec;
  std::size_t dim = 0;
  std::vector<std::size_t> class_indices;  // pack class index of each episode class
  std::vector<std::string> class_names;
  std::vector<EpisodeRecord> support;     // n_way * k_shot, grouped by class
  std::vector<EpisodeRecord> background;  // n_bg
  std::vector<EpisodeRecord> query;       // sorted by (image_id, record_id)

  std::size_t n_way() const noexcept { return class_indices.size(); }
  std::size_t k_shot() const noexcept { return spec.k_shot; }
  std::size_t n_bg() const noexcept { return background.size(); }

  // FNV-1a over the ordered record ids of all three sets; identifies the
  // sampled episode in reports.
  std::uint64_t fingerprint() const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto* set : {&support, &background, &query}) {
      mix(set->size());
      for (const EpisodeRecord& r : *set) mix(r.record_id);
    }
    return h;
  }
};

namespace detail {

inline EpisodeRecord to_episode_record(const FeaturePack& pack, std::size_t id, std::optional<std::size_t> label) {
  const FeatureRecord& r = pack.records[id];
  return EpisodeRecord{id, label, r.image_id, r.box, r.embedding};
}

// Stream tags for derive_seed.
inline constexpr std::uint64_t kSupportStream = 1;
inline constexpr std::uint64_t kBackgroundStream = 2;

}  // namespace detail

// Uniform sample of n_bg background record ids without replacement, returned
// in ascending id order.
inline std::vector<std::size_t> select_background_ids(const FeaturePack& pack, std::size_t n_bg, std::uint64_t seed) {
  std::vector<std::size_t> ids = pack.background_ids();
  if (n_bg > ids.size()) {
    throw InsufficientBackgroundError("requested " + std::to_string(n_bg) + " background records, pack has " +
                                      std::to_string(ids.size()));
  }
  Rng rng(seed);
  rng.partial_shuffle(ids, n_bg);
  ids.resize(n_bg);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::vector<FeatureRecord> select_background(const FeaturePack& pack, std::size_t n_bg, std::uint64_t seed) {
  std::vector<FeatureRecord> out;
  for (std::size_t id : select_background_ids(pack, n_bg, seed)) out.push_back(pack.records[id]);
  return out;
}

// Balanced N-way K-shot episode: exactly K support records per class, the
// remaining records of the selected classes form the query set.
inline Episode sample_episode(const FeaturePack& pack, const EpisodeSpec& spec) {
  if (spec.n_way == 0 || spec.k_shot == 0) throw ValidationError("n_way and k_shot must be positive");
  if (spec.n_way > pack.class_count()) {
    throw ValidationError("n_way " + std::to_string(spec.n_way) + " exceeds the pack's " +
                          std::to_string(pack.class_count()) + " classes");
  }
  std::vector<std::size_t> classes = spec.classes;
  if (classes.empty()) {
    for (std::size_t c = 0; c < spec.n_way; ++c) classes.push_back(c);
  } else {
    if (classes.size() != spec.n_way) throw ValidationError("explicit class list length differs from n_way");
    for (std::size_t c : classes)
      if (c >= pack.class_count()) throw ValidationError("explicit class " + std::to_string(c) + " out of range");
    std::vector<std::size_t> sorted = classes;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ValidationError("explicit class list has duplicates");
  }

  Episode ep;
  ep.spec = spec;
  ep.dim = pack.dim;
  ep.class_indices = classes;

  Rng rng(derive_seed(spec.seed, detail::kSupportStream));
  std::vector<std::size_t> query_ids;
  std::vector<std::size_t> query_labels;
  for (std::size_t local = 0; local < classes.size(); ++local) {
    const std::size_t c = classes[local];
    ep.class_names.push_back(pack.class_names[c]);
    std::vector<std::size_t> ids = pack.records_of_class(c);
    if (ids.size() < spec.k_shot + 1) {
      throw InsufficientDataError("class '" + pack.class_names[c] + "' has " + std::to_string(ids.size()) +
                                  " records, needs at least " + std::to_string(spec.k_shot + 1));
    }
    rng.partial_shuffle(ids, spec.k_shot);
    std::sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(spec.k_shot));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i < spec.k_shot) {
        ep.support.push_back(detail::to_episode_record(pack, ids[i], local));
      } else {
        query_ids.push_back(ids[i]);
        query_labels.push_back(local);
      }
    }
  }

  std::vector<std::size_t> order(query_ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ia = pack.records[query_ids[a]].image_id;
    const auto& ib = pack.records[query_ids[b]].image_id;
    return ia != ib ? ia < ib : query_ids[a] < query_ids[b];
  });
  for (std::size_t i : order) ep.query.push_back(detail::to_episode_record(pack, query_ids[i], query_labels[i]));

  for (std::size_t id : select_background_ids(pack, spec.n_bg, derive_seed(spec.seed, detail::kBackgroundStream)))
    ep.background.push_back(detail::to_episode_record(pack, id, std::nullopt));
  return ep;
}

// Summary printed by `pack validate`.
struct PackSummary {
  std::string dataset_id;
  std::size_t dim = 0;
  std::size_t records = 0;
  std::size_t backgrounds = 0;
  std::map<std::string, std::size_t> per_class;
  bool no_background = false;
  bool single_class = false;
};

inline PackSummary summarize_pack(const FeaturePack& pack) {
  PackSummary s;
  s.dataset_id = pack.dataset_id;
  s.dim = pack.dim;
  s.records = pack.records.size();
  s.backgrounds = pack.background_count();
  s.no_background = pack.no_background;
  s.single_class = pack.class_count() == 1;
  for (const auto& name : pack.class_names) s.per_class[name] = 0;
  for (const FeatureRecord& r : pack.records)
    if (r.is_object()) ++s.per_class[pack.class_names[r.class_index]];
  return s;
}

}  // namespace cdvito
