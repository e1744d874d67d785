#include "refexp/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"
#include "refexp/binary_io.hpp"
#include "refexp/errors.hpp"
#include "refexp/rng_util.hpp"

namespace refexp {

namespace {
constexpr char kFeatureMagic[4] = {'R', 'F', 'E', 'A'};
constexpr std::uint32_t kFeatureVersion = 2;
constexpr std::uint64_t kContextBit = 1ull << 63;
constexpr std::uint64_t kSceneMask = (1ull << 60) - 1;

int context_tag(ContextSource source) {
  switch (source) {
    case ContextSource::kGlobal: return 0;
    case ContextSource::kScale2: return 2;
    case ContextSource::kScale3: return 3;
    case ContextSource::kScale4: return 4;
  }
  throw DomainError("unknown context source");
}
}  // namespace

std::string context_source_name(ContextSource source) {
  switch (source) {
    case ContextSource::kGlobal: return "global";
    case ContextSource::kScale2: return "scale2";
    case ContextSource::kScale3: return "scale3";
    case ContextSource::kScale4: return "scale4";
  }
  throw DomainError("unknown context source");
}

ContextSource context_source_from_name(const std::string& name) {
  if (name == "global") return ContextSource::kGlobal;
  if (name == "scale2") return ContextSource::kScale2;
  if (name == "scale3") return ContextSource::kScale3;
  if (name == "scale4") return ContextSource::kScale4;
  throw DomainError("unknown context source '" + name + "'");
}

std::uint64_t context_key(std::uint64_t scene_id, ContextSource source) {
  if (scene_id > kSceneMask) throw DomainError("scene id does not fit in a context key");
  return kContextBit | (static_cast<std::uint64_t>(context_tag(source)) << 60) | scene_id;
}

bool is_context_key(std::uint64_t key) { return (key & kContextBit) != 0; }

std::pair<std::uint64_t, ContextSource> parse_context_key(std::uint64_t key) {
  if (!is_context_key(key)) throw DomainError("not a context key");
  std::uint64_t tag = (key >> 60) & 0x7;
  ContextSource source;
  switch (tag) {
    case 0: source = ContextSource::kGlobal; break;
    case 2: source = ContextSource::kScale2; break;
    case 3: source = ContextSource::kScale3; break;
    case 4: source = ContextSource::kScale4; break;
    default:
      throw IntegrityError("feature-integrity",
                           "unknown context tag " + std::to_string(tag));
  }
  return {key & kSceneMask, source};
}

std::vector<std::string> tokenize(const std::string& raw) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : raw) {
    unsigned char uc = static_cast<unsigned char>(c);
    if (std::isalnum(uc)) {
      current.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Vocabulary::Vocabulary() {
  add("<bos>");
  add("<end>");
  add("<unk>");
}

int Vocabulary::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const { return ids_.count(token) != 0; }

std::vector<int> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const std::string& w : words) ids.push_back(id_of(w));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (int id : ids) words.push_back(token_of(id));
  return words;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 14695981039346656037ull;
  auto mix = [&h](unsigned char byte) {
    h ^= byte;
    h *= 1099511628211ull;
  };
  for (const std::string& token : tokens_) {
    for (char c : token) mix(static_cast<unsigned char>(c));
    mix(0);
  }
  return h;
}

const Scene& Dataset::scene_by_id(std::uint64_t scene_id) const {
  auto it = scene_index_.find(scene_id);
  if (it == scene_index_.end()) throw IndexError("unknown scene " + std::to_string(scene_id));
  return scenes[it->second];
}

const ObjectRegion& Dataset::region_by_id(std::uint64_t region_id) const {
  auto it = region_index_.find(region_id);
  if (it == region_index_.end()) throw IndexError("unknown region " + std::to_string(region_id));
  return scenes[it->second.first].regions[it->second.second];
}

const Scene& Dataset::scene_of_region(std::uint64_t region_id) const {
  auto it = region_index_.find(region_id);
  if (it == region_index_.end()) throw IndexError("unknown region " + std::to_string(region_id));
  return scenes[it->second.first];
}

const std::vector<std::size_t>& Dataset::expressions_of(std::uint64_t region_id) const {
  auto it = region_expressions_.find(region_id);
  return it == region_expressions_.end() ? empty_ : it->second;
}

std::size_t Dataset::total_regions() const {
  std::size_t n = 0;
  for (const Scene& s : scenes) n += s.regions.size();
  return n;
}

void Dataset::rebuild_index() {
  scene_index_.clear();
  region_index_.clear();
  region_expressions_.clear();
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    if (!scene_index_.emplace(scenes[si].scene_id, si).second) {
      throw IntegrityError("annotation-integrity",
                           "duplicate scene id " + std::to_string(scenes[si].scene_id));
    }
    for (std::size_t ri = 0; ri < scenes[si].regions.size(); ++ri) {
      std::uint64_t id = scenes[si].regions[ri].region_id;
      if (!region_index_.emplace(id, std::make_pair(si, ri)).second) {
        throw IntegrityError("annotation-integrity",
                             "duplicate region id " + std::to_string(id));
      }
    }
  }
  for (std::size_t ei = 0; ei < expressions.size(); ++ei) {
    std::uint64_t rid = expressions[ei].region_id;
    if (region_index_.find(rid) == region_index_.end()) {
      throw IntegrityError("annotation-integrity",
                           "expression " + std::to_string(expressions[ei].expression_id) +
                               " refers to unknown region " + std::to_string(rid));
    }
    region_expressions_[rid].push_back(ei);
  }
}

void write_feature_file(const std::string& path, const FeatureTable& table) {
  std::ostringstream out;
  out.write(kFeatureMagic, 4);
  io::write_u32(out, kFeatureVersion);
  io::write_u64(out, table.rows.size());
  io::write_u64(out, table.dim);
  for (const FeatureRow& row : table.rows) {
    if (row.values.size() != table.dim) {
      throw DimensionError("feature row has " + std::to_string(row.values.size()) +
                           " values, expected " + std::to_string(table.dim));
    }
    io::write_u64(out, row.key);
    for (double v : row.values) io::write_f32(out, static_cast<float>(v));
  }
  io::write_checked_file(path, std::move(out).str());
}

FeatureTable read_feature_file(const std::string& path) {
  std::istringstream in(io::read_checked_payload(path, "feature-integrity"));
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kFeatureMagic, 4) != 0) {
    throw IntegrityError("feature-integrity", "bad magic in " + path);
  }
  std::uint32_t version = io::read_u32(in, "feature file version");
  if (version != kFeatureVersion) {
    throw IntegrityError("feature-integrity",
                         "unsupported feature file version " + std::to_string(version));
  }
  FeatureTable table;
  std::uint64_t count = io::read_u64(in, "feature row count");
  table.dim = io::read_u64(in, "feature dimension");
  if (table.dim == 0 || table.dim > (1ull << 24)) {
    throw IntegrityError("feature-integrity", "implausible feature dimension");
  }
  table.rows.resize(count);
  for (std::uint64_t r = 0; r < count; ++r) {
    try {
      table.rows[r].key = io::read_u64(in, "feature row key");
      table.rows[r].values.resize(table.dim);
      for (std::uint64_t d = 0; d < table.dim; ++d) {
        table.rows[r].values[d] = static_cast<double>(io::read_f32(in, "feature value"));
      }
    } catch (const IoError&) {
      throw IntegrityError("feature-integrity", "truncated feature file " + path);
    }
  }
  in.peek();
  if (!in.eof()) throw IntegrityError("feature-integrity", "trailing bytes in " + path);
  return table;
}

namespace {

using json = nlohmann::json;

const json& require_field(const json& obj, const char* field, const char* where) {
  auto it = obj.find(field);
  if (it == obj.end()) {
    throw ParseError(std::string("missing field '") + field + "' in " + where);
  }
  return *it;
}

double require_number(const json& obj, const char* field, const char* where) {
  const json& v = require_field(obj, field, where);
  if (!v.is_number()) {
    throw ParseError(std::string("field '") + field + "' in " + where + " is not a number");
  }
  return v.get<double>();
}

std::uint64_t require_id(const json& obj, const char* field, const char* where) {
  const json& v = require_field(obj, field, where);
  if (!v.is_number_unsigned() && !v.is_number_integer()) {
    throw ParseError(std::string("field '") + field + "' in " + where + " is not an integer id");
  }
  if (v.is_number_integer() && v.get<std::int64_t>() < 0) {
    throw ParseError(std::string("field '") + field + "' in " + where + " is negative");
  }
  return v.get<std::uint64_t>();
}

}  // namespace

Dataset load_dataset(const std::string& annotation_path, const std::string& feature_path) {
  std::ifstream in(annotation_path);
  if (!in) throw IoError("cannot open " + annotation_path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed annotation JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("annotation root must be an object");

  Dataset dataset;

  const json& images = require_field(doc, "images", "annotation root");
  if (!images.is_array()) throw ParseError("'images' must be an array");
  for (const json& img : images) {
    Scene scene;
    scene.scene_id = require_id(img, "id", "images[]");
    scene.width = require_number(img, "width", "images[]");
    scene.height = require_number(img, "height", "images[]");
    if (scene.width <= 0 || scene.height <= 0) {
      throw IntegrityError("annotation-integrity",
                           "scene " + std::to_string(scene.scene_id) +
                               " has non-positive extent");
    }
    dataset.scenes.push_back(std::move(scene));
  }
  std::unordered_map<std::uint64_t, std::size_t> scene_slot;
  for (std::size_t i = 0; i < dataset.scenes.size(); ++i) {
    if (!scene_slot.emplace(dataset.scenes[i].scene_id, i).second) {
      throw IntegrityError("annotation-integrity",
                           "duplicate scene id " +
                               std::to_string(dataset.scenes[i].scene_id));
    }
  }

  const json& annotations = require_field(doc, "annotations", "annotation root");
  if (!annotations.is_array()) throw ParseError("'annotations' must be an array");
  for (const json& ann : annotations) {
    ObjectRegion region;
    region.region_id = require_id(ann, "id", "annotations[]");
    region.scene_id = require_id(ann, "image_id", "annotations[]");
    region.category_id = static_cast<int>(require_number(ann, "category_id", "annotations[]"));
    const json& bbox = require_field(ann, "bbox", "annotations[]");
    if (!bbox.is_array() || bbox.size() != 4) {
      throw ParseError("'bbox' must be [x, y, w, h]");
    }
    for (const json& v : bbox) {
      if (!v.is_number()) throw ParseError("'bbox' entries must be numbers");
    }
    double x = bbox[0].get<double>();
    double y = bbox[1].get<double>();
    double w = bbox[2].get<double>();
    double h = bbox[3].get<double>();
    region.box = BoundingBox{x, y, x + w, y + h};
    auto slot = scene_slot.find(region.scene_id);
    if (slot == scene_slot.end()) {
      throw IntegrityError("annotation-integrity",
                           "region " + std::to_string(region.region_id) +
                               " refers to unknown scene " + std::to_string(region.scene_id));
    }
    Scene& scene = dataset.scenes[slot->second];
    if (w < 0 || h < 0 || x < 0 || y < 0 || x + w > scene.width + 1e-6 ||
        y + h > scene.height + 1e-6) {
      throw IntegrityError("annotation-integrity",
                           "region " + std::to_string(region.region_id) +
                               " box lies outside its scene");
    }
    scene.regions.push_back(std::move(region));
  }

  const json& refs = require_field(doc, "refs", "annotation root");
  if (!refs.is_array()) throw ParseError("'refs' must be an array");
  std::unordered_map<std::uint64_t, bool> seen_expression;
  for (const json& ref : refs) {
    RefExpression expr;
    expr.expression_id = require_id(ref, "expression_id", "refs[]");
    expr.region_id = require_id(ref, "region_id", "refs[]");
    if (!seen_expression.emplace(expr.expression_id, true).second) {
      throw IntegrityError("annotation-integrity",
                           "duplicate expression id " + std::to_string(expr.expression_id));
    }
    const json& raw = require_field(ref, "raw", "refs[]");
    if (!raw.is_string()) throw ParseError("'raw' must be a string");
    expr.raw_text = raw.get<std::string>();
    auto tokens_field = ref.find("tokens");
    if (tokens_field != ref.end()) {
      if (!tokens_field->is_array()) throw ParseError("'tokens' must be an array of strings");
      for (const json& t : *tokens_field) {
        if (!t.is_string()) throw ParseError("'tokens' must be an array of strings");
        expr.words.push_back(t.get<std::string>());
      }
    } else {
      expr.words = tokenize(expr.raw_text);
    }
    if (expr.words.empty()) {
      throw IntegrityError("annotation-integrity",
                           "expression " + std::to_string(expr.expression_id) +
                               " has no tokens");
    }
    dataset.expressions.push_back(std::move(expr));
  }

  FeatureTable table = read_feature_file(feature_path);
  dataset.feature_dim = static_cast<std::size_t>(table.dim);
  std::unordered_map<std::uint64_t, const FeatureRow*> by_key;
  for (const FeatureRow& row : table.rows) {
    if (!by_key.emplace(row.key, &row).second) {
      throw IntegrityError("feature-integrity",
                           "duplicate feature key " + std::to_string(row.key));
    }
    for (double v : row.values) {
      if (!std::isfinite(v)) {
        throw IntegrityError("feature-integrity",
                             "non-finite value in feature row " + std::to_string(row.key));
      }
    }
  }

  std::unordered_map<std::uint64_t, bool> known_region;
  for (Scene& scene : dataset.scenes) {
    for (ObjectRegion& region : scene.regions) {
      known_region[region.region_id] = true;
      auto it = by_key.find(region.region_id);
      if (it == by_key.end()) {
        throw IntegrityError("feature-integrity",
                             "missing feature row for region " +
                                 std::to_string(region.region_id));
      }
      region.feature = it->second->values;
    }
  }
  for (const FeatureRow& row : table.rows) {
    if (is_context_key(row.key)) {
      auto [scene_id, source] = parse_context_key(row.key);
      auto slot = scene_slot.find(scene_id);
      if (slot == scene_slot.end()) {
        throw IntegrityError("feature-integrity",
                             "context row for unknown scene " + std::to_string(scene_id));
      }
      dataset.scenes[slot->second].context_features[source] = row.values;
    } else if (known_region.find(row.key) == known_region.end()) {
      throw IntegrityError("feature-integrity",
                           "feature row for unknown region " + std::to_string(row.key));
    }
  }

  dataset.rebuild_index();
  return dataset;
}

Vocabulary build_vocabulary(const std::vector<RefExpression>& expressions, int min_count) {
  if (min_count < 1) throw DomainError("min_count must be >= 1");
  std::map<std::string, int> counts;  // ordered map: alphabetical tie-break for free
  for (const RefExpression& expr : expressions) {
    for (const std::string& w : expr.words) ++counts[w];
  }
  std::vector<std::pair<std::string, int>> kept;
  for (const auto& [token, count] : counts) {
    if (count >= min_count) kept.emplace_back(token, count);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary vocab;
  for (const auto& [token, count] : kept) vocab.add(token);
  return vocab;
}

void encode_expressions(Dataset& dataset, const Vocabulary& vocab) {
  for (RefExpression& expr : dataset.expressions) {
    expr.token_ids = vocab.encode(expr.words);
    expr.token_ids.push_back(Vocabulary::kEnd);
  }
}

PerObjectSplit split_per_object(const Dataset& dataset, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw DomainError("split ratio must lie in (0, 1)");
  std::vector<std::uint64_t> ids;
  for (const Scene& scene : dataset.scenes) {
    for (const ObjectRegion& region : scene.regions) ids.push_back(region.region_id);
  }
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  deterministic_shuffle(ids, rng);
  std::size_t n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ids.size())));
  n_train = std::min(n_train, ids.size());
  PerObjectSplit split;
  split.train_regions.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.test_regions.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  std::sort(split.train_regions.begin(), split.train_regions.end());
  std::sort(split.test_regions.begin(), split.test_regions.end());
  return split;
}

PeopleVsObjectsSplit split_people_vs_objects(const Dataset& dataset, int person_category_id,
                                             double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw DomainError("test fraction must lie in (0, 1)");
  }
  std::vector<std::uint64_t> people_eligible;
  std::vector<std::uint64_t> objects_eligible;
  for (const Scene& scene : dataset.scenes) {
    int person_count = 0;
    std::map<int, int> other_counts;
    for (const ObjectRegion& region : scene.regions) {
      if (dataset.expressions_of(region.region_id).empty()) continue;  // unreferred
      if (region.category_id == person_category_id) {
        ++person_count;
      } else {
        ++other_counts[region.category_id];
      }
    }
    if (person_count >= 2) people_eligible.push_back(scene.scene_id);
    for (const auto& [cat, count] : other_counts) {
      if (count >= 2) {
        objects_eligible.push_back(scene.scene_id);
        break;
      }
    }
  }
  std::sort(people_eligible.begin(), people_eligible.end());
  std::sort(objects_eligible.begin(), objects_eligible.end());

  std::mt19937_64 rng(seed);
  PeopleVsObjectsSplit split;
  deterministic_shuffle(people_eligible, rng);
  std::size_t n_people = static_cast<std::size_t>(
      std::llround(test_fraction * static_cast<double>(people_eligible.size())));
  n_people = std::min(n_people, people_eligible.size());
  split.test_people_scenes.assign(people_eligible.begin(),
                                  people_eligible.begin() + static_cast<std::ptrdiff_t>(n_people));

  std::vector<std::uint64_t> remaining_objects;
  for (std::uint64_t id : objects_eligible) {
    if (std::find(split.test_people_scenes.begin(), split.test_people_scenes.end(), id) ==
        split.test_people_scenes.end()) {
      remaining_objects.push_back(id);
    }
  }
  deterministic_shuffle(remaining_objects, rng);
  std::size_t n_objects = static_cast<std::size_t>(
      std::llround(test_fraction * static_cast<double>(remaining_objects.size())));
  n_objects = std::min(n_objects, remaining_objects.size());
  split.test_objects_scenes.assign(
      remaining_objects.begin(), remaining_objects.begin() + static_cast<std::ptrdiff_t>(n_objects));

  for (const Scene& scene : dataset.scenes) {
    bool in_people = std::find(split.test_people_scenes.begin(), split.test_people_scenes.end(),
                               scene.scene_id) != split.test_people_scenes.end();
    bool in_objects = std::find(split.test_objects_scenes.begin(), split.test_objects_scenes.end(),
                                scene.scene_id) != split.test_objects_scenes.end();
    if (!in_people && !in_objects) split.train_scenes.push_back(scene.scene_id);
  }
  std::sort(split.train_scenes.begin(), split.train_scenes.end());
  std::sort(split.test_people_scenes.begin(), split.test_people_scenes.end());
  std::sort(split.test_objects_scenes.begin(), split.test_objects_scenes.end());
  return split;
}

}  // namespace refexp
