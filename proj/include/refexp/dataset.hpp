#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace refexp {

struct BoundingBox {
  double x_tl = 0.0;
  double y_tl = 0.0;
  double x_br = 0.0;
  double y_br = 0.0;

  double width() const { return x_br - x_tl; }
  double height() const { return y_br - y_tl; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_tl + x_br); }
  double center_y() const { return 0.5 * (y_tl + y_br); }
};

struct ObjectRegion {
  std::uint64_t region_id = 0;
  std::uint64_t scene_id = 0;
  int category_id = 0;
  BoundingBox box;
  std::vector<double> feature;  // dimension D, identical across a dataset
};

/// Scene-level context feature variants: one whole-image vector plus
/// windowed vectors at increasing crop sizes around each position.
enum class ContextSource { kGlobal, kScale2, kScale3, kScale4 };

std::string context_source_name(ContextSource source);
ContextSource context_source_from_name(const std::string& name);

/// Feature-file key for a scene-level context row: high bit set, source tag
/// in bits 60..62, scene id in bits 0..59.
std::uint64_t context_key(std::uint64_t scene_id, ContextSource source);
bool is_context_key(std::uint64_t key);
std::pair<std::uint64_t, ContextSource> parse_context_key(std::uint64_t key);

struct Scene {
  std::uint64_t scene_id = 0;
  double width = 0.0;
  double height = 0.0;
  std::vector<ObjectRegion> regions;
  std::map<ContextSource, std::vector<double>> context_features;
};

struct RefExpression {
  std::uint64_t expression_id = 0;
  std::uint64_t region_id = 0;
  std::vector<std::string> words;
  std::string raw_text;
  std::vector<int> token_ids;  // filled by encode_expressions; ends with END
};

/// Lowercases and splits on any non-alphanumeric character, dropping empties.
std::vector<std::string> tokenize(const std::string& raw);

class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEnd = 1;
  static constexpr int kUnk = 2;

  Vocabulary();

  int add(const std::string& token);  // no-op if already present
  int id_of(const std::string& token) const;  // UNK id when absent
  const std::string& token_of(int id) const;
  bool contains(const std::string& token) const;
  std::size_t size() const { return tokens_.size(); }

  std::vector<int> encode(const std::vector<std::string>& words) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  /// FNV-1a over the id-ordered token list; checkpoints store this so a
  /// model is never decoded with a mismatched vocabulary.
  std::uint64_t hash() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct Dataset {
  std::vector<Scene> scenes;
  std::vector<RefExpression> expressions;
  std::size_t feature_dim = 0;

  const Scene& scene_by_id(std::uint64_t scene_id) const;
  const ObjectRegion& region_by_id(std::uint64_t region_id) const;
  const Scene& scene_of_region(std::uint64_t region_id) const;
  /// Indices into `expressions`, in file order.
  const std::vector<std::size_t>& expressions_of(std::uint64_t region_id) const;
  std::size_t total_regions() const;

  void rebuild_index();

 private:
  std::unordered_map<std::uint64_t, std::size_t> scene_index_;
  std::unordered_map<std::uint64_t, std::pair<std::size_t, std::size_t>> region_index_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> region_expressions_;
  std::vector<std::size_t> empty_;
};

/// One row of the binary feature file: either a region feature (key =
/// region_id) or a scene context feature (key from context_key()).
struct FeatureRow {
  std::uint64_t key = 0;
  std::vector<double> values;
};

struct FeatureTable {
  std::uint64_t dim = 0;
  std::vector<FeatureRow> rows;
};

void write_feature_file(const std::string& path, const FeatureTable& table);
FeatureTable read_feature_file(const std::string& path);

/// Parses the annotation JSON, attaches feature rows, and cross-links
/// regions and expressions. Throws ParseError on malformed JSON and
/// IntegrityError on dangling or duplicate references.
Dataset load_dataset(const std::string& annotation_path, const std::string& feature_path);

/// Keeps tokens whose corpus frequency is >= min_count; ids are assigned by
/// descending frequency, ties alphabetical, after the three specials.
Vocabulary build_vocabulary(const std::vector<RefExpression>& expressions, int min_count);

/// Fills token_ids for every expression (END-terminated).
void encode_expressions(Dataset& dataset, const Vocabulary& vocab);

struct PerObjectSplit {
  std::vector<std::uint64_t> train_regions;
  std::vector<std::uint64_t> test_regions;
};

/// Seeded shuffle of all region ids; round(ratio * n) go to train. Regions
/// of one scene may straddle the two sides.
PerObjectSplit split_per_object(const Dataset& dataset, double ratio, std::uint64_t seed);

struct PeopleVsObjectsSplit {
  std::vector<std::uint64_t> train_scenes;
  std::vector<std::uint64_t> test_people_scenes;   // >=2 referred person regions
  std::vector<std::uint64_t> test_objects_scenes;  // >=2 referred same-category non-person regions
};

/// Scene-level partition: eligible scenes are sampled into the two test
/// sides (test_fraction of each eligible pool, seeded); everything else
/// trains. No scene appears on two sides.
PeopleVsObjectsSplit split_people_vs_objects(const Dataset& dataset, int person_category_id,
                                             double test_fraction, std::uint64_t seed);

}  // namespace refexp
