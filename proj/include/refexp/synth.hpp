#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "refexp/dataset.hpp"

namespace refexp {

/// How a scene's objects can be told apart.
///  - kAbsolute: same-category objects differ by color; own features suffice.
///  - kLocationRelative: three identical objects in a horizontal line. The
///    ends take spatial phrases ("on the left/right"), which own-location
///    features can rank, but the middle is an ordinal no per-candidate
///    score can pick out, so neighbor comparisons are required for it by
///    construction.
///  - kShadeRelative: three objects with exactly equal clean attributes
///    whose shade ranking exists only in the realized noise. The extremes
///    ("darker"/"lighter") are solvable by any monotone score of own shade;
///    the median ("medium") again defeats every per-candidate scorer and
///    needs appearance comparisons.
enum class SceneKind { kAbsolute, kLocationRelative, kShadeRelative };

std::string scene_kind_name(SceneKind kind);

struct SynthConfig {
  std::size_t num_scenes = 100;
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  std::size_t num_categories = 4;  // at most the built-in noun list
  double relative_fraction = 0.25;
  double noise_sigma = 0.02;  // must be > 0 when relative scenes occur
  bool allow_location_words = true;  // false: relative scenes use shade only
  std::uint64_t seed = 1;

  void validate() const;
};

/// Per-scene record of how the scene was built, for construction-checking
/// oracles: the clean (pre-noise) attribute vectors, and the regions whose
/// expressions no per-candidate score can resolve (the ordinal middles).
struct SynthGroundTruth {
  std::uint64_t scene_id = 0;
  SceneKind kind = SceneKind::kAbsolute;
  std::vector<std::uint64_t> relative_targets;
  std::map<std::uint64_t, std::vector<double>> clean_features;
};

struct SynthResult {
  Dataset dataset;        // features already quantized to file precision
  FeatureTable features;  // region rows plus one global context row per scene
  std::vector<SynthGroundTruth> ground_truth;
};

/// Attribute vector layout (dimension 16): category one-hot (4), color
/// one-hot (4), shade, size, six zero spare dims.  The per-scene context row
/// reuses the layout for a composition summary: category histogram, color
/// histogram, then an object count in dim 10; it deliberately carries no
/// attribute averages (see synth.cpp).
constexpr std::size_t kSynthFeatureDim = 16;

const std::vector<std::string>& synth_category_nouns();
const std::vector<std::string>& synth_color_names();

/// Builds the full synthetic corpus for a config: deterministic for a seed,
/// every expression checked against the symbolic resolver before emission.
SynthResult synthesize(const SynthConfig& config);

/// The ids of scene objects a tokenized expression denotes under the
/// generating grammar. Category and color read the clean attributes;
/// darker/lighter/medium rank the realized shade; spatial words compare box
/// centers. An expression is well formed exactly when this returns one id.
std::vector<std::uint64_t> resolve_expression(const Scene& scene,
                                              const SynthGroundTruth& truth,
                                              const std::vector<std::string>& words);

/// Writes annotation.json, features.bin, and truth.json into `out_dir`
/// (created if missing) in the standard formats.
void write_synth(const SynthResult& result, const std::string& out_dir);

}  // namespace refexp
