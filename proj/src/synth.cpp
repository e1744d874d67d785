#include "refexp/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "json.hpp"
#include "refexp/errors.hpp"
#include "refexp/rng_util.hpp"

namespace refexp {

namespace {

constexpr double kSceneSide = 512.0;
constexpr std::size_t kColorOffset = 4;  // feature dims 4..7
constexpr std::size_t kNumPaletteColors = 4;
constexpr std::size_t kShadeDim = 8;
constexpr std::size_t kSizeDim = 9;
constexpr std::size_t kContextCountDim = 10;  // used only in the context row
constexpr std::size_t kMaxObjects = 4;        // grid capacity; see validate()

enum class Role {
  kAbsolutePair,   // color-distinct same-category pair member
  kDilution,       // lone-category filler, referred by its bare noun
  kShadeDarkest,   // shade-ladder extremes carry order comparatives
  kShadeMedian,    // the ordinal middle of the ladder
  kShadeLightest,
  kLocationLeft,   // line ends take spatial phrases
  kLocationMiddle, // the ordinal middle of the line
  kLocationRight,
};

struct ObjectPlan {
  Role role = Role::kDilution;
  std::size_t category = 0;  // index into the noun list
  std::size_t color = 0;     // index into the color list
  double shade = 0.5;
  double size = 0.5;  // box side = 40 + 60 * size
  double center_x = 0.0;
  double center_y = 0.0;
  double side = 0.0;
};

std::vector<double> clean_feature(const ObjectPlan& plan) {
  std::vector<double> f(kSynthFeatureDim, 0.0);
  f[plan.category] = 1.0;
  f[kColorOffset + plan.color] = 1.0;
  f[kShadeDim] = plan.shade;
  f[kSizeDim] = plan.size;
  return f;
}

double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

double object_side(double size) { return 40.0 + 60.0 * size; }

/// Jittered 2x2 grid keeps boxes inside the image and never identical.
void place_on_grid(std::vector<ObjectPlan>& plans, std::mt19937_64& rng) {
  std::vector<std::pair<double, double>> slots = {
      {128.0, 128.0}, {384.0, 128.0}, {128.0, 384.0}, {384.0, 384.0}};
  deterministic_shuffle(slots, rng);
  for (std::size_t i = 0; i < plans.size(); ++i) {
    plans[i].side = object_side(plans[i].size);
    plans[i].center_x = slots[i].first + uniform_real(rng, -60.0, 60.0);
    plans[i].center_y = slots[i].second + uniform_real(rng, -60.0, 60.0);
  }
}

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {"the", "that", "on", "in"};
  return words;
}

}  // namespace

const std::vector<std::string>& synth_category_nouns() {
  static const std::vector<std::string> nouns = {"ball", "box", "mug", "book"};
  return nouns;
}

const std::vector<std::string>& synth_color_names() {
  static const std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
  return colors;
}

std::string scene_kind_name(SceneKind kind) {
  switch (kind) {
    case SceneKind::kAbsolute: return "absolute";
    case SceneKind::kLocationRelative: return "location_relative";
    case SceneKind::kShadeRelative: return "shade_relative";
  }
  throw DomainError("unknown scene kind");
}

void SynthConfig::validate() const {
  if (relative_fraction < 0.0 || relative_fraction > 1.0) {
    throw DomainError("relative_fraction must lie in [0, 1]");
  }
  if (noise_sigma < 0.0) throw DomainError("noise_sigma must be >= 0");
  if (min_objects < 2) throw DomainError("scenes need at least two objects");
  if (max_objects < min_objects) throw DomainError("max_objects must be >= min_objects");
  if (max_objects > 4) throw DomainError("the grid placer supports at most 4 objects");
  if (num_categories < 2 || num_categories > synth_category_nouns().size()) {
    throw DomainError("num_categories must lie in [2, " +
                      std::to_string(synth_category_nouns().size()) + "]");
  }
  if (min_objects > num_categories + 1) {
    throw DomainError("min_objects needs num_categories + 1 distinct-category slots");
  }
  if (relative_fraction > 0.0) {
    if (max_objects < 3) throw DomainError("relative scenes hold a 3-object group");
    if (allow_location_words && min_objects > 3) {
      throw DomainError("location-relative scenes hold exactly 3 objects");
    }
  }
}

std::vector<std::uint64_t> resolve_expression(const Scene& scene,
                                              const SynthGroundTruth& truth,
                                              const std::vector<std::string>& words) {
  const auto& nouns = synth_category_nouns();
  const auto& colors = synth_color_names();
  const auto& fillers = filler_words();

  int noun = -1;
  int color = -1;
  bool darker = false, lighter = false, medium = false;
  bool middle = false, left = false, right = false;
  for (const std::string& word : words) {
    if (std::find(fillers.begin(), fillers.end(), word) != fillers.end()) continue;
    auto n = std::find(nouns.begin(), nouns.end(), word);
    if (n != nouns.end()) {
      if (noun >= 0) return {};  // two nouns: not part of the grammar
      noun = static_cast<int>(n - nouns.begin());
      continue;
    }
    auto c = std::find(colors.begin(), colors.end(), word);
    if (c != colors.end()) {
      if (color >= 0) return {};
      color = static_cast<int>(c - colors.begin());
      continue;
    }
    if (word == "darker") darker = true;
    else if (word == "lighter") lighter = true;
    else if (word == "medium") medium = true;
    else if (word == "middle") middle = true;
    else if (word == "left") left = true;
    else if (word == "right") right = true;
    else return {};  // outside the grammar
  }
  if (noun < 0) return {};

  struct Candidate {
    std::uint64_t id;
    double shade;  // realized, because shade comparatives rank the noise
    double cx;
    double cy;
  };
  std::vector<Candidate> candidates;
  for (const ObjectRegion& region : scene.regions) {
    auto it = truth.clean_features.find(region.region_id);
    if (it == truth.clean_features.end()) {
      throw IntegrityError("synth-integrity", "region " + std::to_string(region.region_id) +
                                                  " missing clean features");
    }
    const std::vector<double>& clean = it->second;
    if (clean[static_cast<std::size_t>(noun)] != 1.0) continue;
    if (color >= 0 && clean[kColorOffset + static_cast<std::size_t>(color)] != 1.0) continue;
    candidates.push_back({region.region_id, region.feature[kShadeDim],
                          region.box.center_x(), region.box.center_y()});
  }

  auto keep_extreme = [&candidates](auto value, bool want_min) {
    if (candidates.size() < 2) {
      candidates.clear();  // a comparative needs a comparison set
      return;
    }
    std::vector<Candidate> kept;
    for (const Candidate& c : candidates) {
      bool extreme = true;
      for (const Candidate& other : candidates) {
        if (other.id == c.id) continue;
        if (want_min ? value(c) >= value(other) : value(c) <= value(other)) {
          extreme = false;
          break;
        }
      }
      if (extreme) kept.push_back(c);
    }
    candidates = std::move(kept);
  };
  auto keep_between = [&candidates](auto value) {
    double lo = 1e300, hi = -1e300;
    for (const Candidate& c : candidates) {
      lo = std::min(lo, value(c));
      hi = std::max(hi, value(c));
    }
    std::vector<Candidate> kept;
    for (const Candidate& c : candidates) {
      if (value(c) > lo && value(c) < hi) kept.push_back(c);
    }
    candidates = std::move(kept);
  };
  auto shade_of = [](const Candidate& c) { return c.shade; };

  if (darker) keep_extreme(shade_of, true);
  if (lighter) keep_extreme(shade_of, false);
  if (medium) keep_between(shade_of);
  if (middle) {
    // the axis with the larger spread carries the line
    double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
    for (const Candidate& c : candidates) {
      min_x = std::min(min_x, c.cx);
      max_x = std::max(max_x, c.cx);
      min_y = std::min(min_y, c.cy);
      max_y = std::max(max_y, c.cy);
    }
    bool horizontal = (max_x - min_x) >= (max_y - min_y);
    if (horizontal) {
      keep_between([](const Candidate& c) { return c.cx; });
    } else {
      keep_between([](const Candidate& c) { return c.cy; });
    }
  }
  // spatial sides locate within whatever already matched, singleton included
  if (left) {
    std::vector<Candidate> kept;
    for (const Candidate& c : candidates) {
      bool leftmost = true;
      for (const Candidate& other : candidates) {
        if (other.id != c.id && c.cx >= other.cx) leftmost = false;
      }
      if (leftmost) kept.push_back(c);
    }
    candidates = std::move(kept);
  }
  if (right) {
    std::vector<Candidate> kept;
    for (const Candidate& c : candidates) {
      bool rightmost = true;
      for (const Candidate& other : candidates) {
        if (other.id != c.id && c.cx <= other.cx) rightmost = false;
      }
      if (rightmost) kept.push_back(c);
    }
    candidates = std::move(kept);
  }

  std::vector<std::uint64_t> ids;
  for (const Candidate& c : candidates) ids.push_back(c.id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

std::vector<std::string> take_templates(std::vector<std::string> templates,
                                        std::mt19937_64& rng) {
  std::size_t count = 1 + uniform_index(rng, 3);  // 1..3 expressions
  count = std::min(count, templates.size());
  templates.resize(count);
  return templates;
}

/// Extra lone-category objects around a core group of `base` objects: at
/// least one when there is room (so all-object comparison sets stay
/// diluted), always honoring the configured scene-size range.
std::size_t draw_extras(const SynthConfig& config, std::mt19937_64& rng, std::size_t base) {
  std::size_t room = config.max_objects > base ? config.max_objects - base : 0;
  std::size_t lo =
      config.min_objects > base ? config.min_objects - base : (room > 0 ? 1 : 0);
  return lo + uniform_index(rng, room - lo + 1);
}

void add_dilution(std::vector<ObjectPlan>& plans, const SynthConfig& config,
                  std::size_t core_category, std::size_t base, std::mt19937_64& rng) {
  std::vector<std::size_t> other_categories;
  for (std::size_t c = 0; c < config.num_categories; ++c) {
    if (c != core_category) other_categories.push_back(c);
  }
  deterministic_shuffle(other_categories, rng);
  std::size_t extras = std::min(draw_extras(config, rng, base), other_categories.size());
  for (std::size_t k = 0; k < extras; ++k) {
    ObjectPlan plan;
    plan.role = Role::kDilution;
    plan.category = other_categories[k];
    plan.color = uniform_index(rng, synth_color_names().size());
    plan.shade = uniform_real(rng, 0.2, 0.9);
    plan.size = uniform_real(rng, 0.2, 0.8);
    plans.push_back(plan);
  }
}

std::vector<ObjectPlan> plan_absolute(const SynthConfig& config, std::mt19937_64& rng) {
  std::size_t category = uniform_index(rng, config.num_categories);
  std::vector<std::size_t> palette(synth_color_names().size());
  for (std::size_t i = 0; i < palette.size(); ++i) palette[i] = i;
  deterministic_shuffle(palette, rng);

  std::vector<ObjectPlan> plans;
  for (std::size_t k = 0; k < 2; ++k) {
    ObjectPlan plan;
    plan.role = Role::kAbsolutePair;
    plan.category = category;
    plan.color = palette[k];
    plan.shade = uniform_real(rng, 0.2, 0.9);
    plan.size = uniform_real(rng, 0.2, 0.8);
    plans.push_back(plan);
  }
  add_dilution(plans, config, category, 2, rng);
  place_on_grid(plans, rng);
  return plans;
}

/// An evenly spaced shade ladder around a scene-specific base. The wide base
/// range keeps any single shade value ambiguous about its rank, while the
/// gap (far above the noise scale) makes pooled appearance differences
/// nearly binary: the median's same-category differences cancel, the
/// extremes' reinforce.
std::vector<ObjectPlan> plan_shade_relative(const SynthConfig& config,
                                            std::mt19937_64& rng) {
  std::size_t category = uniform_index(rng, config.num_categories);
  std::size_t color = uniform_index(rng, synth_color_names().size());
  // The gap stays >= 4 sigma (crisp differences, rare rank flips) yet small
  // against the base range, so shades that overshoot the range -- the one
  // own-value tell that bounded ladders cannot avoid -- stay rare.
  double gap = uniform_real(rng, 0.08, 0.14);
  // the base spans the full shade range (extremes may leave it) so that a
  // single shade value says as little as possible about its rank
  double base = uniform_real(rng, 0.2, 0.9);
  double size = uniform_real(rng, 0.2, 0.8);

  std::vector<std::pair<double, Role>> ladder = {
      {base - gap, Role::kShadeDarkest},
      {base, Role::kShadeMedian},
      {base + gap, Role::kShadeLightest},
  };
  deterministic_shuffle(ladder, rng);  // decouple region order from rank

  std::vector<ObjectPlan> plans;
  for (const auto& [shade, role] : ladder) {
    ObjectPlan plan;
    plan.role = role;
    plan.category = category;
    plan.color = color;
    plan.shade = shade;
    plan.size = size;
    plans.push_back(plan);
  }
  add_dilution(plans, config, category, 3, rng);
  place_on_grid(plans, rng);
  return plans;
}

/// Three identical objects in a horizontal line with independent random
/// spacings and placement, so no fixed function of one box can tell the
/// middle from the ends.
std::vector<ObjectPlan> plan_location_relative(const SynthConfig& config,
                                               std::mt19937_64& rng) {
  std::size_t category = uniform_index(rng, config.num_categories);
  std::size_t color = uniform_index(rng, synth_color_names().size());
  double shade = uniform_real(rng, 0.2, 0.9);
  double size = uniform_real(rng, 0.0, 0.2);  // small boxes leave placement room
  double side = object_side(size);

  // narrow spacing spread: the middle's position marginal then nearly
  // matches the ends' shifted copies, starving own-location rankers
  double d1 = uniform_real(rng, side + 20.0, side + 60.0);
  double d2 = uniform_real(rng, side + 20.0, side + 60.0);
  double margin = side / 2.0 + 8.0;
  double center = uniform_real(rng, margin + d1, kSceneSide - margin - d2);
  double cross = uniform_real(rng, margin, kSceneSide - margin);

  std::vector<std::pair<double, Role>> line = {
      {center - d1, Role::kLocationLeft},
      {center, Role::kLocationMiddle},
      {center + d2, Role::kLocationRight},
  };
  deterministic_shuffle(line, rng);  // decouple region order from geometry

  std::vector<ObjectPlan> plans;
  for (const auto& [x, role] : line) {
    ObjectPlan plan;
    plan.role = role;
    plan.category = category;
    plan.color = color;
    plan.shade = shade;
    plan.size = size;
    plan.side = side;
    plan.center_x = x;
    plan.center_y = cross;
    plans.push_back(plan);
  }
  return plans;
}

}  // namespace

SynthResult synthesize(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const auto& nouns = synth_category_nouns();
  const auto& colors = synth_color_names();

  SynthResult result;
  result.dataset.feature_dim = kSynthFeatureDim;
  result.features.dim = kSynthFeatureDim;

  for (std::size_t s = 0; s < config.num_scenes; ++s) {
    std::uint64_t scene_id = s + 1;
    bool relative = uniform_unit(rng) < config.relative_fraction;
    SceneKind kind = SceneKind::kAbsolute;
    if (relative) {
      bool location = config.allow_location_words && uniform_index(rng, 2) == 0;
      kind = location ? SceneKind::kLocationRelative : SceneKind::kShadeRelative;
    }

    std::vector<ObjectPlan> plans;
    switch (kind) {
      case SceneKind::kAbsolute: plans = plan_absolute(config, rng); break;
      case SceneKind::kLocationRelative: plans = plan_location_relative(config, rng); break;
      case SceneKind::kShadeRelative: plans = plan_shade_relative(config, rng); break;
    }

    Scene scene;
    scene.scene_id = scene_id;
    scene.width = kSceneSide;
    scene.height = kSceneSide;
    SynthGroundTruth truth;
    truth.scene_id = scene_id;
    truth.kind = kind;

    for (std::size_t k = 0; k < plans.size(); ++k) {
      const ObjectPlan& plan = plans[k];
      ObjectRegion region;
      region.region_id = scene_id * 100 + k;
      region.scene_id = scene_id;
      region.category_id = static_cast<int>(plan.category) + 1;
      double half = plan.side / 2.0;
      region.box = BoundingBox{plan.center_x - half, plan.center_y - half,
                               plan.center_x + half, plan.center_y + half};

      std::vector<double> clean = clean_feature(plan);
      region.feature.resize(kSynthFeatureDim);
      for (std::size_t d = 0; d < kSynthFeatureDim; ++d) {
        region.feature[d] = quantize(clean[d] + gaussian(rng, 0.0, config.noise_sigma));
      }
      truth.clean_features[region.region_id] = std::move(clean);
      scene.regions.push_back(std::move(region));
    }

    // The shade ladder's realized ranks must agree with the clean ranks or
    // the comparative words would be false of the written features; at the
    // default gap/sigma a flip is a ~5-sigma event, so redraws are rare.
    if (kind == SceneKind::kShadeRelative) {
      auto realized = [&](Role role) {
        for (std::size_t k = 0; k < plans.size(); ++k) {
          if (plans[k].role == role) return scene.regions[k].feature[kShadeDim];
        }
        throw IntegrityError("synth-integrity", "shade ladder role missing");
      };
      for (int attempt = 0;; ++attempt) {
        if (realized(Role::kShadeDarkest) < realized(Role::kShadeMedian) &&
            realized(Role::kShadeMedian) < realized(Role::kShadeLightest)) {
          break;
        }
        if (attempt >= 100) {
          throw IntegrityError("synth-integrity", "shade ladder unrankable in scene " +
                                                      std::to_string(scene_id));
        }
        for (std::size_t k = 0; k < plans.size(); ++k) {
          if (plans[k].role == Role::kDilution) continue;
          const auto& clean = truth.clean_features.at(scene.regions[k].region_id);
          for (std::size_t d = 0; d < kSynthFeatureDim; ++d) {
            scene.regions[k].feature[d] =
                quantize(clean[d] + gaussian(rng, 0.0, config.noise_sigma));
          }
        }
      }
    }
    for (const ObjectRegion& region : scene.regions) {
      result.features.rows.push_back({region.region_id, region.feature});
    }

    // The scene context describes composition (what is present), never an
    // aggregate of attribute values: a scorer given own features plus any
    // attribute average could reconstruct own-minus-mean and so smuggle in
    // the comparisons the baseline is defined not to have.  Its noise is a
    // fresh draw for the same reason -- echoing region noise would leak it.
    std::vector<double> context(kSynthFeatureDim, 0.0);
    for (const ObjectPlan& plan : plans) {
      context[static_cast<std::size_t>(plan.category)] += 1.0;
      context[kColorOffset + static_cast<std::size_t>(plan.color)] += 1.0;
    }
    double count = static_cast<double>(plans.size());
    for (std::size_t d = 0; d < kColorOffset + kNumPaletteColors; ++d) {
      context[d] /= count;
    }
    context[kContextCountDim] = count / static_cast<double>(kMaxObjects);
    for (std::size_t d = 0; d < kSynthFeatureDim; ++d) {
      context[d] = quantize(context[d] + gaussian(rng, 0.0, config.noise_sigma));
    }
    scene.context_features[ContextSource::kGlobal] = context;
    result.features.rows.push_back({context_key(scene_id, ContextSource::kGlobal), context});

    for (std::size_t k = 0; k < plans.size(); ++k) {
      const ObjectPlan& plan = plans[k];
      const std::string& noun = nouns[plan.category];
      const std::string& color = colors[plan.color];
      std::vector<std::string> templates;
      switch (plan.role) {
        case Role::kAbsolutePair:
          templates = {"the " + color + " " + noun, color + " " + noun,
                       "that " + color + " " + noun};
          break;
        case Role::kDilution:
          templates = {"the " + noun, noun, "that " + noun};
          break;
        case Role::kShadeMedian:
          templates = {"the medium " + noun, "medium " + noun, "that medium " + noun};
          truth.relative_targets.push_back(scene.regions[k].region_id);
          break;
        case Role::kShadeDarkest:
        case Role::kShadeLightest: {
          const std::string word = plan.role == Role::kShadeDarkest ? "darker" : "lighter";
          templates = {"the " + word + " " + noun, word + " " + noun,
                       "the " + word + " " + color + " " + noun};
          break;
        }
        case Role::kLocationMiddle:
          templates = {"the middle " + noun, "middle " + noun,
                       "the " + noun + " in the middle"};
          truth.relative_targets.push_back(scene.regions[k].region_id);
          break;
        case Role::kLocationLeft:
        case Role::kLocationRight: {
          const std::string side = plan.role == Role::kLocationLeft ? "left" : "right";
          templates = {"the " + noun + " on the " + side, noun + " on the " + side,
                       "that " + noun + " on the " + side};
          break;
        }
      }
      for (std::size_t j = 0; auto& raw : take_templates(std::move(templates), rng)) {
        RefExpression expr;
        expr.expression_id = scene.regions[k].region_id * 10 + j++;
        expr.region_id = scene.regions[k].region_id;
        expr.raw_text = std::move(raw);
        expr.words = tokenize(expr.raw_text);
        result.dataset.expressions.push_back(std::move(expr));
      }
    }

    std::sort(truth.relative_targets.begin(), truth.relative_targets.end());
    result.dataset.scenes.push_back(std::move(scene));
    result.ground_truth.push_back(std::move(truth));
  }
  result.dataset.rebuild_index();

  // Gricean check: every emitted expression picks out exactly its region.
  for (const RefExpression& expr : result.dataset.expressions) {
    const Scene& scene = result.dataset.scene_of_region(expr.region_id);
    const SynthGroundTruth& truth = result.ground_truth[scene.scene_id - 1];
    auto resolved = resolve_expression(scene, truth, expr.words);
    if (resolved.size() != 1 || resolved[0] != expr.region_id) {
      throw IntegrityError("synth-integrity",
                           "expression '" + expr.raw_text + "' resolves to " +
                               std::to_string(resolved.size()) + " regions in scene " +
                               std::to_string(scene.scene_id));
    }
  }
  return result;
}

void write_synth(const SynthResult& result, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  nlohmann::ordered_json doc;
  doc["images"] = nlohmann::ordered_json::array();
  doc["annotations"] = nlohmann::ordered_json::array();
  doc["refs"] = nlohmann::ordered_json::array();
  for (const Scene& scene : result.dataset.scenes) {
    doc["images"].push_back({{"id", scene.scene_id},
                             {"width", scene.width},
                             {"height", scene.height}});
    for (const ObjectRegion& region : scene.regions) {
      doc["annotations"].push_back(
          {{"id", region.region_id},
           {"image_id", scene.scene_id},
           {"category_id", region.category_id},
           {"bbox", {region.box.x_tl, region.box.y_tl, region.box.width(),
                     region.box.height()}}});
    }
  }
  for (const RefExpression& expr : result.dataset.expressions) {
    doc["refs"].push_back({{"expression_id", expr.expression_id},
                           {"region_id", expr.region_id},
                           {"raw", expr.raw_text}});
  }
  std::ofstream annotation((fs::path(out_dir) / "annotation.json").string());
  if (!annotation) throw IoError("cannot write annotation.json in " + out_dir);
  annotation << doc.dump(2) << "\n";

  write_feature_file((fs::path(out_dir) / "features.bin").string(), result.features);

  nlohmann::ordered_json truth_doc;
  truth_doc["scenes"] = nlohmann::ordered_json::array();
  for (const SynthGroundTruth& truth : result.ground_truth) {
    truth_doc["scenes"].push_back({{"scene_id", truth.scene_id},
                                   {"kind", scene_kind_name(truth.kind)},
                                   {"relative_targets", truth.relative_targets}});
  }
  std::ofstream truth_file((fs::path(out_dir) / "truth.json").string());
  if (!truth_file) throw IoError("cannot write truth.json in " + out_dir);
  truth_file << truth_doc.dump(2) << "\n";
}

}  // namespace refexp
