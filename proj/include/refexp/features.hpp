#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "refexp/dataset.hpp"

namespace refexp {

enum class ComparisonSet { kSameCategory, kDifferentCategory, kAllObjects };
enum class Pooling { kMin, kMax, kAvg };

std::string comparison_set_name(ComparisonSet set);
ComparisonSet comparison_set_from_name(const std::string& name);
std::string pooling_name(Pooling pooling);
Pooling pooling_from_name(const std::string& name);

struct ComparisonConfig {
  ComparisonSet comparison_set = ComparisonSet::kSameCategory;
  Pooling pooling = Pooling::kAvg;
  int max_location_neighbors = 5;
  double epsilon = 1e-8;

  void validate() const;
};

/// Scene-level context to attach as g: none yields a zero vector, global
/// falls back to the mean of region features when no stored row exists,
/// windowed scales must be present in the feature file.
enum class ContextChoice { kNone, kGlobal, kScale2, kScale3, kScale4 };

std::string context_choice_name(ContextChoice choice);
ContextChoice context_choice_from_name(const std::string& name);

struct FeatureConfig {
  ComparisonConfig comparison;
  ContextChoice context = ContextChoice::kGlobal;
  bool use_visual_difference = true;
  bool use_location_difference = true;
};

/// The five concatenated parts of the model's visual input for one object.
struct FeatureBundle {
  std::vector<double> o;   // target appearance, D
  std::vector<double> g;   // scene context, D
  std::vector<double> l;   // location/size encoding, 5
  std::vector<double> dv;  // pooled appearance differences, D
  std::vector<double> dl;  // location differences, 5 * max_location_neighbors

  std::vector<double> concat() const;
  std::size_t dim() const { return o.size() + g.size() + l.size() + dv.size() + dl.size(); }
};

/// Input dimension of the bundle for feature dimension D.
std::size_t bundle_dim(std::size_t feature_dim, const FeatureConfig& cfg);

/// [x_tl/W, y_tl/H, x_br/W, y_br/H, area/(W*H)]; every entry lies in [0,1].
std::vector<double> encode_location(const BoundingBox& box, double width, double height);

/// Scene regions to compare the target against (target itself excluded).
std::vector<const ObjectRegion*> select_comparisons(const ObjectRegion& target,
                                                    std::span<const ObjectRegion> regions,
                                                    const ComparisonConfig& cfg);
std::vector<const ObjectRegion*> select_comparisons(const ObjectRegion& target,
                                                    const Scene& scene,
                                                    const ComparisonConfig& cfg);

/// Pooled L2-normalized appearance differences (target - comparison).
/// Pairs closer than epsilon contribute an exact zero vector; the average
/// divides by the full comparison count.
std::vector<double> visual_difference(const ObjectRegion& target,
                                      const std::vector<const ObjectRegion*>& comparisons,
                                      const ComparisonConfig& cfg);

/// Box offsets to the nearest same-category regions (center distance,
/// ties by region id), one 5-value block per neighbor, zero padded.
std::vector<double> location_difference(const ObjectRegion& target,
                                        std::span<const ObjectRegion> regions,
                                        const ComparisonConfig& cfg);
std::vector<double> location_difference(const ObjectRegion& target, const Scene& scene,
                                        const ComparisonConfig& cfg);

/// Assembles all five parts for one target among `peers` (which may be the
/// scene's regions or an arbitrary candidate list, e.g. detections).
FeatureBundle build_bundle(const ObjectRegion& target, std::span<const ObjectRegion> peers,
                           double scene_width, double scene_height,
                           const std::map<ContextSource, std::vector<double>>& context_features,
                           const FeatureConfig& cfg);
FeatureBundle build_bundle(const ObjectRegion& target, const Scene& scene,
                           const FeatureConfig& cfg);

}  // namespace refexp
