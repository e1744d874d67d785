#include "refexp/features.hpp"

#include <algorithm>
#include <cmath>

#include "refexp/errors.hpp"

namespace refexp {

std::string comparison_set_name(ComparisonSet set) {
  switch (set) {
    case ComparisonSet::kSameCategory: return "same_category";
    case ComparisonSet::kDifferentCategory: return "different_category";
    case ComparisonSet::kAllObjects: return "all_objects";
  }
  throw DomainError("unknown comparison set");
}

ComparisonSet comparison_set_from_name(const std::string& name) {
  if (name == "same_category") return ComparisonSet::kSameCategory;
  if (name == "different_category") return ComparisonSet::kDifferentCategory;
  if (name == "all_objects") return ComparisonSet::kAllObjects;
  throw DomainError("unknown comparison set '" + name + "'");
}

std::string pooling_name(Pooling pooling) {
  switch (pooling) {
    case Pooling::kMin: return "min";
    case Pooling::kMax: return "max";
    case Pooling::kAvg: return "avg";
  }
  throw DomainError("unknown pooling");
}

Pooling pooling_from_name(const std::string& name) {
  if (name == "min") return Pooling::kMin;
  if (name == "max") return Pooling::kMax;
  if (name == "avg") return Pooling::kAvg;
  throw DomainError("unknown pooling '" + name + "'");
}

void ComparisonConfig::validate() const {
  if (max_location_neighbors < 1) throw DomainError("max_location_neighbors must be >= 1");
  if (!(epsilon > 0.0)) throw DomainError("epsilon must be positive");
}

std::string context_choice_name(ContextChoice choice) {
  switch (choice) {
    case ContextChoice::kNone: return "none";
    case ContextChoice::kGlobal: return "global";
    case ContextChoice::kScale2: return "scale2";
    case ContextChoice::kScale3: return "scale3";
    case ContextChoice::kScale4: return "scale4";
  }
  throw DomainError("unknown context choice");
}

ContextChoice context_choice_from_name(const std::string& name) {
  if (name == "none") return ContextChoice::kNone;
  if (name == "global") return ContextChoice::kGlobal;
  if (name == "scale2") return ContextChoice::kScale2;
  if (name == "scale3") return ContextChoice::kScale3;
  if (name == "scale4") return ContextChoice::kScale4;
  throw DomainError("unknown context choice '" + name + "'");
}

std::vector<double> FeatureBundle::concat() const {
  std::vector<double> out;
  out.reserve(dim());
  for (const std::vector<double>* part : {&o, &g, &l, &dv, &dl}) {
    out.insert(out.end(), part->begin(), part->end());
  }
  return out;
}

std::size_t bundle_dim(std::size_t feature_dim, const FeatureConfig& cfg) {
  return 3 * feature_dim + 5 +
         5 * static_cast<std::size_t>(cfg.comparison.max_location_neighbors);
}

std::vector<double> encode_location(const BoundingBox& box, double width, double height) {
  if (!(width > 0.0 && height > 0.0)) throw DomainError("image extents must be positive");
  constexpr double kTol = 1e-6;
  if (box.x_tl < -kTol || box.y_tl < -kTol || box.x_br > width + kTol ||
      box.y_br > height + kTol || box.x_tl > box.x_br || box.y_tl > box.y_br) {
    throw DomainError("box lies outside the image");
  }
  return {box.x_tl / width, box.y_tl / height, box.x_br / width, box.y_br / height,
          box.area() / (width * height)};
}

std::vector<const ObjectRegion*> select_comparisons(const ObjectRegion& target,
                                                    std::span<const ObjectRegion> regions,
                                                    const ComparisonConfig& cfg) {
  cfg.validate();
  std::vector<const ObjectRegion*> out;
  for (const ObjectRegion& region : regions) {
    if (region.region_id == target.region_id) continue;
    bool same = region.category_id == target.category_id;
    switch (cfg.comparison_set) {
      case ComparisonSet::kSameCategory:
        if (same) out.push_back(&region);
        break;
      case ComparisonSet::kDifferentCategory:
        if (!same) out.push_back(&region);
        break;
      case ComparisonSet::kAllObjects:
        out.push_back(&region);
        break;
    }
  }
  return out;
}

std::vector<const ObjectRegion*> select_comparisons(const ObjectRegion& target,
                                                    const Scene& scene,
                                                    const ComparisonConfig& cfg) {
  return select_comparisons(target, std::span<const ObjectRegion>(scene.regions), cfg);
}

std::vector<double> visual_difference(const ObjectRegion& target,
                                      const std::vector<const ObjectRegion*>& comparisons,
                                      const ComparisonConfig& cfg) {
  cfg.validate();
  const std::size_t dim = target.feature.size();
  std::vector<double> pooled(dim, 0.0);
  if (comparisons.empty()) return pooled;

  bool first = true;
  std::vector<double> diff(dim);
  for (const ObjectRegion* other : comparisons) {
    if (other->feature.size() != dim) {
      throw DimensionError("comparison feature dimension mismatch");
    }
    double norm_sq = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      diff[d] = target.feature[d] - other->feature[d];
      norm_sq += diff[d] * diff[d];
    }
    double norm = std::sqrt(norm_sq);
    if (norm < cfg.epsilon) {
      std::fill(diff.begin(), diff.end(), 0.0);
    } else {
      for (double& v : diff) v /= norm;
    }
    switch (cfg.pooling) {
      case Pooling::kAvg:
        for (std::size_t d = 0; d < dim; ++d) pooled[d] += diff[d];
        break;
      case Pooling::kMin:
        for (std::size_t d = 0; d < dim; ++d) {
          pooled[d] = first ? diff[d] : std::min(pooled[d], diff[d]);
        }
        break;
      case Pooling::kMax:
        for (std::size_t d = 0; d < dim; ++d) {
          pooled[d] = first ? diff[d] : std::max(pooled[d], diff[d]);
        }
        break;
    }
    first = false;
  }
  if (cfg.pooling == Pooling::kAvg) {
    for (double& v : pooled) v /= static_cast<double>(comparisons.size());
  }
  return pooled;
}

std::vector<double> location_difference(const ObjectRegion& target,
                                        std::span<const ObjectRegion> regions,
                                        const ComparisonConfig& cfg) {
  cfg.validate();
  double w = target.box.width();
  double h = target.box.height();
  if (!(w > 0.0 && h > 0.0)) throw DomainError("zero-area target box in location difference");

  struct Neighbor {
    double distance;
    const ObjectRegion* region;
  };
  std::vector<Neighbor> neighbors;
  for (const ObjectRegion& region : regions) {
    if (region.region_id == target.region_id) continue;
    if (region.category_id != target.category_id) continue;
    double dx = region.box.center_x() - target.box.center_x();
    double dy = region.box.center_y() - target.box.center_y();
    neighbors.push_back({std::sqrt(dx * dx + dy * dy), &region});
  }
  std::sort(neighbors.begin(), neighbors.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.region->region_id < b.region->region_id;
  });

  std::size_t max_n = static_cast<std::size_t>(cfg.max_location_neighbors);
  std::vector<double> out(5 * max_n, 0.0);
  std::size_t used = std::min(max_n, neighbors.size());
  for (std::size_t k = 0; k < used; ++k) {
    const BoundingBox& nb = neighbors[k].region->box;
    out[5 * k + 0] = (nb.x_tl - target.box.x_tl) / w;
    out[5 * k + 1] = (nb.y_tl - target.box.y_tl) / h;
    out[5 * k + 2] = (nb.x_br - target.box.x_br) / w;
    out[5 * k + 3] = (nb.y_br - target.box.y_br) / h;
    out[5 * k + 4] = nb.area() / target.box.area();
  }
  return out;
}

std::vector<double> location_difference(const ObjectRegion& target, const Scene& scene,
                                        const ComparisonConfig& cfg) {
  return location_difference(target, std::span<const ObjectRegion>(scene.regions), cfg);
}

FeatureBundle build_bundle(const ObjectRegion& target, std::span<const ObjectRegion> peers,
                           double scene_width, double scene_height,
                           const std::map<ContextSource, std::vector<double>>& context_features,
                           const FeatureConfig& cfg) {
  cfg.comparison.validate();
  const std::size_t dim = target.feature.size();

  FeatureBundle bundle;
  bundle.o = target.feature;
  bundle.l = encode_location(target.box, scene_width, scene_height);

  switch (cfg.context) {
    case ContextChoice::kNone:
      bundle.g.assign(dim, 0.0);
      break;
    case ContextChoice::kGlobal: {
      auto it = context_features.find(ContextSource::kGlobal);
      if (it != context_features.end()) {
        bundle.g = it->second;
      } else {
        // synthesized fallback: mean of all peer features
        bundle.g.assign(dim, 0.0);
        std::size_t count = 0;
        for (const ObjectRegion& peer : peers) {
          if (peer.feature.size() != dim) {
            throw DimensionError("peer feature dimension mismatch");
          }
          for (std::size_t d = 0; d < dim; ++d) bundle.g[d] += peer.feature[d];
          ++count;
        }
        if (count == 0) throw MissingFeatureError("no regions to synthesize global context from");
        for (double& v : bundle.g) v /= static_cast<double>(count);
      }
      break;
    }
    case ContextChoice::kScale2:
    case ContextChoice::kScale3:
    case ContextChoice::kScale4: {
      ContextSource source = cfg.context == ContextChoice::kScale2   ? ContextSource::kScale2
                             : cfg.context == ContextChoice::kScale3 ? ContextSource::kScale3
                                                                     : ContextSource::kScale4;
      auto it = context_features.find(source);
      if (it == context_features.end()) {
        throw MissingFeatureError("scene has no stored " + context_source_name(source) +
                                  " context feature");
      }
      bundle.g = it->second;
      break;
    }
  }
  if (bundle.g.size() != dim) {
    throw DimensionError("context feature dimension mismatch");
  }

  if (cfg.use_visual_difference) {
    bundle.dv = visual_difference(target, select_comparisons(target, peers, cfg.comparison),
                                  cfg.comparison);
  } else {
    bundle.dv.assign(dim, 0.0);
  }
  if (cfg.use_location_difference) {
    bundle.dl = location_difference(target, peers, cfg.comparison);
  } else {
    bundle.dl.assign(5 * static_cast<std::size_t>(cfg.comparison.max_location_neighbors), 0.0);
  }
  return bundle;
}

FeatureBundle build_bundle(const ObjectRegion& target, const Scene& scene,
                           const FeatureConfig& cfg) {
  return build_bundle(target, std::span<const ObjectRegion>(scene.regions), scene.width,
                      scene.height, scene.context_features, cfg);
}

}  // namespace refexp
