#include "refexp/comprehension.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "refexp/errors.hpp"

namespace refexp {

double iou(const BoundingBox& a, const BoundingBox& b) {
  double ix = std::max(0.0, std::min(a.x_br, b.x_br) - std::max(a.x_tl, b.x_tl));
  double iy = std::max(0.0, std::min(a.y_br, b.y_br) - std::max(a.y_tl, b.y_tl));
  double intersection = ix * iy;
  double union_area = a.area() + b.area() - intersection;
  if (union_area <= 0.0) return 0.0;
  return intersection / union_area;
}

CandidateScorer model_scorer(SpeakerModel& model, const FeatureConfig& features) {
  return [&model, features](const std::vector<int>& tokens, const ObjectRegion& candidate,
                            std::span<const ObjectRegion> candidates, const Scene& scene) {
    if (candidate.feature.empty()) {
      throw MissingFeatureError("candidate region " + std::to_string(candidate.region_id) +
                                " has no feature vector");
    }
    FeatureBundle bundle = build_bundle(candidate, candidates, scene.width, scene.height,
                                        scene.context_features, features);
    return model.sentence_logprob(bundle.concat(), tokens);
  };
}

std::vector<ScoredRegion> comprehend(const std::vector<int>& tokens,
                                     std::span<const ObjectRegion> candidates,
                                     const Scene& scene, const CandidateScorer& scorer) {
  if (candidates.empty()) throw DomainError("no candidate regions to rank");
  std::vector<ScoredRegion> ranked;
  ranked.reserve(candidates.size());
  for (const ObjectRegion& candidate : candidates) {
    ranked.push_back({candidate.region_id, scorer(tokens, candidate, candidates, scene)});
  }
  std::sort(ranked.begin(), ranked.end(), [](const ScoredRegion& a, const ScoredRegion& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.region_id < b.region_id;
  });
  return ranked;
}

DetectionSet load_detections(const std::string& json_path, const std::string& feature_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open " + json_path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed detections JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("detections") || !doc["detections"].is_array()) {
    throw ParseError("detections root must contain a 'detections' array");
  }

  FeatureTable table = read_feature_file(feature_path);
  std::unordered_map<std::uint64_t, const FeatureRow*> by_key;
  for (const FeatureRow& row : table.rows) {
    if (!by_key.emplace(row.key, &row).second) {
      throw IntegrityError("feature-integrity",
                           "duplicate detection feature key " + std::to_string(row.key));
    }
  }

  DetectionSet set;
  for (const auto& entry : doc["detections"]) {
    if (!entry.contains("scene_id") || !entry.contains("regions")) {
      throw ParseError("detection entry needs 'scene_id' and 'regions'");
    }
    std::uint64_t scene_id = entry["scene_id"].get<std::uint64_t>();
    auto& regions = set.by_scene[scene_id];
    for (const auto& r : entry["regions"]) {
      ObjectRegion region;
      region.region_id = r.at("id").get<std::uint64_t>();
      region.scene_id = scene_id;
      region.category_id = r.value("category_id", 0);
      const auto& bbox = r.at("bbox");
      if (!bbox.is_array() || bbox.size() != 4) throw ParseError("'bbox' must be [x, y, w, h]");
      double x = bbox[0].get<double>();
      double y = bbox[1].get<double>();
      region.box = BoundingBox{x, y, x + bbox[2].get<double>(), y + bbox[3].get<double>()};
      auto it = by_key.find(region.region_id);
      if (it == by_key.end()) {
        throw IntegrityError("feature-integrity", "missing feature row for detection " +
                                                      std::to_string(region.region_id));
      }
      region.feature = it->second->values;
      regions.push_back(std::move(region));
    }
  }
  return set;
}

ComprehensionResult evaluate_comprehension(const Dataset& dataset,
                                           const std::vector<std::uint64_t>& regions,
                                           const CandidateScorer& scorer,
                                           const DetectionSet* detections) {
  std::vector<std::uint64_t> targets = regions;
  if (targets.empty()) {
    for (const Scene& scene : dataset.scenes) {
      for (const ObjectRegion& region : scene.regions) {
        if (!dataset.expressions_of(region.region_id).empty()) {
          targets.push_back(region.region_id);
        }
      }
    }
  }

  ComprehensionResult result;
  for (std::uint64_t region_id : targets) {
    const ObjectRegion& truth = dataset.region_by_id(region_id);
    const Scene& scene = dataset.scene_of_region(region_id);
    for (std::size_t expr_index : dataset.expressions_of(region_id)) {
      const RefExpression& expr = dataset.expressions[expr_index];
      if (expr.token_ids.empty()) {
        throw DomainError("expression " + std::to_string(expr.expression_id) +
                          " has not been encoded");
      }
      ++result.total;
      if (detections != nullptr) {
        auto it = detections->by_scene.find(scene.scene_id);
        if (it == detections->by_scene.end() || it->second.empty()) {
          ++result.scenes_missing_detections;  // counted as failure
          continue;
        }
        auto ranked = comprehend(expr.token_ids, it->second, scene, scorer);
        const ObjectRegion* top = nullptr;
        for (const ObjectRegion& cand : it->second) {
          if (cand.region_id == ranked.front().region_id) top = &cand;
        }
        if (top != nullptr && iou(top->box, truth.box) > 0.5) ++result.correct;
      } else {
        auto ranked = comprehend(expr.token_ids, scene.regions, scene, scorer);
        if (ranked.front().region_id == region_id) ++result.correct;
      }
    }
  }
  return result;
}

}  // namespace refexp
