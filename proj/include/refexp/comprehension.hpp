#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "refexp/dataset.hpp"
#include "refexp/features.hpp"
#include "refexp/speaker.hpp"

namespace refexp {

/// Area of intersection over area of union; 0 when the union is degenerate.
double iou(const BoundingBox& a, const BoundingBox& b);

struct ScoredRegion {
  std::uint64_t region_id = 0;
  double score = 0.0;
};

/// Scores one candidate as the hypothetical target: difference features are
/// computed against the other candidates, exactly as at deployment.
using CandidateScorer =
    std::function<double(const std::vector<int>& tokens, const ObjectRegion& candidate,
                         std::span<const ObjectRegion> candidates, const Scene& scene)>;

/// The model-backed scorer: untied sentence log-probability of the
/// expression conditioned on the candidate's feature bundle.
CandidateScorer model_scorer(SpeakerModel& model, const FeatureConfig& features);

/// Ranks candidates by descending score; ties take the lowest region id.
std::vector<ScoredRegion> comprehend(const std::vector<int>& tokens,
                                     std::span<const ObjectRegion> candidates,
                                     const Scene& scene, const CandidateScorer& scorer);

/// Candidate boxes from an external detector, keyed by scene.
struct DetectionSet {
  std::unordered_map<std::uint64_t, std::vector<ObjectRegion>> by_scene;
};

/// JSON of {"detections": [{"scene_id", "regions": [{"id", "category_id",
/// "bbox"=[x,y,w,h]}]}]} plus a standard feature file keyed by the detection
/// ids.
DetectionSet load_detections(const std::string& json_path, const std::string& feature_path);

struct ComprehensionResult {
  std::size_t total = 0;
  std::size_t correct = 0;
  std::size_t scenes_missing_detections = 0;
  double accuracy() const {
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  }
};

/// Evaluates every expression of `regions` (all referred regions when the
/// filter is empty). Ground-truth mode (detections == nullptr) compares the
/// argmax region id with the annotation; detection mode counts an argmax
/// whose box overlaps the truth with IoU > 0.5, and a scene without
/// detections counts as failure.
ComprehensionResult evaluate_comprehension(const Dataset& dataset,
                                           const std::vector<std::uint64_t>& regions,
                                           const CandidateScorer& scorer,
                                           const DetectionSet* detections = nullptr);

}  // namespace refexp
