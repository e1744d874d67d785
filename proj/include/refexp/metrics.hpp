#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refexp/comprehension.hpp"
#include "refexp/dataset.hpp"
#include "refexp/features.hpp"
#include "refexp/speaker.hpp"

namespace refexp {

/// Sentence-level BLEU-n for n in {1, 2}: modified n-gram precision clipped
/// against all references, add-one smoothing for orders >= 2, geometric
/// mean, and brevity penalty against the closest reference length (ties
/// take the shorter). Empty candidates score 0.
double bleu(const std::vector<std::string>& candidate,
            const std::vector<std::vector<std::string>>& references, int n);

/// Longest-common-subsequence F-measure (beta = 1.2), maximum over
/// references. Empty candidates score 0.
double rouge_l(const std::vector<std::string>& candidate,
               const std::vector<std::vector<std::string>>& references);

/// Exact-match unigram variant: greedy chunk-extending alignment,
/// recall-weighted harmonic mean 10PR/(9P + R), fragmentation penalty
/// 0.5 * (chunks / matches)^3, maximum over references. Empty candidates
/// and zero-match pairs score 0.
double meteor_exact(const std::vector<std::string>& candidate,
                    const std::vector<std::vector<std::string>>& references);

/// One generated expression labeled with its object's category.
struct LabeledExpression {
  int category_id = 0;
  std::vector<std::string> words;
};

/// Fraction of scenes in which two same-category objects received exactly
/// the same word sequence. Smaller is better.
double duplicate_rate(const std::vector<std::vector<LabeledExpression>>& scenes);

/// One decoded expression for a region.
struct RegionGeneration {
  std::uint64_t region_id = 0;
  std::vector<int> token_ids;       // END-terminated
  std::vector<std::string> words;   // decoded, END stripped
  double logprob = 0.0;
};

/// Decodes one expression per referred region in `regions` (all referred
/// regions when empty). Tied decoding runs per scene on same-category
/// groups; untied decoding handles each region alone. Output order follows
/// scene order, then region order within the scene.
std::vector<RegionGeneration> generate_for_dataset(SpeakerModel& model,
                                                   const Vocabulary& vocab,
                                                   const Dataset& dataset,
                                                   const std::vector<std::uint64_t>& regions,
                                                   const FeatureConfig& features,
                                                   const GenerationOptions& options);

struct GenerationMetrics {
  double bleu1 = 0.0;
  double bleu2 = 0.0;
  double rouge_l = 0.0;
  double meteor = 0.0;
  double duplicate_rate = 0.0;
  std::size_t expressions = 0;       // generated expressions scored
  std::size_t duplicate_scenes = 0;  // scenes eligible for duplicate_rate
};

/// Sentence-level metrics of the generations against each region's
/// annotated expressions, averaged over regions; duplicate_rate over the
/// scenes holding at least two same-category generated regions.
GenerationMetrics evaluate_generation(const Dataset& dataset,
                                      const std::vector<RegionGeneration>& generations);

}  // namespace refexp
