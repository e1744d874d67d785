#include "refexp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>

#include "refexp/errors.hpp"

namespace refexp {

namespace {

using Words = std::vector<std::string>;

std::map<Words, std::size_t> ngram_counts(const Words& words, std::size_t order) {
  std::map<Words, std::size_t> counts;
  if (words.size() < order) return counts;
  for (std::size_t i = 0; i + order <= words.size(); ++i) {
    counts[Words(words.begin() + i, words.begin() + i + order)] += 1;
  }
  return counts;
}

std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double meteor_against(const Words& candidate, const Words& reference) {
  if (reference.empty()) return 0.0;
  // greedy alignment preferring to extend the current chunk
  std::vector<int> align(candidate.size(), -1);
  std::vector<bool> used(reference.size(), false);
  int prev = -2;
  std::size_t matches = 0;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    int pick = -1;
    int next = prev + 1;
    if (next >= 0 && next < static_cast<int>(reference.size()) && !used[next] &&
        reference[next] == candidate[i]) {
      pick = next;
    } else {
      for (std::size_t j = 0; j < reference.size(); ++j) {
        if (!used[j] && reference[j] == candidate[i]) {
          pick = static_cast<int>(j);
          break;
        }
      }
    }
    if (pick >= 0) {
      used[pick] = true;
      align[i] = pick;
      prev = pick;
      ++matches;
    }
  }
  if (matches == 0) return 0.0;

  std::size_t chunks = 0;
  int last_i = -5;
  int last_j = -5;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (align[i] < 0) continue;
    if (!(static_cast<int>(i) == last_i + 1 && align[i] == last_j + 1)) ++chunks;
    last_i = static_cast<int>(i);
    last_j = align[i];
  }

  double m = static_cast<double>(matches);
  double precision = m / static_cast<double>(candidate.size());
  double recall = m / static_cast<double>(reference.size());
  double fmean = 10.0 * precision * recall / (recall + 9.0 * precision);
  double frag = static_cast<double>(chunks) / m;
  double penalty = 0.5 * frag * frag * frag;
  return fmean * (1.0 - penalty);
}

}  // namespace

double bleu(const Words& candidate, const std::vector<Words>& references, int n) {
  if (n < 1 || n > 2) throw DomainError("bleu order must be 1 or 2");
  if (references.empty()) throw DomainError("bleu needs at least one reference");
  if (candidate.empty()) return 0.0;

  double log_sum = 0.0;
  for (int order = 1; order <= n; ++order) {
    auto counts = ngram_counts(candidate, static_cast<std::size_t>(order));
    std::size_t total =
        candidate.size() >= static_cast<std::size_t>(order)
            ? candidate.size() - static_cast<std::size_t>(order) + 1
            : 0;
    std::size_t matched = 0;
    for (const auto& [gram, count] : counts) {
      std::size_t best = 0;
      for (const Words& reference : references) {
        auto ref_counts = ngram_counts(reference, static_cast<std::size_t>(order));
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) best = std::max(best, it->second);
      }
      matched += std::min(count, best);
    }
    double p;
    if (order == 1) {
      p = static_cast<double>(matched) / static_cast<double>(total);
    } else {  // add-one smoothing for the higher orders
      p = (static_cast<double>(matched) + 1.0) / (static_cast<double>(total) + 1.0);
    }
    if (p == 0.0) return 0.0;
    log_sum += std::log(p) / static_cast<double>(n);
  }

  // brevity penalty against the closest reference length, ties shorter
  std::size_t c = candidate.size();
  std::size_t r = references.front().size();
  for (const Words& reference : references) {
    std::size_t len = reference.size();
    auto gap = [c](std::size_t l) {
      return l > c ? l - c : c - l;
    };
    if (gap(len) < gap(r) || (gap(len) == gap(r) && len < r)) r = len;
  }
  double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return bp * std::exp(log_sum);
}

double rouge_l(const Words& candidate, const std::vector<Words>& references) {
  if (references.empty()) throw DomainError("rouge needs at least one reference");
  if (candidate.empty()) return 0.0;
  const double beta2 = 1.2 * 1.2;
  double best = 0.0;
  for (const Words& reference : references) {
    if (reference.empty()) continue;
    double lcs = static_cast<double>(lcs_length(candidate, reference));
    if (lcs == 0.0) continue;
    double precision = lcs / static_cast<double>(candidate.size());
    double recall = lcs / static_cast<double>(reference.size());
    double f = (1.0 + beta2) * precision * recall / (recall + beta2 * precision);
    best = std::max(best, f);
  }
  return best;
}

double meteor_exact(const Words& candidate, const std::vector<Words>& references) {
  if (references.empty()) throw DomainError("meteor needs at least one reference");
  if (candidate.empty()) return 0.0;
  double best = 0.0;
  for (const Words& reference : references) {
    best = std::max(best, meteor_against(candidate, reference));
  }
  return best;
}

double duplicate_rate(const std::vector<std::vector<LabeledExpression>>& scenes) {
  if (scenes.empty()) throw DomainError("duplicate rate needs at least one scene");
  std::size_t duplicated = 0;
  for (const auto& scene : scenes) {
    bool has_duplicate = false;
    for (std::size_t i = 0; i < scene.size() && !has_duplicate; ++i) {
      for (std::size_t j = i + 1; j < scene.size(); ++j) {
        if (scene[i].category_id == scene[j].category_id && scene[i].words == scene[j].words) {
          has_duplicate = true;
          break;
        }
      }
    }
    if (has_duplicate) ++duplicated;
  }
  return static_cast<double>(duplicated) / static_cast<double>(scenes.size());
}

std::vector<RegionGeneration> generate_for_dataset(SpeakerModel& model,
                                                   const Vocabulary& vocab,
                                                   const Dataset& dataset,
                                                   const std::vector<std::uint64_t>& regions,
                                                   const FeatureConfig& features,
                                                   const GenerationOptions& options) {
  std::unordered_map<std::uint64_t, bool> allowed;
  for (std::uint64_t id : regions) allowed[id] = true;
  const bool keep_all = regions.empty();

  std::vector<RegionGeneration> out;
  for (const Scene& scene : dataset.scenes) {
    // same-category groups decode together so tied mode sees its co-objects
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < scene.regions.size(); ++i) {
      const ObjectRegion& region = scene.regions[i];
      if (!keep_all && allowed.find(region.region_id) == allowed.end()) continue;
      if (dataset.expressions_of(region.region_id).empty()) continue;
      groups[region.category_id].push_back(i);
    }
    if (groups.empty()) continue;

    std::vector<RegionGeneration> scene_out;
    for (const auto& [category, members] : groups) {
      std::vector<std::vector<double>> bundles;
      for (std::size_t i : members) {
        bundles.push_back(build_bundle(scene.regions[i], scene, features).concat());
      }
      auto generated = model.generate(bundles, options);
      for (std::size_t k = 0; k < members.size(); ++k) {
        RegionGeneration gen;
        gen.region_id = scene.regions[members[k]].region_id;
        gen.token_ids = generated[k].token_ids;
        gen.logprob = generated[k].logprob;
        std::vector<int> body = gen.token_ids;
        if (!body.empty() && body.back() == Vocabulary::kEnd) body.pop_back();
        gen.words = vocab.decode(body);
        scene_out.push_back(std::move(gen));
      }
    }
    // scene order, then region order within the scene
    std::sort(scene_out.begin(), scene_out.end(),
              [](const RegionGeneration& a, const RegionGeneration& b) {
                return a.region_id < b.region_id;
              });
    for (auto& gen : scene_out) out.push_back(std::move(gen));
  }
  return out;
}

GenerationMetrics evaluate_generation(const Dataset& dataset,
                                      const std::vector<RegionGeneration>& generations) {
  GenerationMetrics metrics;
  if (generations.empty()) return metrics;

  std::map<std::uint64_t, std::vector<LabeledExpression>> by_scene;
  for (const RegionGeneration& gen : generations) {
    const auto& expr_indices = dataset.expressions_of(gen.region_id);
    if (expr_indices.empty()) {
      throw DomainError("region " + std::to_string(gen.region_id) +
                        " has no reference expressions to score against");
    }
    std::vector<Words> references;
    for (std::size_t ei : expr_indices) references.push_back(dataset.expressions[ei].words);

    metrics.bleu1 += bleu(gen.words, references, 1);
    metrics.bleu2 += bleu(gen.words, references, 2);
    metrics.rouge_l += rouge_l(gen.words, references);
    metrics.meteor += meteor_exact(gen.words, references);
    ++metrics.expressions;

    const ObjectRegion& region = dataset.region_by_id(gen.region_id);
    by_scene[region.scene_id].push_back({region.category_id, gen.words});
  }

  double count = static_cast<double>(metrics.expressions);
  metrics.bleu1 /= count;
  metrics.bleu2 /= count;
  metrics.rouge_l /= count;
  metrics.meteor /= count;

  // duplicate rate over scenes with a same-category generated pair
  std::vector<std::vector<LabeledExpression>> eligible;
  for (const auto& [scene_id, labeled] : by_scene) {
    std::map<int, std::size_t> per_category;
    bool has_pair = false;
    for (const LabeledExpression& e : labeled) {
      if (++per_category[e.category_id] >= 2) has_pair = true;
    }
    if (has_pair) eligible.push_back(labeled);
  }
  metrics.duplicate_scenes = eligible.size();
  metrics.duplicate_rate = eligible.empty() ? 0.0 : duplicate_rate(eligible);
  return metrics;
}

}  // namespace refexp
