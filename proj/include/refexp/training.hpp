#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refexp/comprehension.hpp"
#include "refexp/dataset.hpp"
#include "refexp/features.hpp"
#include "refexp/speaker.hpp"

namespace refexp {

enum class Objective { kMle, kMmi };

std::string objective_name(Objective objective);
Objective objective_from_name(const std::string& name);

struct TrainConfig {
  Objective objective = Objective::kMle;
  double mmi_weight = 1.0;  // λ on the softmax-ratio terms
  bool tied = false;
  double learning_rate = 0.1;
  double grad_clip_norm = 5.0;
  std::size_t epochs = 10;
  std::size_t batch_scenes = 16;
  std::uint64_t seed = 1;
  double lr_decay = 0.5;
  std::size_t lr_decay_epochs = 10;
  double validation_fraction = 0.10;
  std::size_t max_negatives = 5;  // nearest-by-center cap on ratio candidates

  void validate() const;
};

/// One scene prepared for the optimizer: per referred region its bundle,
/// its END-terminated expressions, and the precomputed ratio candidates.
struct TrainScene {
  std::uint64_t scene_id = 0;
  std::vector<std::uint64_t> region_ids;
  std::vector<int> category_ids;
  std::vector<std::vector<double>> bundles;
  std::vector<std::vector<std::vector<int>>> expressions;  // [region][expr][token]
  /// indices into this struct's regions used as MMI candidates per region
  /// (target first)
  std::vector<std::vector<std::size_t>> candidate_sets;
};

/// Builds TrainScenes for every scene holding at least one referred region
/// from `region_filter` (all referred regions when empty). Candidate sets
/// follow the negatives rule: same-category regions if any exist, otherwise
/// all scene regions, capped at max_negatives nearest by center distance.
std::vector<TrainScene> prepare_scenes(const Dataset& dataset,
                                       const std::vector<std::uint64_t>& region_filter,
                                       const FeatureConfig& features,
                                       std::size_t max_negatives);

struct BatchLoss {
  double value = 0.0;          // objective value (mean per expression)
  std::size_t expressions = 0;
};

/// Mean over expressions of -log P(expression | object); tied mode decodes
/// same-category groups jointly. Accumulates gradients when requested.
BatchLoss mle_loss(SpeakerModel& model, const std::vector<const TrainScene*>& batch, bool tied,
                   bool want_grad);

/// mle part plus λ · mean softmax-ratio terms over the candidate sets
/// (untied scoring for every candidate).
BatchLoss mmi_loss(SpeakerModel& model, const std::vector<const TrainScene*>& batch, bool tied,
                   double mmi_weight, bool want_grad);

/// -log softmax(logprobs)[target] over scalar nodes; exposed for testing the
/// ratio arithmetic in isolation.
int softmax_ratio_node(Graph& g, const std::vector<int>& logprob_nodes, std::size_t target);

/// Scales gradients so the global norm is at most `max_norm`.
void clip_gradients(ParamStore& params, double max_norm);

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::vector<std::uint64_t> validation_scenes;
};

/// Full optimization loop: seeded validation holdout, shuffled scene
/// batches, SGD with clipping and step decay, per-epoch validation
/// comprehension, best checkpoint at `checkpoint_path` (plus sidecar), and
/// a `epoch,loss,val_acc` CSV at `metrics_path` when nonempty. Deterministic
/// for a fixed config and seed. Aborts with a numeric error naming the step
/// and scenes if the loss turns non-finite.
TrainResult train(SpeakerModel& model, const Dataset& dataset,
                  const std::vector<std::uint64_t>& region_filter,
                  const FeatureConfig& features, const TrainConfig& config,
                  const std::string& checkpoint_path, const std::string& metrics_path);

}  // namespace refexp
