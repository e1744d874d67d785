#include "refexp/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>

#include "refexp/errors.hpp"
#include "refexp/rng_util.hpp"

namespace refexp {

std::string objective_name(Objective objective) {
  switch (objective) {
    case Objective::kMle: return "mle";
    case Objective::kMmi: return "mmi";
  }
  throw DomainError("unknown objective");
}

Objective objective_from_name(const std::string& name) {
  if (name == "mle") return Objective::kMle;
  if (name == "mmi") return Objective::kMmi;
  throw DomainError("unknown objective '" + name + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw DomainError("learning_rate must be positive");
  if (epochs < 1) throw DomainError("epochs must be >= 1");
  if (batch_scenes < 1) throw DomainError("batch_scenes must be >= 1");
  if (!(grad_clip_norm > 0.0)) throw DomainError("grad_clip_norm must be positive");
  if (mmi_weight < 0.0) throw DomainError("mmi_weight must be >= 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw DomainError("lr_decay must lie in (0, 1]");
  if (lr_decay_epochs < 1) throw DomainError("lr_decay_epochs must be >= 1");
  if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
    throw DomainError("validation_fraction must lie in [0, 1)");
  }
}

std::vector<TrainScene> prepare_scenes(const Dataset& dataset,
                                       const std::vector<std::uint64_t>& region_filter,
                                       const FeatureConfig& features,
                                       std::size_t max_negatives) {
  std::unordered_map<std::uint64_t, bool> allowed;
  for (std::uint64_t id : region_filter) allowed[id] = true;
  const bool keep_all = region_filter.empty();

  std::vector<TrainScene> out;
  for (const Scene& scene : dataset.scenes) {
    TrainScene ts;
    ts.scene_id = scene.scene_id;
    bool any_target = false;
    for (const ObjectRegion& region : scene.regions) {
      ts.region_ids.push_back(region.region_id);
      ts.category_ids.push_back(region.category_id);
      ts.bundles.push_back(build_bundle(region, scene, features).concat());
      ts.expressions.emplace_back();
      ts.candidate_sets.emplace_back();
    }
    for (std::size_t i = 0; i < scene.regions.size(); ++i) {
      const ObjectRegion& region = scene.regions[i];
      if (!keep_all && allowed.find(region.region_id) == allowed.end()) continue;
      const auto& expr_indices = dataset.expressions_of(region.region_id);
      if (expr_indices.empty()) continue;

      for (std::size_t ei : expr_indices) {
        const RefExpression& expr = dataset.expressions[ei];
        if (expr.token_ids.empty()) {
          throw DomainError("expression " + std::to_string(expr.expression_id) +
                            " has not been encoded");
        }
        ts.expressions[i].push_back(expr.token_ids);
      }

      // negatives: same-category scene regions when any exist, else all
      // others; capped at the nearest max_negatives by center distance
      struct Negative {
        double distance;
        std::uint64_t region_id;
        std::size_t index;
      };
      std::vector<Negative> negatives;
      bool has_same_category = false;
      for (std::size_t j = 0; j < scene.regions.size(); ++j) {
        if (j != i && scene.regions[j].category_id == region.category_id) {
          has_same_category = true;
          break;
        }
      }
      for (std::size_t j = 0; j < scene.regions.size(); ++j) {
        if (j == i) continue;
        if (has_same_category && scene.regions[j].category_id != region.category_id) continue;
        double dx = scene.regions[j].box.center_x() - region.box.center_x();
        double dy = scene.regions[j].box.center_y() - region.box.center_y();
        negatives.push_back(
            {std::sqrt(dx * dx + dy * dy), scene.regions[j].region_id, j});
      }
      std::sort(negatives.begin(), negatives.end(), [](const Negative& a, const Negative& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        return a.region_id < b.region_id;
      });
      if (negatives.size() > max_negatives) negatives.resize(max_negatives);

      ts.candidate_sets[i].push_back(i);
      for (const Negative& n : negatives) ts.candidate_sets[i].push_back(n.index);
      any_target = true;
    }
    if (any_target) out.push_back(std::move(ts));
  }
  return out;
}

namespace {

struct BuiltLoss {
  int node = -1;
  std::size_t expressions = 0;
};

// Sum of per-token cross entropies over the batch, tied or untied.
BuiltLoss build_mle_terms(SpeakerModel& model, Graph& g,
                          const std::vector<const TrainScene*>& batch, bool tied) {
  std::vector<int> loss_nodes;
  std::size_t expressions = 0;
  for (const TrainScene* scene : batch) {
    if (tied) {
      // same-category target groups decode jointly
      std::map<int, std::vector<std::size_t>> by_category;
      for (std::size_t i = 0; i < scene->region_ids.size(); ++i) {
        if (!scene->expressions[i].empty()) {
          by_category[scene->category_ids[i]].push_back(i);
        }
      }
      for (const auto& [category, members] : by_category) {
        std::vector<TiedExample> group;
        for (std::size_t i : members) {
          TiedExample member;
          member.bundle = scene->bundles[i];
          member.expressions = scene->expressions[i];
          group.push_back(std::move(member));
        }
        auto loss = model.tied_group_loss(g, group);
        loss_nodes.push_back(loss.node);
        expressions += loss.expressions;
      }
    } else {
      for (std::size_t i = 0; i < scene->region_ids.size(); ++i) {
        for (const auto& tokens : scene->expressions[i]) {
          auto loss = model.example_loss(g, scene->bundles[i], tokens);
          loss_nodes.push_back(loss.node);
          expressions += 1;
        }
      }
    }
  }
  if (loss_nodes.empty()) throw DomainError("batch contains no expressions");
  return {g.add_n(loss_nodes), expressions};
}

}  // namespace

int softmax_ratio_node(Graph& g, const std::vector<int>& logprob_nodes, std::size_t target) {
  if (logprob_nodes.empty()) throw DomainError("ratio needs at least one candidate");
  int logits = g.concat(logprob_nodes);
  return g.softmax_cross_entropy(logits, target);
}

BatchLoss mle_loss(SpeakerModel& model, const std::vector<const TrainScene*>& batch, bool tied,
                   bool want_grad) {
  Graph g;
  BuiltLoss built = build_mle_terms(model, g, batch, tied);
  int mean = g.scale(built.node, 1.0 / static_cast<double>(built.expressions));
  if (want_grad) g.backward(mean);
  return {g.value(mean), built.expressions};
}

BatchLoss mmi_loss(SpeakerModel& model, const std::vector<const TrainScene*>& batch, bool tied,
                   double mmi_weight, bool want_grad) {
  Graph g;
  BuiltLoss built = build_mle_terms(model, g, batch, tied);
  int mean_mle = g.scale(built.node, 1.0 / static_cast<double>(built.expressions));

  std::vector<int> ratio_terms;
  for (const TrainScene* scene : batch) {
    for (std::size_t i = 0; i < scene->region_ids.size(); ++i) {
      for (const auto& tokens : scene->expressions[i]) {
        std::vector<int> logprobs;
        for (std::size_t candidate : scene->candidate_sets[i]) {
          logprobs.push_back(
              model.sentence_logprob_node(g, scene->bundles[candidate], tokens));
        }
        ratio_terms.push_back(softmax_ratio_node(g, logprobs, 0));
      }
    }
  }
  int mean_ratio =
      g.scale(g.add_n(ratio_terms), 1.0 / static_cast<double>(ratio_terms.size()));
  int total = g.add(mean_mle, g.scale(mean_ratio, mmi_weight));
  if (want_grad) g.backward(total);
  return {g.value(total), built.expressions};
}

void clip_gradients(ParamStore& params, double max_norm) {
  if (!(max_norm > 0.0)) throw DomainError("clip norm must be positive");
  double norm = params.grad_norm();
  if (norm > max_norm) params.scale_grad(max_norm / norm);
}

TrainResult train(SpeakerModel& model, const Dataset& dataset,
                  const std::vector<std::uint64_t>& region_filter,
                  const FeatureConfig& features, const TrainConfig& config,
                  const std::string& checkpoint_path, const std::string& metrics_path) {
  config.validate();

  std::vector<TrainScene> scenes =
      prepare_scenes(dataset, region_filter, features, config.max_negatives);
  if (scenes.empty()) throw DomainError("no scenes with referred regions to train on");

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  deterministic_shuffle(order, rng);

  std::size_t n_val = static_cast<std::size_t>(
      std::llround(config.validation_fraction * static_cast<double>(scenes.size())));
  n_val = std::min(n_val, scenes.size() - 1);
  std::vector<std::size_t> val_scenes(order.begin(),
                                      order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> fit_scenes(order.begin() + static_cast<std::ptrdiff_t>(n_val),
                                      order.end());
  const bool has_val = !val_scenes.empty();

  TrainResult result;
  std::vector<std::uint64_t> val_regions;
  for (std::size_t s : val_scenes) {
    result.validation_scenes.push_back(scenes[s].scene_id);
    for (std::size_t i = 0; i < scenes[s].region_ids.size(); ++i) {
      if (!scenes[s].expressions[i].empty()) {
        val_regions.push_back(scenes[s].region_ids[i]);
      }
    }
  }
  std::sort(result.validation_scenes.begin(), result.validation_scenes.end());
  std::sort(val_regions.begin(), val_regions.end());

  std::ofstream metrics;
  if (!metrics_path.empty()) {
    metrics.open(metrics_path, std::ios::trunc);
    if (!metrics) throw IoError("cannot open " + metrics_path + " for writing");
    metrics << "epoch,loss,val_acc\n";
  }

  result.best_val_accuracy = -1.0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    double lr = config.learning_rate *
                std::pow(config.lr_decay,
                         static_cast<double>((epoch - 1) / config.lr_decay_epochs));
    deterministic_shuffle(fit_scenes, rng);

    double loss_sum = 0.0;
    std::size_t expr_sum = 0;
    for (std::size_t start = 0; start < fit_scenes.size(); start += config.batch_scenes) {
      std::vector<const TrainScene*> batch;
      for (std::size_t k = start;
           k < std::min(start + config.batch_scenes, fit_scenes.size()); ++k) {
        batch.push_back(&scenes[fit_scenes[k]]);
      }
      model.params().zero_grad();
      BatchLoss loss = config.objective == Objective::kMle
                           ? mle_loss(model, batch, config.tied, true)
                           : mmi_loss(model, batch, config.tied, config.mmi_weight, true);
      if (!std::isfinite(loss.value)) {
        std::ostringstream what;
        what << "loss is not finite at epoch " << epoch << ", batch starting at position "
             << start << " (scene ids:";
        for (const TrainScene* s : batch) what << " " << s->scene_id;
        what << ")";
        throw NumericError(what.str());
      }
      clip_gradients(model.params(), config.grad_clip_norm);
      model.params().apply_sgd(lr);
      loss_sum += loss.value * static_cast<double>(loss.expressions);
      expr_sum += loss.expressions;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = expr_sum == 0 ? 0.0 : loss_sum / static_cast<double>(expr_sum);
    if (has_val) {
      auto scorer = model_scorer(model, features);
      auto eval = evaluate_comprehension(dataset, val_regions, scorer);
      stats.val_accuracy = eval.accuracy();
    }
    result.epochs.push_back(stats);
    if (metrics.is_open()) {
      metrics << stats.epoch << "," << stats.loss << "," << stats.val_accuracy << "\n";
      metrics.flush();
    }

    bool improved = has_val ? stats.val_accuracy > result.best_val_accuracy
                            : epoch == config.epochs;
    if (improved) {
      result.best_val_accuracy = has_val ? stats.val_accuracy : 0.0;
      result.best_epoch = epoch;
      if (!checkpoint_path.empty()) model.save(checkpoint_path);
    }
  }
  return result;
}

}  // namespace refexp
