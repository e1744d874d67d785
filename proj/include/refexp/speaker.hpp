#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "refexp/param_store.hpp"
#include "refexp/tensor.hpp"

namespace refexp {

struct ModelConfig {
  std::size_t word_dim = 32;     // word embedding width
  std::size_t visual_dim = 32;   // projected visual width
  std::size_t hidden_dim = 64;   // LSTM state width
  std::size_t vocab_size = 0;    // token count including specials
  std::size_t input_dim = 0;     // concatenated feature-bundle width
  std::size_t max_length = 12;   // decode cap, END included
  double epsilon = 1e-8;         // hidden-difference normalization guard

  void validate() const;
};

struct GeneratedExpression {
  std::vector<int> token_ids;  // ends with END unless truncated at max_length
  double logprob = 0.0;
};

/// One member of a same-category decoding group during teacher forcing.
struct TiedExample {
  std::vector<double> bundle;                 // concatenated feature bundle
  std::vector<std::vector<int>> expressions;  // END-terminated token id lists
};

struct GenerationOptions {
  bool tied = true;
  std::size_t beam_width = 1;  // 1 = greedy lockstep
  std::size_t max_length = 12;
};

/// Mean of L2-normalized differences between one hidden state and the rest;
/// value-level twin of the graph builder, used by forward-only decoding.
std::vector<double> hidden_difference_values(const std::vector<std::vector<double>>& hiddens,
                                             std::size_t self, double epsilon);

/// The recurrent speaker. Parameters live in a ParamStore with a fixed
/// insertion order so checkpoints are stable; all graph builders may be
/// freely combined within one Graph.
class SpeakerModel {
 public:
  explicit SpeakerModel(ModelConfig config);

  /// Uniform [-0.08, 0.08] seeded initialization of every parameter.
  void init_params(std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::uint64_t vocab_hash() const { return vocab_hash_; }
  void set_vocab_hash(std::uint64_t hash) { vocab_hash_ = hash; }

  struct Step {
    int h = -1;
    int c = -1;
  };

  /// Affine projection of a concatenated feature bundle to the visual input.
  int project(Graph& g, std::span<const double> bundle);
  Step initial_state(Graph& g);
  /// One gated update; the step input is [word_embedding | v | h_prev].
  Step lstm_step(Graph& g, const Step& prev, int word_embedding, int v);
  int embed(Graph& g, int token_id);
  /// Graph twin of hidden_difference_values over current group hiddens.
  int hidden_difference(Graph& g, const std::vector<int>& hiddens, std::size_t self);
  int word_logits(Graph& g, int h, int h_dif);
  /// softmax(W_h [h | h_dif] + b_h) evaluated on plain vectors.
  std::vector<double> word_distribution(const std::vector<double>& h,
                                        const std::vector<double>& h_dif);

  /// Teacher-forced log P(tokens | bundle) as a scalar graph node. Untied:
  /// the hidden difference is zero at every step.
  int sentence_logprob_node(Graph& g, std::span<const double> bundle,
                            const std::vector<int>& tokens);
  double sentence_logprob(std::span<const double> bundle, const std::vector<int>& tokens);

  struct GroupLoss {
    int node = -1;               // sum of per-token cross entropies
    std::size_t tokens = 0;      // terms contributing to the sum
    std::size_t expressions = 0; // ground-truth expressions covered
  };

  /// Teacher-forced negative log-likelihood of one (bundle, expression).
  GroupLoss example_loss(Graph& g, std::span<const double> bundle,
                         const std::vector<int>& tokens);

  /// Joint teacher-forced loss of a same-category group decoded in lockstep
  /// with hidden-difference inputs. Members cycle through their expressions
  /// pass by pass; a member whose expressions are exhausted keeps decoding
  /// its last one as context but contributes no further loss terms.
  GroupLoss tied_group_loss(Graph& g, const std::vector<TiedExample>& group);

  /// Decodes one expression per bundle. Tied greedy runs all objects in
  /// lockstep, deriving each object's hidden difference from the others'
  /// live (or frozen) states; beam search explores per object against the
  /// co-objects' greedy trajectories. Greedy argmax ties take the lowest
  /// token id; beam ties take the lexicographically smallest token list.
  std::vector<GeneratedExpression> generate(const std::vector<std::vector<double>>& bundles,
                                            const GenerationOptions& options);

  /// Writes the checkpoint at `path` and a JSON hyperparameter sidecar at
  /// `path + ".json"`; load verifies both against each other.
  void save(const std::string& path) const;
  static SpeakerModel load(const std::string& path);

 private:
  struct DecodeTrace {
    std::vector<std::vector<std::vector<double>>> hiddens;  // [object][step][H]
    std::vector<GeneratedExpression> outputs;
  };
  DecodeTrace greedy_lockstep(const std::vector<std::vector<double>>& bundles, bool tied,
                              std::size_t max_length);
  GeneratedExpression beam_decode(const std::vector<double>& bundle,
                                  const std::vector<std::vector<std::vector<double>>>& co_hiddens,
                                  std::size_t self, bool tied, std::size_t beam_width,
                                  std::size_t max_length);

  ModelConfig config_;
  ParamStore params_;
  std::uint64_t vocab_hash_ = 0;
};

}  // namespace refexp
