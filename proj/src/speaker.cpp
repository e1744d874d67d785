#include "refexp/speaker.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"
#include "refexp/dataset.hpp"
#include "refexp/errors.hpp"
#include "refexp/rng_util.hpp"

namespace refexp {

namespace {

void check_expression(const std::vector<int>& tokens, std::size_t vocab_size) {
  if (tokens.empty()) throw DomainError("expression has no tokens");
  if (tokens.back() != Vocabulary::kEnd) {
    throw DomainError("expression must terminate with the END id");
  }
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (word_dim == 0 || visual_dim == 0 || hidden_dim == 0) {
    throw DomainError("model dimensions must be positive");
  }
  if (vocab_size < 3) throw DomainError("vocabulary must include the three specials");
  if (input_dim == 0) throw DomainError("input dimension must be positive");
  if (max_length == 0) throw DomainError("max length must be positive");
  if (!(epsilon > 0.0)) throw DomainError("epsilon must be positive");
}

std::vector<double> hidden_difference_values(const std::vector<std::vector<double>>& hiddens,
                                             std::size_t self, double epsilon) {
  if (self >= hiddens.size()) throw IndexError("hidden-difference index out of range");
  const std::vector<double>& own = hiddens[self];
  std::vector<double> out(own.size(), 0.0);
  if (hiddens.size() < 2) return out;
  for (std::size_t j = 0; j < hiddens.size(); ++j) {
    if (j == self) continue;
    if (hiddens[j].size() != own.size()) {
      throw DimensionError("hidden state width mismatch");
    }
    double norm_sq = 0.0;
    for (std::size_t d = 0; d < own.size(); ++d) {
      double diff = own[d] - hiddens[j][d];
      norm_sq += diff * diff;
    }
    double norm = std::sqrt(norm_sq);
    if (norm < epsilon) continue;
    for (std::size_t d = 0; d < own.size(); ++d) {
      out[d] += (own[d] - hiddens[j][d]) / norm;
    }
  }
  double n = static_cast<double>(hiddens.size() - 1);
  for (double& v : out) v /= n;
  return out;
}

SpeakerModel::SpeakerModel(ModelConfig config) : config_(config) {
  config_.validate();
  const std::size_t x_dim = config_.word_dim + config_.visual_dim + config_.hidden_dim;
  params_.add("embedding", Tensor::zeros({config_.vocab_size, config_.word_dim}));
  params_.add("W_m", Tensor::zeros({config_.input_dim, config_.visual_dim}));
  params_.add("b_m", Tensor::zeros({1, config_.visual_dim}));
  for (const char* gate : {"i", "f", "o", "c"}) {
    params_.add(std::string("W_") + gate, Tensor::zeros({x_dim, config_.hidden_dim}));
    params_.add(std::string("b_") + gate, Tensor::zeros({1, config_.hidden_dim}));
  }
  params_.add("W_h", Tensor::zeros({2 * config_.hidden_dim, config_.vocab_size}));
  params_.add("b_h", Tensor::zeros({1, config_.vocab_size}));
}

void SpeakerModel::init_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t p = 0; p < params_.size(); ++p) {
    for (double& v : params_.tensor(p).values) v = uniform_real(rng, -0.08, 0.08);
  }
}

int SpeakerModel::project(Graph& g, std::span<const double> bundle) {
  if (bundle.size() != config_.input_dim) {
    throw DimensionError("feature bundle width " + std::to_string(bundle.size()) +
                         ", expected " + std::to_string(config_.input_dim));
  }
  int x = g.input_row(bundle);
  return g.add_row_bias(g.matmul(x, g.param(params_.at("W_m"))), g.param(params_.at("b_m")));
}

SpeakerModel::Step SpeakerModel::initial_state(Graph& g) {
  return {g.zeros(1, config_.hidden_dim), g.zeros(1, config_.hidden_dim)};
}

SpeakerModel::Step SpeakerModel::lstm_step(Graph& g, const Step& prev, int word_embedding,
                                           int v) {
  std::vector<int> parts = {word_embedding, v, prev.h};
  int x = g.concat(parts);
  auto gate = [&](const char* w, const char* b) {
    return g.add_row_bias(g.matmul(x, g.param(params_.at(w))), g.param(params_.at(b)));
  };
  int i_gate = g.sigmoid_op(gate("W_i", "b_i"));
  int f_gate = g.sigmoid_op(gate("W_f", "b_f"));
  int o_gate = g.sigmoid_op(gate("W_o", "b_o"));
  int candidate = g.tanh_op(gate("W_c", "b_c"));
  int c_new = g.add(g.mul(f_gate, prev.c), g.mul(i_gate, candidate));
  int h_new = g.mul(o_gate, g.tanh_op(c_new));
  return {h_new, c_new};
}

int SpeakerModel::embed(Graph& g, int token_id) {
  if (token_id < 0 || static_cast<std::size_t>(token_id) >= config_.vocab_size) {
    throw IndexError("token id " + std::to_string(token_id) + " outside vocabulary");
  }
  return g.row(g.param(params_.at("embedding")), static_cast<std::size_t>(token_id));
}

int SpeakerModel::hidden_difference(Graph& g, const std::vector<int>& hiddens,
                                    std::size_t self) {
  if (self >= hiddens.size()) throw IndexError("hidden-difference index out of range");
  if (hiddens.size() < 2) return g.zeros(1, config_.hidden_dim);
  std::vector<int> terms;
  for (std::size_t j = 0; j < hiddens.size(); ++j) {
    if (j == self) continue;
    terms.push_back(g.l2_normalize(g.sub(hiddens[self], hiddens[j]), config_.epsilon));
  }
  int total = g.add_n(terms);
  return g.scale(total, 1.0 / static_cast<double>(terms.size()));
}

int SpeakerModel::word_logits(Graph& g, int h, int h_dif) {
  std::vector<int> parts = {h, h_dif};
  int joined = g.concat(parts);
  return g.add_row_bias(g.matmul(joined, g.param(params_.at("W_h"))),
                        g.param(params_.at("b_h")));
}

std::vector<double> SpeakerModel::word_distribution(const std::vector<double>& h,
                                                    const std::vector<double>& h_dif) {
  Graph g;
  int logits = word_logits(g, g.input_row(h), g.input_row(h_dif));
  return softmax(g.values(logits));
}

SpeakerModel::GroupLoss SpeakerModel::example_loss(Graph& g, std::span<const double> bundle,
                                                   const std::vector<int>& tokens) {
  check_expression(tokens, config_.vocab_size);
  int v = project(g, bundle);
  Step state = initial_state(g);
  int zero_dif = g.zeros(1, config_.hidden_dim);
  std::vector<int> ce_terms;
  int prev_token = Vocabulary::kBos;
  for (int token : tokens) {
    state = lstm_step(g, state, embed(g, prev_token), v);
    int logits = word_logits(g, state.h, zero_dif);
    ce_terms.push_back(g.softmax_cross_entropy(logits, static_cast<std::size_t>(token)));
    prev_token = token;
  }
  return {g.add_n(ce_terms), ce_terms.size(), 1};
}

int SpeakerModel::sentence_logprob_node(Graph& g, std::span<const double> bundle,
                                        const std::vector<int>& tokens) {
  GroupLoss loss = example_loss(g, bundle, tokens);
  return g.scale(loss.node, -1.0);
}

double SpeakerModel::sentence_logprob(std::span<const double> bundle,
                                      const std::vector<int>& tokens) {
  Graph g;
  return g.value(sentence_logprob_node(g, bundle, tokens));
}

SpeakerModel::GroupLoss SpeakerModel::tied_group_loss(Graph& g,
                                                      const std::vector<TiedExample>& group) {
  if (group.empty()) throw DomainError("tied group has no members");
  std::size_t passes = 0;
  for (const TiedExample& member : group) {
    if (member.expressions.empty()) {
      throw DomainError("tied group member has no expressions");
    }
    for (const auto& tokens : member.expressions) {
      check_expression(tokens, config_.vocab_size);
    }
    passes = std::max(passes, member.expressions.size());
  }

  const std::size_t m = group.size();
  std::vector<int> visuals;
  for (const TiedExample& member : group) visuals.push_back(project(g, member.bundle));

  std::vector<int> ce_terms;
  std::size_t counted_tokens = 0;
  for (std::size_t pass = 0; pass < passes; ++pass) {
    std::vector<const std::vector<int>*> tokens(m);
    std::vector<bool> counted(m);
    std::size_t steps = 0;
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t pick = std::min(pass, group[i].expressions.size() - 1);
      tokens[i] = &group[i].expressions[pick];
      counted[i] = pass < group[i].expressions.size();
      steps = std::max(steps, tokens[i]->size());
    }

    std::vector<Step> states(m);
    for (std::size_t i = 0; i < m; ++i) states[i] = initial_state(g);
    std::vector<int> hiddens(m);
    for (std::size_t t = 0; t < steps; ++t) {
      // advance every member still consuming its expression; finished
      // members keep their frozen state from the END step
      for (std::size_t i = 0; i < m; ++i) {
        if (t >= tokens[i]->size()) continue;
        int prev_token = t == 0 ? Vocabulary::kBos : (*tokens[i])[t - 1];
        states[i] = lstm_step(g, states[i], embed(g, prev_token), visuals[i]);
      }
      for (std::size_t i = 0; i < m; ++i) hiddens[i] = states[i].h;
      for (std::size_t i = 0; i < m; ++i) {
        if (t >= tokens[i]->size() || !counted[i]) continue;
        int h_dif = hidden_difference(g, hiddens, i);
        int logits = word_logits(g, states[i].h, h_dif);
        ce_terms.push_back(
            g.softmax_cross_entropy(logits, static_cast<std::size_t>((*tokens[i])[t])));
        ++counted_tokens;
      }
    }
  }
  if (ce_terms.empty()) throw DomainError("tied group produced no loss terms");
  std::size_t total_expressions = 0;
  for (const TiedExample& member : group) total_expressions += member.expressions.size();
  return {g.add_n(ce_terms), counted_tokens, total_expressions};
}

SpeakerModel::DecodeTrace SpeakerModel::greedy_lockstep(
    const std::vector<std::vector<double>>& bundles, bool tied, std::size_t max_length) {
  const std::size_t m = bundles.size();
  Graph g;
  std::vector<int> visuals;
  for (const auto& bundle : bundles) visuals.push_back(project(g, bundle));

  DecodeTrace trace;
  trace.hiddens.resize(m);
  trace.outputs.resize(m);

  std::vector<Step> states(m);
  for (std::size_t i = 0; i < m; ++i) states[i] = initial_state(g);
  std::vector<int> prev_token(m, Vocabulary::kBos);
  std::vector<bool> finished(m, false);

  for (std::size_t t = 0; t < max_length; ++t) {
    bool all_done = true;
    for (std::size_t i = 0; i < m; ++i) {
      if (finished[i]) continue;
      all_done = false;
      states[i] = lstm_step(g, states[i], embed(g, prev_token[i]), visuals[i]);
    }
    if (all_done) break;

    std::vector<std::vector<double>> hidden_values(m);
    for (std::size_t i = 0; i < m; ++i) {
      auto span = g.values(states[i].h);
      hidden_values[i].assign(span.begin(), span.end());
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (finished[i]) continue;
      trace.hiddens[i].push_back(hidden_values[i]);

      int h_dif;
      if (tied) {
        h_dif = g.input_row(hidden_difference_values(hidden_values, i, config_.epsilon));
      } else {
        h_dif = g.zeros(1, config_.hidden_dim);
      }
      int logits = word_logits(g, states[i].h, h_dif);
      auto logit_values = g.values(logits);
      std::vector<double> probs = softmax(logit_values);
      std::size_t best = 0;  // argmax; scan keeps the lowest id on ties
      for (std::size_t w = 1; w < probs.size(); ++w) {
        if (probs[w] > probs[best]) best = w;
      }
      trace.outputs[i].token_ids.push_back(static_cast<int>(best));
      trace.outputs[i].logprob += std::log(probs[best]);
      prev_token[i] = static_cast<int>(best);
      if (static_cast<int>(best) == Vocabulary::kEnd) finished[i] = true;
    }
  }
  return trace;
}

GeneratedExpression SpeakerModel::beam_decode(
    const std::vector<double>& bundle,
    const std::vector<std::vector<std::vector<double>>>& co_hiddens, std::size_t self,
    bool tied, std::size_t beam_width, std::size_t max_length) {
  struct Item {
    std::vector<int> tokens;
    double logprob = 0.0;
    std::vector<double> h;
    std::vector<double> c;
    bool finished = false;
  };
  auto better = [](const Item& a, const Item& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.tokens < b.tokens;  // lexicographic ascending
  };

  std::vector<Item> beam(1);
  beam[0].h.assign(config_.hidden_dim, 0.0);
  beam[0].c.assign(config_.hidden_dim, 0.0);

  for (std::size_t t = 0; t < max_length; ++t) {
    bool all_done = true;
    for (const Item& item : beam) {
      if (!item.finished) all_done = false;
    }
    if (all_done) break;

    std::vector<Item> candidates;
    for (const Item& item : beam) {
      if (item.finished) {
        candidates.push_back(item);
        continue;
      }
      Graph g;
      int v = project(g, bundle);
      Step prev{g.input_row(item.h), g.input_row(item.c)};
      int prev_token = item.tokens.empty() ? Vocabulary::kBos : item.tokens.back();
      Step next = lstm_step(g, prev, embed(g, prev_token), v);

      int h_dif;
      if (tied && co_hiddens.size() > 1) {
        std::vector<std::vector<double>> hiddens(co_hiddens.size());
        auto own = g.values(next.h);
        hiddens[self].assign(own.begin(), own.end());
        for (std::size_t j = 0; j < co_hiddens.size(); ++j) {
          if (j == self) continue;
          const auto& trajectory = co_hiddens[j];
          if (trajectory.empty()) {
            hiddens[j].assign(config_.hidden_dim, 0.0);
          } else {
            hiddens[j] = trajectory[std::min(t, trajectory.size() - 1)];
          }
        }
        h_dif = g.input_row(hidden_difference_values(hiddens, self, config_.epsilon));
      } else {
        h_dif = g.zeros(1, config_.hidden_dim);
      }
      int logits = word_logits(g, next.h, h_dif);
      std::vector<double> probs = softmax(g.values(logits));

      auto h_span = g.values(next.h);
      auto c_span = g.values(next.c);
      for (std::size_t w = 0; w < probs.size(); ++w) {
        Item cand;
        cand.tokens = item.tokens;
        cand.tokens.push_back(static_cast<int>(w));
        cand.logprob = item.logprob + std::log(probs[w]);
        cand.h.assign(h_span.begin(), h_span.end());
        cand.c.assign(c_span.begin(), c_span.end());
        cand.finished = static_cast<int>(w) == Vocabulary::kEnd;
        candidates.push_back(std::move(cand));
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    if (candidates.size() > beam_width) candidates.resize(beam_width);
    beam = std::move(candidates);
  }

  std::sort(beam.begin(), beam.end(), better);
  GeneratedExpression out;
  out.token_ids = beam.front().tokens;
  out.logprob = beam.front().logprob;
  return out;
}

std::vector<GeneratedExpression> SpeakerModel::generate(
    const std::vector<std::vector<double>>& bundles, const GenerationOptions& options) {
  if (bundles.empty()) return {};
  if (options.beam_width == 0) throw DomainError("beam width must be positive");
  if (options.max_length == 0) throw DomainError("max length must be positive");

  DecodeTrace greedy = greedy_lockstep(bundles, options.tied, options.max_length);
  if (options.beam_width == 1) return std::move(greedy.outputs);

  std::vector<GeneratedExpression> outputs(bundles.size());
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    outputs[i] = beam_decode(bundles[i], greedy.hiddens, i, options.tied, options.beam_width,
                             options.max_length);
  }
  return outputs;
}

void SpeakerModel::save(const std::string& path) const {
  save_checkpoint(path, params_);
  nlohmann::ordered_json sidecar;
  sidecar["E_w"] = config_.word_dim;
  sidecar["E_v"] = config_.visual_dim;
  sidecar["H"] = config_.hidden_dim;
  sidecar["V"] = config_.vocab_size;
  sidecar["input_dim"] = config_.input_dim;
  sidecar["max_length"] = config_.max_length;
  sidecar["epsilon"] = config_.epsilon;
  sidecar["vocab_hash"] = vocab_hash_;
  std::ofstream out(path + ".json");
  if (!out) throw IoError("cannot open " + path + ".json for writing");
  out << sidecar.dump(2) << "\n";
}

SpeakerModel SpeakerModel::load(const std::string& path) {
  std::ifstream in(path + ".json");
  if (!in) throw IoError("cannot open " + path + ".json");
  nlohmann::json sidecar;
  try {
    sidecar = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed model sidecar: ") + e.what());
  }
  ModelConfig config;
  try {
    config.word_dim = sidecar.at("E_w").get<std::size_t>();
    config.visual_dim = sidecar.at("E_v").get<std::size_t>();
    config.hidden_dim = sidecar.at("H").get<std::size_t>();
    config.vocab_size = sidecar.at("V").get<std::size_t>();
    config.input_dim = sidecar.at("input_dim").get<std::size_t>();
    config.max_length = sidecar.at("max_length").get<std::size_t>();
    config.epsilon = sidecar.at("epsilon").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model sidecar missing fields: ") + e.what());
  }

  SpeakerModel model(config);
  model.vocab_hash_ = sidecar.value("vocab_hash", 0ull);
  ParamStore loaded = load_checkpoint(path);
  if (loaded.size() != model.params_.size()) {
    throw IntegrityError("model-integrity", "checkpoint parameter count mismatch");
  }
  for (std::size_t p = 0; p < loaded.size(); ++p) {
    const std::string& name = model.params_.names()[p];
    if (loaded.names()[p] != name) {
      throw IntegrityError("model-integrity",
                           "checkpoint parameter order mismatch at " + loaded.names()[p]);
    }
    if (loaded.tensor(p).shape != model.params_.tensor(p).shape) {
      throw IntegrityError("model-integrity", "checkpoint shape mismatch for " + name);
    }
    model.params_.at(name).values = loaded.tensor(p).values;
  }
  return model;
}

}  // namespace refexp
