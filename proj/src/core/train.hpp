#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "config.hpp"
#include "corpus.hpp"
#include "json.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "selector.hpp"
#include "tensor.hpp"

namespace mwpgen {

// Everything a checkpoint holds.
struct Models {
  TrainConfig cfg;
  Vocab vocab;
  Decoder generator;
  Decoder consistency_parser;
  Decoder eval_parser;
  SelectorParams selector;
  TfidfStats tfidf;
  AdamState adam_gen, adam_sel, adam_cons, adam_eval;
  long step = 0;

  // gen.*, cons.*, eval.*, sel.w, sel.b
  std::vector<NamedParam> trainable() const;
};

// Builds the vocabulary from `training` and initializes all parameters.
Models init_models(const std::vector<MaskedExample>& training, const TrainConfig& cfg);

struct TrainRngs {
  Rng data, keywords, gumbel, dropout;
  static TrainRngs from_seed(std::uint64_t seed);
};

struct Objective {
  Tensor total;
  double lm = 0.0;
  double eq = 0.0;
  double c = 0.0;
};

using Batch = std::span<const MaskedExample* const>;

// L_LM + beta * L_c with straight-through sampled keywords.
Objective stage1_objective(Tape& tape, const Models& m, Batch batch, Rng& keyword_rng,
                           Rng* dropout_rng = nullptr);

struct RelaxedRollout {
  Tensor rows;              // L x V relaxed tokens
  std::vector<int> hard;    // per-row argmax
  bool hit_eos = false;
};

RelaxedRollout rollout_relaxed(Tape& tape, const Decoder& generator, const std::vector<int>& prompt,
                               double tau, std::size_t cap, Relaxation relaxation, Rng& gumbel_rng);

// L_LM + alpha * L_eq with frozen threshold-mode keywords.
Objective stage2_objective(Tape& tape, const Models& m, Batch batch, Rng& keyword_rng, Rng& gumbel_rng,
                           Rng* dropout_rng = nullptr);

// Keywords the generator is conditioned on at inference for this MWP.
std::vector<std::string> select_keywords_for(const Models& m, const std::vector<std::string>& mwp_tokens);

// Mean per-token NLL of a parser on ground-truth pairs.
double parser_nll(const Decoder& parser, const Vocab& vocab, const std::vector<MaskedExample>& data);

struct TrainHooks {
  std::function<void(const nlohmann::json&)> log;
  std::function<void(const Models&)> checkpoint;
};

void train_parser_epoch(Decoder& parser, AdamState& adam, const Models& m,
                        const std::vector<MaskedExample>& data, Rng& data_rng, Rng* dropout_rng);
void train_eval_mwp2eq(Models& m, const std::vector<MaskedExample>& training, const TrainHooks& hooks = {});

Models run_training(const std::vector<MaskedExample>& training, const TrainConfig& cfg,
                    const TrainHooks& hooks = {});

struct Generation {
  std::vector<std::string> keywords;
  std::vector<std::string> mwp;
};
std::vector<Generation> generate_for(const Models& m, const std::vector<MaskedExample>& examples);

// Metrics on `test`; novelty is measured against `training` when given.
MetricsReport evaluate(const Models& m, const std::vector<MaskedExample>& test,
                       const std::vector<MaskedExample>* training = nullptr);

}  // namespace mwpgen
