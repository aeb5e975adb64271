#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "discrete.hpp"
#include "json.hpp"
#include "model.hpp"
#include "toml_lite.hpp"

namespace mwpgen {

enum class Relaxation { gumbel_softmax, softmax };
// all: every eligible MWP token (an oracle context, for overfitting checks).
enum class KeywordSource { selector, tfidf, all };

struct TrainConfig {
  std::uint64_t seed = 0;

  double alpha = 1.0;  // equation-consistency weight
  double beta = 0.1;   // context weight
  double rho = 0.05;   // Bernoulli keyword prior
  TemperatureSchedule tau;
  Relaxation relaxation = Relaxation::gumbel_softmax;

  KeywordSource keyword_source = KeywordSource::selector;
  std::size_t tfidf_k = 5;
  double keyword_drop_p = 0.3;
  bool keyword_permute = true;

  double lr = 3e-4;
  std::size_t batch_size = 16;
  double grad_clip = 1.0;  // global L2 norm per model; 0 disables
  Reduction lm_reduction = Reduction::mean;

  std::size_t stage1_epochs = 12;
  std::size_t stage2_epochs = 3;
  std::size_t parser_warmup_epochs = 1;
  std::size_t max_rollout = 64;

  std::size_t eval_parser_epochs = 20;
  std::size_t eval_parser_patience = 2;
  double eval_holdout_fraction = 0.1;

  std::size_t min_freq = 1;
  bool lowercase = true;
  std::size_t max_generate_tokens = 64;
  std::size_t checkpoint_every = 0;  // steps; 0 writes only the final checkpoint

  DecoderConfig generator;
  DecoderConfig consistency_parser;
  DecoderConfig eval_parser;

  // Applies one "key=value" override; keys are the flattened TOML names.
  void set(const std::string& key, const std::string& value);
  void apply(const TomlTable& table);
  void validate() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  // Hex digest of the canonical JSON form.
  std::string fingerprint() const;

  static std::vector<std::string> keys();
};

TrainConfig load_config(const std::string& toml_path, const std::vector<std::string>& overrides = {});

}  // namespace mwpgen
