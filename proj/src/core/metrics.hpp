#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

namespace mwpgen {

class Decoder;
class Vocab;

using Tokens = std::vector<std::string>;

// Corpus BLEU-4, one reference per candidate, no smoothing.
double bleu4(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references);
// Sentence-level diagnostic with each precision floored at 1e-9.
double sentence_bleu4(const Tokens& candidate, const Tokens& reference);

std::size_t lcs_length(const Tokens& a, const Tokens& b);
double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.2);
double rouge_l_corpus(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references);

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};
// Exact-token alignment with the maximum number of matches; chunks are
// reduced by tiling longest common runs first.
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference);
double meteor_lite(const Tokens& candidate, const Tokens& reference);
double meteor_lite_corpus(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references);

double dist_n(const std::vector<Tokens>& generations, std::size_t n);

std::string canonicalize_equation(const Tokens& symbols);
std::string canonicalize_equation(const std::string& text);

struct AccEqResult {
  double accuracy = 0.0;
  std::size_t matched = 0;
  std::size_t overflows = 0;
};
AccEqResult acc_eq(const std::vector<Tokens>& generated_mwps, const std::vector<Tokens>& input_equations,
                   const Decoder& eval_parser, const Vocab& vocab);

std::string normalize_text(const std::string& text);
double novelty(const std::vector<std::string>& generated, const std::vector<std::string>& training);

struct MetricsReport {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double meteor_lite = 0.0;
  double acc_eq = 0.0;
  double novelty = 0.0;
  double dist3 = 0.0;
  std::size_t examples = 0;
  std::size_t parser_overflows = 0;
  std::string config_fingerprint;

  nlohmann::ordered_json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

MetricsReport mean_report(const std::vector<MetricsReport>& reports);

}  // namespace mwpgen
