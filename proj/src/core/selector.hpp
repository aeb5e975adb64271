#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace mwpgen {

// Keyword selection model: linear self-attention over frozen token
// embeddings followed by a sigmoid projection per token.
struct SelectorParams {
  Tensor w;           // D x 1
  Tensor b;           // 1 x 1
  Tensor embeddings;  // V x D, frozen snapshot (constant)

  static SelectorParams init(const Matrix& frozen_embeddings, Rng& rng);
  std::vector<NamedParam> params() const;  // trainable only
};

struct ContextualEmbedding {
  Tensor attention;   // T x T, row t holds a_t
  Tensor contextual;  // T x D, row t holds the contextualized m_t
};

// a_t = softmax(M^T m_t / sqrt(D)), contextual_t = M a_t, with M given as
// T rows of dimension D.
ContextualEmbedding contextual_embed(Tape& tape, const Tensor& token_rows);

struct KeywordDistribution {
  std::vector<int> items;  // distinct eligible vocab ids, first-occurrence order
  Tensor q;                // items.size() x 1; undefined when items is empty

  double prob(int vocab_id) const;  // 0 for ineligible or absent ids
  std::size_t size() const { return items.size(); }
};

KeywordDistribution keyword_probs(Tape& tape, const Vocab& vocab, const std::vector<int>& mwp_ids,
                                  const SelectorParams& params);

struct ContextMask {
  std::vector<int> selected;  // vocab ids with c = 1
  Tensor c;                   // items.size() x 1 in sample mode (straight-through)
};

ContextMask select_threshold(const KeywordDistribution& dist, double threshold = 0.5);
ContextMask select_sample(Tape& tape, const KeywordDistribution& dist, Rng& rng);

// Sum over eligible items of KL(q_i || rho).
Tensor context_loss(Tape& tape, const KeywordDistribution& dist, double rho);

struct TfidfStats {
  std::size_t documents = 0;
  std::map<std::string, std::size_t> document_frequency;

  static TfidfStats build(const std::vector<MaskedExample>& training);
  double idf(const std::string& token) const;
};

// Top-k eligible tokens by tf * ln(N / (1 + df)); ties in lexicographic order.
std::vector<std::string> tfidf_keywords(const TfidfStats& stats, const Vocab& vocab,
                                        const std::vector<std::string>& mwp_tokens, std::size_t k);

}  // namespace mwpgen
