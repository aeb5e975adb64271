#include "selector.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

#include "discrete.hpp"
#include "error.hpp"

namespace mwpgen {

SelectorParams SelectorParams::init(const Matrix& frozen_embeddings, Rng& rng) {
  SelectorParams p;
  Matrix w(frozen_embeddings.cols(), 1);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 0.02 * rng.normal();
  p.w = Tensor::parameter(std::move(w));
  p.b = Tensor::parameter(Matrix::Zero(1, 1));
  // Rows rescaled to norm sqrt(D).
  Matrix e = frozen_embeddings;
  const double target = std::sqrt(static_cast<double>(e.cols()));
  for (Eigen::Index r = 0; r < e.rows(); ++r) {
    const double n = e.row(r).norm();
    if (n > 0.0) e.row(r) *= target / n;
  }
  p.embeddings = Tensor::constant(std::move(e));
  return p;
}

std::vector<NamedParam> SelectorParams::params() const { return {{"sel.w", w}, {"sel.b", b}}; }

ContextualEmbedding contextual_embed(Tape& tape, const Tensor& token_rows) {
  if (token_rows.rows() == 0) fail_usage("contextual_embed: empty token sequence");
  const double scale = 1.0 / std::sqrt(static_cast<double>(token_rows.cols()));
  Tensor att = tape.softmax_rows(tape.matmul_nt(token_rows, token_rows), scale);
  return {att, tape.matmul(att, token_rows)};
}

double KeywordDistribution::prob(int vocab_id) const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i] == vocab_id) return q.value()(static_cast<Eigen::Index>(i), 0);
  }
  return 0.0;
}

KeywordDistribution keyword_probs(Tape& tape, const Vocab& vocab, const std::vector<int>& mwp_ids,
                                  const SelectorParams& params) {
  KeywordDistribution dist;
  std::unordered_map<int, std::size_t> slot;
  std::vector<std::size_t> counts;
  for (int id : mwp_ids) {
    if (!vocab.is_eligible(id)) continue;
    auto [it, inserted] = slot.emplace(id, dist.items.size());
    if (inserted) {
      dist.items.push_back(id);
      counts.push_back(0);
    }
    ++counts[it->second];
  }
  if (dist.items.empty()) return dist;

  Tensor rows = tape.embedding_gather(params.embeddings, mwp_ids);
  ContextualEmbedding ce = contextual_embed(tape, rows);
  const Tensor ones = Tensor::constant(Matrix::Ones(static_cast<Eigen::Index>(mwp_ids.size()), 1));
  const Tensor xs[] = {ce.contextual, ones};
  const Tensor wb[] = {params.w, params.b};
  Tensor scores = tape.sigmoid(tape.matmul(tape.concat(xs, 1), tape.concat(wb, 0)));

  // Mean of the occurrence scores of each eligible item.
  Matrix pool = Matrix::Zero(static_cast<Eigen::Index>(dist.items.size()),
                             static_cast<Eigen::Index>(mwp_ids.size()));
  for (std::size_t t = 0; t < mwp_ids.size(); ++t) {
    auto it = slot.find(mwp_ids[t]);
    if (it == slot.end()) continue;
    pool(static_cast<Eigen::Index>(it->second), static_cast<Eigen::Index>(t)) =
        1.0 / static_cast<double>(counts[it->second]);
  }
  dist.q = tape.matmul(Tensor::constant(std::move(pool)), scores);
  return dist;
}

ContextMask select_threshold(const KeywordDistribution& dist, double threshold) {
  ContextMask m;
  for (std::size_t i = 0; i < dist.items.size(); ++i) {
    if (dist.q.value()(static_cast<Eigen::Index>(i), 0) > threshold) m.selected.push_back(dist.items[i]);
  }
  return m;
}

ContextMask select_sample(Tape& tape, const KeywordDistribution& dist, Rng& rng) {
  ContextMask m;
  if (dist.items.empty()) return m;
  m.c = st_bernoulli(tape, dist.q, rng);
  for (std::size_t i = 0; i < dist.items.size(); ++i) {
    if (m.c.value()(static_cast<Eigen::Index>(i), 0) == 1.0) m.selected.push_back(dist.items[i]);
  }
  return m;
}

Tensor context_loss(Tape& tape, const KeywordDistribution& dist, double rho) {
  if (dist.items.empty()) return Tensor::scalar(0.0);
  return tape.sum(bernoulli_kl(tape, dist.q, rho));
}

TfidfStats TfidfStats::build(const std::vector<MaskedExample>& training) {
  TfidfStats s;
  s.documents = training.size();
  for (const auto& ex : training) {
    std::set<std::string> seen(ex.mwp_tokens.begin(), ex.mwp_tokens.end());
    for (const auto& t : seen) ++s.document_frequency[t];
  }
  return s;
}

double TfidfStats::idf(const std::string& token) const {
  auto it = document_frequency.find(token);
  const double df = it == document_frequency.end() ? 0.0 : static_cast<double>(it->second);
  return std::log(static_cast<double>(documents) / (1.0 + df));
}

std::vector<std::string> tfidf_keywords(const TfidfStats& stats, const Vocab& vocab,
                                        const std::vector<std::string>& mwp_tokens, std::size_t k) {
  if (k < 1) fail_usage("tfidf_keywords: k must be at least 1");
  std::map<std::string, std::size_t> tf;
  for (const auto& t : mwp_tokens) {
    if (vocab.is_eligible(vocab.id(t))) ++tf[t];
  }
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& [tok, count] : tf) scored.emplace_back(static_cast<double>(count) * stats.idf(tok), tok);
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < scored.size() && i < k; ++i) out.push_back(scored[i].second);
  return out;
}

}  // namespace mwpgen
