#include "metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"

namespace mwpgen {

namespace {

std::map<Tokens, std::size_t> ngram_counts(const Tokens& s, std::size_t n) {
  std::map<Tokens, std::size_t> c;
  if (s.size() < n) return c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++c[Tokens(s.begin() + i, s.begin() + i + n)];
  return c;
}

struct BleuStats {
  double matched[4] = {0, 0, 0, 0};
  double total[4] = {0, 0, 0, 0};
  double cand_len = 0, ref_len = 0;

  void add(const Tokens& c, const Tokens& r) {
    cand_len += static_cast<double>(c.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      auto cc = ngram_counts(c, n);
      auto rc = ngram_counts(r, n);
      for (const auto& [g, k] : cc) {
        auto it = rc.find(g);
        matched[n - 1] += static_cast<double>(std::min(k, it == rc.end() ? 0 : it->second));
        total[n - 1] += static_cast<double>(k);
      }
    }
  }

  double score(double floor) const {
    if (cand_len == 0) return 0.0;
    double log_sum = 0.0;
    for (int n = 0; n < 4; ++n) {
      double p = total[n] > 0 ? matched[n] / total[n] : 0.0;
      if (p == 0.0) {
        if (floor == 0.0) return 0.0;
        p = floor;
      }
      log_sum += std::log(std::max(p, floor));
    }
    const double bp = std::exp(std::min(0.0, 1.0 - ref_len / cand_len));
    return bp * std::exp(log_sum / 4.0);
  }
};

void check_pairs(const char* what, const std::vector<Tokens>& c, const std::vector<Tokens>& r) {
  if (c.empty()) fail_usage(std::string(what) + ": empty candidate list");
  if (c.size() != r.size()) fail_usage(std::string(what) + ": candidate/reference counts differ");
}

}  // namespace

double bleu4(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
  check_pairs("bleu4", candidates, references);
  BleuStats s;
  for (std::size_t i = 0; i < candidates.size(); ++i) s.add(candidates[i], references[i]);
  return s.score(0.0);
}

double sentence_bleu4(const Tokens& candidate, const Tokens& reference) {
  BleuStats s;
  s.add(candidate, reference);
  return s.score(1e-9);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& candidate, const Tokens& reference, double beta) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

double rouge_l_corpus(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
  check_pairs("rouge_l", candidates, references);
  double s = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += rouge_l(candidates[i], references[i]);
  return s / static_cast<double>(candidates.size());
}

MeteorAlignment meteor_align(const Tokens& c, const Tokens& r) {
  std::vector<int> align(c.size(), -1);
  std::vector<bool> ref_used(r.size(), false);
  for (;;) {
    std::size_t best_len = 0, best_i = 0, best_j = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (align[i] >= 0) continue;
      for (std::size_t j = 0; j < r.size(); ++j) {
        std::size_t len = 0;
        while (i + len < c.size() && j + len < r.size() && align[i + len] < 0 && !ref_used[j + len] &&
               c[i + len] == r[j + len]) {
          ++len;
        }
        if (len > best_len) {
          best_len = len;
          best_i = i;
          best_j = j;
        }
      }
    }
    if (best_len == 0) break;
    for (std::size_t k = 0; k < best_len; ++k) {
      align[best_i + k] = static_cast<int>(best_j + k);
      ref_used[best_j + k] = true;
    }
  }
  MeteorAlignment a;
  int prev = -2;
  bool prev_aligned = false;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (align[i] < 0) {
      prev_aligned = false;
      continue;
    }
    ++a.matches;
    if (!prev_aligned || align[i] != prev + 1) ++a.chunks;
    prev = align[i];
    prev_aligned = true;
  }
  return a;
}

double meteor_lite(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const MeteorAlignment a = meteor_align(candidate, reference);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double fmean = p * r / (0.9 * p + 0.1 * r);
  const double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
  return fmean * (1.0 - penalty);
}

double meteor_lite_corpus(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
  check_pairs("meteor_lite", candidates, references);
  double s = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += meteor_lite(candidates[i], references[i]);
  return s / static_cast<double>(candidates.size());
}

double dist_n(const std::vector<Tokens>& generations, std::size_t n) {
  if (n < 1) fail_usage("dist_n: n must be at least 1");
  std::set<Tokens> distinct;
  std::size_t total = 0;
  for (const auto& g : generations) {
    if (g.size() < n) continue;
    for (std::size_t i = 0; i + n <= g.size(); ++i) {
      distinct.emplace(g.begin() + i, g.begin() + i + n);
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(distinct.size()) / static_cast<double>(total);
}

std::string canonicalize_equation(const Tokens& symbols) {
  std::string out;
  for (const auto& s : symbols) {
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

std::string canonicalize_equation(const std::string& text) {
  return canonicalize_equation(tokenize_equation(text));
}

AccEqResult acc_eq(const std::vector<Tokens>& generated_mwps, const std::vector<Tokens>& input_equations,
                   const Decoder& eval_parser, const Vocab& vocab) {
  if (generated_mwps.size() != input_equations.size()) fail_usage("acc_eq: input sizes differ");
  AccEqResult r;
  if (generated_mwps.empty()) return r;
  constexpr std::size_t cap = 64;
  for (std::size_t i = 0; i < generated_mwps.size(); ++i) {
    ParseResult p = parse_equation(eval_parser, vocab, generated_mwps[i], cap);
    if (p.overflow) {
      ++r.overflows;
      continue;
    }
    if (canonicalize_equation(p.equation) == canonicalize_equation(input_equations[i])) ++r.matched;
  }
  r.accuracy = static_cast<double>(r.matched) / static_cast<double>(generated_mwps.size());
  return r;
}

std::string normalize_text(const std::string& text) {
  std::istringstream in(text);
  std::string word, out;
  while (in >> word) {
    for (char& ch : word) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

double novelty(const std::vector<std::string>& generated, const std::vector<std::string>& training) {
  if (generated.empty()) return 0.0;
  std::unordered_set<std::string> seen;
  for (const auto& t : training) seen.insert(normalize_text(t));
  std::size_t novel = 0;
  for (const auto& g : generated) {
    if (!seen.count(normalize_text(g))) ++novel;
  }
  return static_cast<double>(novel) / static_cast<double>(generated.size());
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["bleu4"] = bleu4;
  j["rougeL"] = rouge_l;
  j["meteor_lite"] = meteor_lite;
  j["acc_eq"] = acc_eq;
  j["novelty"] = novelty;
  j["dist3"] = dist3;
  j["counts"] = {{"examples", examples}, {"parser_overflows", parser_overflows}};
  j["config_fingerprint"] = config_fingerprint;
  j["deviations"] = {"meteor_lite"};
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.bleu4 = j.at("bleu4").get<double>();
  r.rouge_l = j.at("rougeL").get<double>();
  r.meteor_lite = j.at("meteor_lite").get<double>();
  r.acc_eq = j.at("acc_eq").get<double>();
  r.novelty = j.at("novelty").get<double>();
  r.dist3 = j.at("dist3").get<double>();
  r.examples = j.at("counts").at("examples").get<std::size_t>();
  r.parser_overflows = j.at("counts").at("parser_overflows").get<std::size_t>();
  r.config_fingerprint = j.value("config_fingerprint", "");
  return r;
}

MetricsReport mean_report(const std::vector<MetricsReport>& reports) {
  MetricsReport m;
  if (reports.empty()) return m;
  const double n = static_cast<double>(reports.size());
  for (const auto& r : reports) {
    m.bleu4 += r.bleu4 / n;
    m.rouge_l += r.rouge_l / n;
    m.meteor_lite += r.meteor_lite / n;
    m.acc_eq += r.acc_eq / n;
    m.novelty += r.novelty / n;
    m.dist3 += r.dist3 / n;
    m.examples += r.examples;
    m.parser_overflows += r.parser_overflows;
  }
  m.config_fingerprint = reports.front().config_fingerprint;
  return m;
}

}  // namespace mwpgen
