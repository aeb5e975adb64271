#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "rng.hpp"

namespace mwpgen {

struct RawExample {
  std::string id;
  std::string mwp_text;
  std::string equation_text;
};

// Ordered numK -> original literal. Index i holds num(i+1).
class NumberMap {
 public:
  // Appends the next numK for `literal` and returns the token.
  std::string add(std::string literal);
  const std::string* find(std::string_view token) const;
  std::size_t size() const { return literals_.size(); }
  bool empty() const { return literals_.empty(); }
  const std::vector<std::string>& literals() const { return literals_; }
  std::vector<std::pair<std::string, std::string>> entries() const;

  bool operator==(const NumberMap&) const = default;

 private:
  std::vector<std::string> literals_;
};

std::string number_token(std::size_t index);  // 1-based: number_token(1) == "num1"
// Parses "numK" into K, or nullopt.
std::optional<std::size_t> parse_number_token(std::string_view token);

struct MaskResult {
  std::string text;
  NumberMap map;
};

// Replaces integers, decimals and simple fractions by num1..numK in reading
// order. Text that is already masked comes back unchanged.
MaskResult mask_numbers(std::string_view text);
std::string unmask(std::string_view masked_text, const NumberMap& map);

struct MaskedExample {
  std::string id;
  std::string masked_mwp;
  std::string masked_equation;
  std::vector<std::string> mwp_tokens;
  std::vector<std::string> equation_symbols;
  NumberMap number_map;
  RawExample raw;
};

MaskedExample mask_example(const RawExample& raw, bool lowercase = true);

std::vector<std::string> tokenize_mwp(std::string_view text, bool lowercase = true);
std::vector<std::string> tokenize_equation(std::string_view text);

using Stoplist = std::set<std::string, std::less<>>;
const Stoplist& default_stoplist();
Stoplist parse_stoplist(std::istream& in);
Stoplist load_stoplist(const std::string& path);

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kUnk = 4;
  static constexpr int kNumSpecial = 5;

  static Vocab build(const std::vector<MaskedExample>& corpus, std::size_t min_freq,
                     const Stoplist& stoplist = default_stoplist());
  // Rebuilds from an explicit id-ordered token list (checkpoint reload).
  static Vocab from_tokens(const std::vector<std::string>& tokens,
                           const Stoplist& stoplist = default_stoplist());

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool is_special(int id) const { return id >= 0 && id < kNumSpecial; }
  bool is_stopword(int id) const { return stop_[static_cast<std::size_t>(id)]; }
  bool is_punctuation(int id) const { return punct_[static_cast<std::size_t>(id)]; }
  bool is_number_token(int id) const { return number_[static_cast<std::size_t>(id)]; }
  // Candidate for context-keyword selection.
  bool is_eligible(int id) const;

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

 private:
  void add_token(const std::string& t, const Stoplist& stoplist);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<bool> stop_, punct_, number_;
};

using FoldAssignment = std::vector<int>;  // example index -> fold in [0, k)
FoldAssignment kfold_split(std::size_t n_examples, std::size_t k, std::uint64_t seed);

std::vector<std::string> augment_context(const std::vector<std::string>& keywords,
                                         double drop_p, Rng& rng);

enum class SynthOp { add, subtract, multiply, divide };

// Templated single-operator problems with digits present (dataset format).
std::vector<RawExample> synth_raw(std::size_t n, std::uint64_t seed);
std::vector<MaskedExample> synth_corpus(std::size_t n, std::uint64_t seed);
// Operator of a synthesized example, recovered from its masked equation.
std::optional<SynthOp> synth_op_of(const MaskedExample& ex);

std::vector<RawExample> parse_jsonl(std::istream& in, const std::string& source_name);
std::vector<RawExample> load_jsonl(const std::string& path);
void write_jsonl(std::ostream& out, const std::vector<RawExample>& examples);
void write_masked_jsonl(std::ostream& out, const std::vector<MaskedExample>& examples);

struct CorpusStats {
  std::size_t count = 0;
  double mean_mwp_tokens = 0.0;
  double mean_equation_symbols = 0.0;
};
CorpusStats corpus_stats(const std::vector<MaskedExample>& corpus);

std::vector<MaskedExample> mask_corpus(const std::vector<RawExample>& raw, bool lowercase = true);

}  // namespace mwpgen
