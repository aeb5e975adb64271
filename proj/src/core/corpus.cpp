#include "corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "error.hpp"

namespace mwpgen {

extern const char* const kBundledStoplist;

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }

bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return std::isalnum(u) || c == '_' || u >= 0x80;
}

bool has_alnum(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](char c) {
    const auto u = static_cast<unsigned char>(c);
    return std::isalnum(u) || u >= 0x80;
  });
}

// Length of the numeric literal starting at text[i] (digits, optionally one
// '.' or '/' followed by more digits), or 0 when text[i] does not start one.
std::size_t number_literal_at(std::string_view text, std::size_t i) {
  if (i >= text.size() || !is_digit(text[i])) return 0;
  if (i > 0 && is_word_char(text[i - 1])) return 0;
  std::size_t j = i;
  while (j < text.size() && is_digit(text[j])) ++j;
  if (j + 1 < text.size() && (text[j] == '.' || text[j] == '/') && is_digit(text[j + 1])) {
    ++j;
    while (j < text.size() && is_digit(text[j])) ++j;
  }
  return j - i;
}

std::size_t word_end(std::string_view text, std::size_t i) {
  while (i < text.size() && is_word_char(text[i])) ++i;
  return i;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

std::string number_token(std::size_t index) { return "num" + std::to_string(index); }

std::optional<std::size_t> parse_number_token(std::string_view token) {
  if (token.size() < 4 || token.substr(0, 3) != "num") return std::nullopt;
  std::size_t k = 0;
  for (char c : token.substr(3)) {
    if (!is_digit(c)) return std::nullopt;
    k = k * 10 + static_cast<std::size_t>(c - '0');
  }
  if (token[3] == '0') return std::nullopt;
  return k;
}

std::string NumberMap::add(std::string literal) {
  literals_.push_back(std::move(literal));
  return number_token(literals_.size());
}

const std::string* NumberMap::find(std::string_view token) const {
  auto k = parse_number_token(token);
  if (!k || *k > literals_.size()) return nullptr;
  return &literals_[*k - 1];
}

std::vector<std::pair<std::string, std::string>> NumberMap::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < literals_.size(); ++i) out.emplace_back(number_token(i + 1), literals_[i]);
  return out;
}

MaskResult mask_numbers(std::string_view text) {
  MaskResult r;
  r.text.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (std::size_t len = number_literal_at(text, i)) {
      r.text += r.map.add(std::string(text.substr(i, len)));
      i += len;
    } else if (is_word_char(text[i])) {
      const std::size_t e = word_end(text, i);
      r.text.append(text.substr(i, e - i));
      i = e;
    } else {
      r.text += text[i++];
    }
  }
  return r;
}

std::string unmask(std::string_view masked_text, const NumberMap& map) {
  std::string out;
  out.reserve(masked_text.size());
  std::size_t i = 0;
  while (i < masked_text.size()) {
    if (!is_word_char(masked_text[i])) {
      out += masked_text[i++];
      continue;
    }
    const std::size_t e = word_end(masked_text, i);
    std::string_view word = masked_text.substr(i, e - i);
    // A masked literal may be followed by letters ("3rd" -> "num1rd").
    std::size_t digits_end = 3;
    if (word.size() > 3 && word.substr(0, 3) == "num") {
      while (digits_end < word.size() && is_digit(word[digits_end])) ++digits_end;
    }
    if (digits_end > 3) {
      std::string_view token = word.substr(0, digits_end);
      const std::string* literal = map.find(token);
      if (literal == nullptr) {
        fail_data("unmask: no number map entry for '" + std::string(token) + "'", std::string(token));
      }
      out += *literal;
      out.append(word.substr(digits_end));
    } else {
      out.append(word);
    }
    i = e;
  }
  return out;
}

std::vector<std::string> tokenize_mwp(std::string_view text, bool lowercase) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (is_word_char(c)) {
      const std::size_t e = word_end(text, i);
      tokens.emplace_back(lowercase ? lower(text.substr(i, e - i)) : std::string(text.substr(i, e - i)));
      i = e;
    } else {
      tokens.emplace_back(1, c);
      ++i;
    }
  }
  return tokens;
}

std::vector<std::string> tokenize_equation(std::string_view text) {
  std::vector<std::string> symbols;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      ++i;
    } else if (std::isalpha(u)) {
      std::size_t e = i;
      while (e < text.size() && std::isalnum(static_cast<unsigned char>(text[e]))) ++e;
      symbols.emplace_back(text.substr(i, e - i));
      i = e;
    } else if (is_digit(c)) {
      std::size_t e = i;
      while (e < text.size() && (is_digit(text[e]) || text[e] == '.')) ++e;
      symbols.emplace_back(text.substr(i, e - i));
      i = e;
    } else if (std::string_view("+-*/^=()[]%").find(c) != std::string_view::npos) {
      symbols.emplace_back(1, c);
      ++i;
    } else if (text.substr(i, 2) == "\xC3\x97") {  // multiplication sign
      symbols.emplace_back("*");
      i += 2;
    } else if (text.substr(i, 2) == "\xC3\xB7") {  // division sign
      symbols.emplace_back("/");
      i += 2;
    } else if (text.substr(i, 3) == "\xE2\x88\x92") {  // minus sign
      symbols.emplace_back("-");
      i += 3;
    } else {
      std::ostringstream os;
      os << "unrecognized equation character '" << c << "' at position " << i;
      fail_data(os.str(), std::string(text));
    }
  }
  return symbols;
}

MaskedExample mask_example(const RawExample& raw, bool lowercase) {
  if (raw.mwp_text.empty()) fail_data("example '" + raw.id + "': empty mwp", raw.id);
  if (std::count(raw.equation_text.begin(), raw.equation_text.end(), '=') != 1) {
    fail_data("example '" + raw.id + "': equation must contain exactly one '='", raw.id);
  }
  MaskedExample ex;
  ex.id = raw.id;
  ex.raw = raw;
  MaskResult m = mask_numbers(raw.mwp_text);
  ex.masked_mwp = std::move(m.text);
  ex.number_map = std::move(m.map);

  // Equation literals consume the earliest unused MWP occurrence with the
  // same spelling; unmatched literals get fresh tokens.
  std::vector<bool> used(ex.number_map.size(), false);
  auto match = [&](std::string_view literal) -> std::optional<std::string> {
    const auto& lits = ex.number_map.literals();
    for (std::size_t k = 0; k < lits.size(); ++k) {
      if (!used[k] && lits[k] == literal) {
        used[k] = true;
        return number_token(k + 1);
      }
    }
    return std::nullopt;
  };
  std::vector<std::string> fresh;
  std::string eq;
  const std::string_view et = raw.equation_text;
  std::size_t i = 0;
  while (i < et.size()) {
    if (std::size_t len = number_literal_at(et, i)) {
      std::string_view lit = et.substr(i, len);
      if (auto tok = match(lit)) {
        eq += *tok;
      } else if (const auto slash = lit.find('/'); slash != std::string_view::npos) {
        // "70/7" in an equation is usually a division, not a fraction.
        std::string_view a = lit.substr(0, slash), b = lit.substr(slash + 1);
        auto ta = match(a);
        eq += ta ? *ta : (fresh.emplace_back(a), "\x01" + std::to_string(fresh.size() - 1) + "\x01");
        eq += '/';
        auto tb = match(b);
        eq += tb ? *tb : (fresh.emplace_back(b), "\x01" + std::to_string(fresh.size() - 1) + "\x01");
      } else {
        fresh.emplace_back(lit);
        eq += "\x01" + std::to_string(fresh.size() - 1) + "\x01";
      }
      i += len;
    } else if (is_word_char(et[i])) {
      const std::size_t e = word_end(et, i);
      eq.append(et.substr(i, e - i));
      i = e;
    } else {
      eq += et[i++];
    }
  }
  // Fresh tokens are numbered after all MWP tokens, in equation order.
  std::vector<std::string> fresh_tokens;
  for (auto& lit : fresh) fresh_tokens.push_back(ex.number_map.add(lit));
  std::string resolved;
  for (std::size_t p = 0; p < eq.size(); ++p) {
    if (eq[p] == '\x01') {
      const std::size_t q = eq.find('\x01', p + 1);
      resolved += fresh_tokens[std::stoul(eq.substr(p + 1, q - p - 1))];
      p = q;
    } else {
      resolved += eq[p];
    }
  }
  ex.masked_equation = std::move(resolved);

  if (unmask(ex.masked_mwp, ex.number_map) != raw.mwp_text ||
      unmask(ex.masked_equation, ex.number_map) != raw.equation_text) {
    fail_data("example '" + raw.id + "': number masking is not invertible (text contains a literal numK word?)",
              raw.id);
  }
  ex.mwp_tokens = tokenize_mwp(ex.masked_mwp, lowercase);
  ex.equation_symbols = tokenize_equation(ex.masked_equation);
  return ex;
}

std::vector<MaskedExample> mask_corpus(const std::vector<RawExample>& raw, bool lowercase) {
  std::vector<MaskedExample> out;
  out.reserve(raw.size());
  for (const auto& r : raw) out.push_back(mask_example(r, lowercase));
  return out;
}

Stoplist parse_stoplist(std::istream& in) {
  Stoplist s;
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    s.insert(lower(line.substr(b, e - b + 1)));
  }
  return s;
}

const Stoplist& default_stoplist() {
  static const Stoplist s = [] {
    std::istringstream in(kBundledStoplist);
    return parse_stoplist(in);
  }();
  return s;
}

Stoplist load_stoplist(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_data("cannot open stoplist '" + path + "'", path);
  return parse_stoplist(in);
}

namespace {
const std::vector<std::string>& base_math_symbols() {
  static const std::vector<std::string> s = {"x", "y", "=", "+", "-", "*", "/", "^", "(", ")", "%"};
  return s;
}
}  // namespace

void Vocab::add_token(const std::string& t, const Stoplist& stoplist) {
  if (index_.count(t)) return;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(t);
  index_.emplace(t, id);
  const bool special = id < kNumSpecial;
  stop_.push_back(!special && stoplist.count(t) > 0);
  punct_.push_back(!special && !has_alnum(t));
  number_.push_back(!special && parse_number_token(t).has_value());
}

Vocab Vocab::build(const std::vector<MaskedExample>& corpus, std::size_t min_freq,
                   const Stoplist& stoplist) {
  if (corpus.empty()) fail_data("build_vocab: empty corpus");
  std::map<std::string, std::size_t> freq;
  std::set<std::string> forced;
  std::size_t max_num = 0;
  for (const auto& ex : corpus) {
    for (const auto& t : ex.mwp_tokens) {
      ++freq[t];
      if (auto k = parse_number_token(t)) max_num = std::max(max_num, *k);
    }
    for (const auto& s : ex.equation_symbols) {
      if (auto k = parse_number_token(s)) {
        max_num = std::max(max_num, *k);
      } else {
        forced.insert(s);
      }
    }
  }
  Vocab v;
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"}) v.add_token(s, stoplist);
  for (const auto& s : base_math_symbols()) v.add_token(s, stoplist);
  for (std::size_t k = 1; k <= max_num; ++k) v.add_token(number_token(k), stoplist);
  for (const auto& s : forced) v.add_token(s, stoplist);
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [tok, count] : ranked) {
    if (count >= min_freq) v.add_token(tok, stoplist);
  }
  return v;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens, const Stoplist& stoplist) {
  Vocab v;
  for (const auto& t : tokens) {
    if (v.index_.count(t)) fail_data("vocab: duplicate token '" + t + "'");
    v.add_token(t, stoplist);
  }
  if (v.size() < kNumSpecial || v.token(kBos) != "<bos>" || v.token(kUnk) != "<unk>") {
    fail_data("vocab: missing special tokens");
  }
  return v;
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

bool Vocab::is_eligible(int id) const {
  return id >= kNumSpecial && static_cast<std::size_t>(id) < tokens_.size() && !is_stopword(id) &&
         !is_punctuation(id) && !is_number_token(id);
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocab::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json j;
  j["tokens"] = tokens_;
  std::vector<int> stop, punct, num;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (stop_[i]) stop.push_back(static_cast<int>(i));
    if (punct_[i]) punct.push_back(static_cast<int>(i));
    if (number_[i]) num.push_back(static_cast<int>(i));
  }
  j["stopword_ids"] = stop;
  j["punctuation_ids"] = punct;
  j["number_ids"] = num;
  return j;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  Vocab v = from_tokens(j.at("tokens").get<std::vector<std::string>>(), Stoplist{});
  auto set_flags = [&](const char* key, std::vector<bool>& flags) {
    std::fill(flags.begin(), flags.end(), false);
    for (int id : j.at(key).get<std::vector<int>>()) {
      if (id < 0 || static_cast<std::size_t>(id) >= v.size()) fail_data("vocab: flag id out of range");
      flags[static_cast<std::size_t>(id)] = true;
    }
  };
  set_flags("stopword_ids", v.stop_);
  set_flags("punctuation_ids", v.punct_);
  set_flags("number_ids", v.number_);
  return v;
}

FoldAssignment kfold_split(std::size_t n_examples, std::size_t k, std::uint64_t seed) {
  if (k < 2) fail_usage("kfold_split: k must be at least 2");
  if (k > n_examples) {
    fail_usage("kfold_split: k=" + std::to_string(k) + " exceeds n=" + std::to_string(n_examples));
  }
  std::vector<std::size_t> order(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) order[i] = i;
  Rng rng = Rng::stream(seed, "kfold");
  rng.shuffle(order);
  FoldAssignment folds(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) folds[order[i]] = static_cast<int>(i % k);
  return folds;
}

std::vector<std::string> augment_context(const std::vector<std::string>& keywords, double drop_p,
                                         Rng& rng) {
  if (!(drop_p >= 0.0 && drop_p <= 1.0)) fail_usage("augment_context: drop_p must be in [0, 1]");
  std::vector<std::string> kept;
  for (const auto& k : keywords) {
    if (!rng.bernoulli(drop_p)) kept.push_back(k);
  }
  rng.shuffle(kept);
  return kept;
}

namespace {

const std::vector<std::string>& synth_names() {
  static const std::vector<std::string> n = {
      "Emily", "Bruce", "Joan", "Sam",  "Maria", "Tom",   "Lily",  "Jack",
      "Nina",  "Omar",  "Kate", "Leo",  "Rosa",  "Ben",   "Mia",   "Paul"};
  return n;
}

const std::vector<std::string>& synth_objects() {
  static const std::vector<std::string> o = {
      "apples", "seashells", "candies", "cards",   "pencils", "marbles", "stickers", "books",
      "cookies", "flowers",  "stamps",  "balloons", "shells", "coins",   "toys",     "eggs"};
  return o;
}

}  // namespace

std::vector<RawExample> synth_raw(std::size_t n, std::uint64_t seed) {
  if (n < 1) fail_usage("synth: n must be at least 1");
  Rng rng = Rng::stream(seed, "synth");
  std::vector<RawExample> out;
  out.reserve(n);
  auto pick = [&](const std::vector<std::string>& v) -> const std::string& {
    return v[static_cast<std::size_t>(rng.below(v.size()))];
  };
  auto between = [&](int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); };
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& name = pick(synth_names());
    const std::string& obj = pick(synth_objects());
    RawExample ex;
    std::ostringstream id;
    id << "synth-" << i;
    ex.id = id.str();
    const auto op = static_cast<SynthOp>(rng.below(4));
    int a = 0, b = 0;
    std::string mwp;
    char sym = '+';
    switch (op) {
      case SynthOp::add:
        a = between(2, 50);
        b = between(2, 50);
        sym = '+';
        mwp = name + " has " + std::to_string(a) + " " + obj + " . " + name + " gets " +
              std::to_string(b) + " more . how many " + obj + " ?";
        break;
      case SynthOp::subtract:
        a = between(10, 99);
        b = between(1, a - 1);
        sym = '-';
        mwp = name + " has " + std::to_string(a) + " " + obj + " . " + name + " gives away " +
              std::to_string(b) + " . how many " + obj + " are left ?";
        break;
      case SynthOp::multiply:
        a = between(2, 12);
        b = between(2, 12);
        sym = '*';
        mwp = name + " has " + std::to_string(a) + " boxes . each box has " + std::to_string(b) +
              " " + obj + " . how many " + obj + " in total ?";
        break;
      case SynthOp::divide:
        b = between(2, 9);
        a = b * between(2, 12);
        sym = '/';
        mwp = name + " has " + std::to_string(a) + " " + obj + " . " + name +
              " shares them equally among " + std::to_string(b) + " friends . how many " + obj +
              " does each friend get ?";
        break;
    }
    ex.mwp_text = std::move(mwp);
    ex.equation_text = "x = (" + std::to_string(a) + " " + sym + " " + std::to_string(b) + ")";
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<MaskedExample> synth_corpus(std::size_t n, std::uint64_t seed) {
  return mask_corpus(synth_raw(n, seed));
}

std::optional<SynthOp> synth_op_of(const MaskedExample& ex) {
  for (const auto& s : ex.equation_symbols) {
    if (s == "+") return SynthOp::add;
    if (s == "-") return SynthOp::subtract;
    if (s == "*") return SynthOp::multiply;
    if (s == "/") return SynthOp::divide;
  }
  return std::nullopt;
}

std::vector<RawExample> parse_jsonl(std::istream& in, const std::string& source_name) {
  std::vector<RawExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source_name + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail_data("line " + std::to_string(lineno) + ": invalid JSON (" + e.what() + ")", where);
    }
    if (!j.is_object()) fail_data("line " + std::to_string(lineno) + ": expected a JSON object", where);
    RawExample ex;
    for (auto [key, field] : {std::pair{"id", &ex.id}, std::pair{"mwp", &ex.mwp_text},
                              std::pair{"equation", &ex.equation_text}}) {
      auto it = j.find(key);
      if (it == j.end() || !it->is_string()) {
        fail_data("line " + std::to_string(lineno) + ": field '" + key + "' missing or not a string",
                  where);
      }
      *field = it->get<std::string>();
    }
    if (ex.mwp_text.empty()) fail_data("line " + std::to_string(lineno) + ": field 'mwp' is empty", where);
    if (std::count(ex.equation_text.begin(), ex.equation_text.end(), '=') != 1) {
      fail_data("line " + std::to_string(lineno) + ": field 'equation' must contain exactly one '='",
                where);
    }
    out.push_back(std::move(ex));
  }
  if (out.empty()) fail_data("dataset '" + source_name + "' contains no examples", source_name);
  return out;
}

std::vector<RawExample> load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_data("cannot open dataset '" + path + "'", path);
  return parse_jsonl(in, path);
}

void write_jsonl(std::ostream& out, const std::vector<RawExample>& examples) {
  for (const auto& ex : examples) {
    nlohmann::ordered_json j;
    j["id"] = ex.id;
    j["mwp"] = ex.mwp_text;
    j["equation"] = ex.equation_text;
    out << j.dump() << "\n";
  }
}

void write_masked_jsonl(std::ostream& out, const std::vector<MaskedExample>& examples) {
  for (const auto& ex : examples) {
    nlohmann::ordered_json j;
    j["id"] = ex.id;
    j["mwp"] = ex.masked_mwp;
    j["equation"] = ex.masked_equation;
    j["mwp_tokens"] = ex.mwp_tokens;
    j["equation_symbols"] = ex.equation_symbols;
    nlohmann::ordered_json nm = nlohmann::ordered_json::object();
    for (const auto& [tok, lit] : ex.number_map.entries()) nm[tok] = lit;
    j["number_map"] = nm;
    out << j.dump() << "\n";
  }
}

CorpusStats corpus_stats(const std::vector<MaskedExample>& corpus) {
  CorpusStats s;
  s.count = corpus.size();
  if (corpus.empty()) return s;
  double mw = 0, eq = 0;
  for (const auto& ex : corpus) {
    mw += static_cast<double>(ex.mwp_tokens.size());
    eq += static_cast<double>(ex.equation_symbols.size());
  }
  s.mean_mwp_tokens = mw / static_cast<double>(s.count);
  s.mean_equation_symbols = eq / static_cast<double>(s.count);
  return s;
}

}  // namespace mwpgen
