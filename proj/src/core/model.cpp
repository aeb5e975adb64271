#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "error.hpp"

namespace mwpgen {

void DecoderConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || max_seq_len < 2) {
    fail_usage("decoder config: dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    fail_usage("decoder config: d_model (" + std::to_string(d_model) +
               ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (vocab_size <= static_cast<std::size_t>(Vocab::kNumSpecial)) fail_usage("decoder config: vocab too small");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail_usage("decoder config: dropout_p must be in [0, 1)");
}

std::vector<int> SerializedInput::targets() const {
  std::vector<int> t;
  if (ids.size() < 2) return t;
  t.reserve(ids.size() - 1);
  for (std::size_t i = 1; i < ids.size(); ++i) t.push_back(loss_mask[i] ? ids[i] : -1);
  return t;
}

std::size_t SerializedInput::target_count() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), true));
}

namespace {

void append(SerializedInput& s, int id, Segment seg, bool target) {
  s.ids.push_back(id);
  s.segments.push_back(seg);
  s.loss_mask.push_back(target);
}

void check_length(const SerializedInput& s, std::size_t max_seq_len) {
  if (s.ids.size() > max_seq_len) {
    fail_data("serialized input of length " + std::to_string(s.ids.size()) +
              " exceeds max_seq_len " + std::to_string(max_seq_len));
  }
}

}  // namespace

SerializedInput serialize_input(const Vocab& vocab, const std::vector<std::string>& equation,
                                const std::vector<std::string>& keywords,
                                const std::vector<std::string>& mwp, std::size_t max_seq_len) {
  SerializedInput s;
  append(s, Vocab::kBos, Segment::eq, false);
  for (const auto& e : equation) append(s, vocab.id(e), Segment::eq, false);
  append(s, Vocab::kSep, Segment::kw, false);
  for (const auto& k : keywords) append(s, vocab.id(k), Segment::kw, false);
  append(s, Vocab::kSep, Segment::mwp, false);
  for (const auto& m : mwp) append(s, vocab.id(m), Segment::mwp, true);
  append(s, Vocab::kEos, Segment::mwp, true);
  check_length(s, max_seq_len);
  return s;
}

SerializedInput serialize_parser_input(const Vocab& vocab, const std::vector<std::string>& mwp,
                                       const std::vector<std::string>& equation,
                                       std::size_t max_seq_len) {
  SerializedInput s;
  append(s, Vocab::kBos, Segment::mwp, false);
  for (const auto& m : mwp) append(s, vocab.id(m), Segment::mwp, false);
  append(s, Vocab::kSep, Segment::eq, false);
  for (const auto& e : equation) append(s, vocab.id(e), Segment::eq, true);
  append(s, Vocab::kEos, Segment::eq, true);
  check_length(s, max_seq_len);
  return s;
}

namespace {
Matrix normal_matrix(std::size_t r, std::size_t c, double stddev, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}
}  // namespace

Decoder::Decoder(const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg.d_model;
  const double std_w = 0.02;
  const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  tok_emb_ = Tensor::parameter(normal_matrix(cfg.vocab_size, d, std_w, rng));
  pos_emb_ = Tensor::parameter(normal_matrix(cfg.max_seq_len, d, 0.01, rng));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Layer L;
    L.ln1_g = Tensor::parameter(Matrix::Ones(1, d));
    L.ln1_b = Tensor::parameter(Matrix::Zero(1, d));
    L.wq = Tensor::parameter(normal_matrix(d, d, std_w, rng));
    L.wk = Tensor::parameter(normal_matrix(d, d, std_w, rng));
    L.wv = Tensor::parameter(normal_matrix(d, d, std_w, rng));
    L.wo = Tensor::parameter(normal_matrix(d, d, std_out, rng));
    L.bo = Tensor::parameter(Matrix::Zero(1, d));
    L.ln2_g = Tensor::parameter(Matrix::Ones(1, d));
    L.ln2_b = Tensor::parameter(Matrix::Zero(1, d));
    L.w1 = Tensor::parameter(normal_matrix(d, cfg.d_ff, std_w, rng));
    L.b1 = Tensor::parameter(Matrix::Zero(1, cfg.d_ff));
    L.w2 = Tensor::parameter(normal_matrix(cfg.d_ff, d, std_out, rng));
    L.b2 = Tensor::parameter(Matrix::Zero(1, d));
    layers_.push_back(std::move(L));
  }
  lnf_g_ = Tensor::parameter(Matrix::Ones(1, d));
  lnf_b_ = Tensor::parameter(Matrix::Zero(1, d));
}

std::vector<NamedParam> Decoder::params(const std::string& prefix) const {
  std::vector<NamedParam> p;
  p.push_back({prefix + ".tok_emb", tok_emb_});
  p.push_back({prefix + ".pos_emb", pos_emb_});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    const std::string h = prefix + ".h" + std::to_string(l) + ".";
    p.push_back({h + "ln1.g", L.ln1_g});
    p.push_back({h + "ln1.b", L.ln1_b});
    p.push_back({h + "attn.wq", L.wq});
    p.push_back({h + "attn.wk", L.wk});
    p.push_back({h + "attn.wv", L.wv});
    p.push_back({h + "attn.wo", L.wo});
    p.push_back({h + "attn.bo", L.bo});
    p.push_back({h + "ln2.g", L.ln2_g});
    p.push_back({h + "ln2.b", L.ln2_b});
    p.push_back({h + "ffn.w1", L.w1});
    p.push_back({h + "ffn.b1", L.b1});
    p.push_back({h + "ffn.w2", L.w2});
    p.push_back({h + "ffn.b2", L.b2});
  }
  p.push_back({prefix + ".lnf.g", lnf_g_});
  p.push_back({prefix + ".lnf.b", lnf_b_});
  return p;
}

std::vector<Tensor> Decoder::param_tensors() const {
  std::vector<Tensor> out;
  for (auto& np : params("")) out.push_back(np.tensor);
  return out;
}

Tensor Decoder::embed_tokens(Tape& tape, std::span<const int> ids) const {
  return tape.embedding_gather(tok_emb_, ids);
}

Tensor Decoder::embed_soft(Tape& tape, const Tensor& rows) const {
  return tape.matmul(rows, tok_emb_);
}

DecodeState Decoder::new_state() const {
  DecodeState s;
  s.keys.resize(layers_.size());
  s.values.resize(layers_.size());
  return s;
}

Tensor Decoder::dropout(Tape& tape, const Tensor& x, Rng* rng) const {
  if (cfg_.dropout_p <= 0.0 || rng == nullptr) return x;
  const double keep = 1.0 - cfg_.dropout_p;
  Matrix mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return tape.mul(x, Tensor::constant(std::move(mask)));
}

Tensor Decoder::forward_embeddings(Tape& tape, const Tensor& x, std::span<const std::size_t> lengths,
                                   std::span<DecodeState> states, Rng* dropout_rng) const {
  const std::size_t total = std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
  if (total != x.rows() || x.cols() != cfg_.d_model) {
    fail_usage("decoder forward: embeddings [" + std::to_string(x.rows()) + "x" +
               std::to_string(x.cols()) + "] do not match lengths/d_model");
  }
  if (!states.empty() && states.size() != lengths.size()) fail_usage("decoder forward: one state per sequence");

  std::vector<int> pos;
  pos.reserve(total);
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    const std::size_t past = states.empty() ? 0 : states[s].length;
    if (past + lengths[s] > cfg_.max_seq_len) {
      fail_data("sequence length " + std::to_string(past + lengths[s]) + " exceeds max_seq_len " +
                std::to_string(cfg_.max_seq_len));
    }
    for (std::size_t i = 0; i < lengths[s]; ++i) pos.push_back(static_cast<int>(past + i));
  }
  Tensor h = tape.add(x, tape.embedding_gather(pos_emb_, pos));

  const std::size_t dh = cfg_.d_model / cfg_.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool single = lengths.size() == 1;

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    Tensor a = tape.layer_norm(h, L.ln1_g, L.ln1_b);
    Tensor q = tape.matmul(a, L.wq);
    Tensor k = tape.matmul(a, L.wk);
    Tensor v = tape.matmul(a, L.wv);

    std::vector<Tensor> seq_out;
    seq_out.reserve(lengths.size());
    std::size_t row = 0;
    for (std::size_t s = 0; s < lengths.size(); ++s) {
      const std::size_t n = lengths[s];
      Tensor qs = single ? q : tape.slice(q, 0, row, n);
      Tensor ks = single ? k : tape.slice(k, 0, row, n);
      Tensor vs = single ? v : tape.slice(v, 0, row, n);
      std::size_t past = 0;
      if (!states.empty()) {
        DecodeState& st = states[s];
        past = st.length;
        if (past > 0) {
          const Tensor kp[] = {st.keys[l], ks};
          const Tensor vp[] = {st.values[l], vs};
          ks = tape.concat(kp, 0);
          vs = tape.concat(vp, 0);
        }
        st.keys[l] = ks;
        st.values[l] = vs;
      }
      std::vector<Tensor> heads;
      heads.reserve(cfg_.n_heads);
      for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
        const bool whole = cfg_.n_heads == 1;
        Tensor qh = whole ? qs : tape.slice(qs, 1, hd * dh, dh);
        Tensor kh = whole ? ks : tape.slice(ks, 1, hd * dh, dh);
        Tensor vh = whole ? vs : tape.slice(vs, 1, hd * dh, dh);
        Tensor att = tape.softmax_rows(tape.matmul_nt(qh, kh), scale, true, past);
        heads.push_back(tape.matmul(att, vh));
      }
      seq_out.push_back(heads.size() == 1 ? heads[0] : tape.concat(heads, 1));
      row += n;
    }
    Tensor o = seq_out.size() == 1 ? seq_out[0] : tape.concat(seq_out, 0);
    o = dropout(tape, tape.add_row(tape.matmul(o, L.wo), L.bo), dropout_rng);
    h = tape.add(h, o);

    Tensor f = tape.layer_norm(h, L.ln2_g, L.ln2_b);
    f = tape.gelu(tape.add_row(tape.matmul(f, L.w1), L.b1));
    f = dropout(tape, tape.add_row(tape.matmul(f, L.w2), L.b2), dropout_rng);
    h = tape.add(h, f);
  }
  if (!states.empty()) {
    for (std::size_t s = 0; s < lengths.size(); ++s) states[s].length += lengths[s];
  }
  h = tape.layer_norm(h, lnf_g_, lnf_b_);
  return tape.matmul_nt(h, tok_emb_);
}

Tensor Decoder::forward(Tape& tape, std::span<const int> ids) const {
  const std::size_t len[] = {ids.size()};
  return forward_embeddings(tape, embed_tokens(tape, ids), len);
}

Tensor nll_loss(Tape& tape, const Tensor& logits, std::span<const int> targets, Reduction reduction) {
  const auto count = std::count_if(targets.begin(), targets.end(), [](int t) { return t >= 0; });
  if (count == 0) fail_usage("nll_loss: empty loss mask");
  Tensor total = tape.sum(tape.cross_entropy_from_logits(logits, targets));
  if (reduction == Reduction::sum) return total;
  return tape.scalar_mul(total, 1.0 / static_cast<double>(count));
}

namespace {

int choose(const Eigen::Ref<const Eigen::RowVectorXd>& logits, const DecodeMode& mode, Rng* rng) {
  const Eigen::Index v = logits.size();
  if (mode.kind == DecodeMode::Kind::greedy) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < v; ++i) {
      if (logits(i) > logits(best)) best = i;
    }
    return static_cast<int>(best);
  }
  if (rng == nullptr) fail_usage("top_k decoding needs a random source");
  if (!(mode.temperature > 0.0)) fail_usage("top_k decoding: temperature must be positive");
  const std::size_t k = std::clamp<std::size_t>(mode.k, 1, static_cast<std::size_t>(v));
  std::vector<int> idx(static_cast<std::size_t>(v));
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](int a, int b) { return logits(a) > logits(b) || (logits(a) == logits(b) && a < b); });
  const double mx = logits(idx[0]);
  std::vector<double> w(k);
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    w[i] = std::exp((logits(idx[i]) - mx) / mode.temperature);
    z += w[i];
  }
  double u = rng->uniform() * z;
  for (std::size_t i = 0; i < k; ++i) {
    u -= w[i];
    if (u < 0.0) return idx[i];
  }
  return idx[k - 1];
}

}  // namespace

DecodeResult decode(const Decoder& model, const std::vector<int>& prompt, const DecodeMode& mode,
                    std::size_t max_new_tokens, Rng* rng) {
  if (max_new_tokens < 1) fail_usage("decode: max_new_tokens must be at least 1");
  if (prompt.empty()) fail_usage("decode: empty prompt");
  Tape tape(false);
  DecodeState state = model.new_state();
  std::span<DecodeState> st(&state, 1);
  const std::size_t plen[] = {prompt.size()};
  Tensor logits = model.forward_embeddings(tape, model.embed_tokens(tape, prompt), plen, st);
  Eigen::RowVectorXd last = logits.value().row(logits.value().rows() - 1);
  DecodeResult r;
  const std::size_t one[] = {1};
  while (r.steps < max_new_tokens) {
    // Layout tokens never continue a sequence.
    for (int banned : {Vocab::kPad, Vocab::kBos, Vocab::kSep}) last(banned) = -std::numeric_limits<double>::infinity();
    const int id = choose(last, mode, rng);
    ++r.steps;
    if (id == Vocab::kEos) {
      r.hit_eos = true;
      break;
    }
    r.ids.push_back(id);
    if (r.steps == max_new_tokens || state.length >= model.config().max_seq_len) break;
    const int next[] = {id};
    logits = model.forward_embeddings(tape, model.embed_tokens(tape, next), one, st);
    last = logits.value().row(0);
  }
  return r;
}

std::vector<std::string> generate(const Decoder& generator, const Vocab& vocab,
                                  const std::vector<std::string>& equation,
                                  const std::vector<std::string>& keywords, const DecodeMode& mode,
                                  std::size_t max_new_tokens, Rng* rng) {
  SerializedInput s = serialize_input(vocab, equation, keywords, {}, generator.config().max_seq_len);
  s.ids.pop_back();  // drop EOS; the prompt ends at the second SEP
  return vocab.decode(decode(generator, s.ids, mode, max_new_tokens, rng).ids);
}

ParseResult parse_equation(const Decoder& parser, const Vocab& vocab,
                           const std::vector<std::string>& mwp, std::size_t max_new_tokens) {
  std::vector<int> prompt;
  prompt.push_back(Vocab::kBos);
  for (const auto& t : mwp) prompt.push_back(vocab.id(t));
  prompt.push_back(Vocab::kSep);
  const std::size_t room = parser.config().max_seq_len;
  if (prompt.size() >= room) return {{}, true};
  DecodeResult d = decode(parser, prompt, DecodeMode::greedy(), std::min(max_new_tokens, room - prompt.size() + 1));
  return {vocab.decode(d.ids), !d.hit_eos};
}

}  // namespace mwpgen
