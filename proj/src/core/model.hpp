#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace mwpgen {

struct DecoderConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t max_seq_len = 128;
  std::size_t vocab_size = 0;
  double dropout_p = 0.0;

  void validate() const;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

enum class Segment { eq, kw, mwp };

struct SerializedInput {
  std::vector<int> ids;
  std::vector<Segment> segments;
  // True at positions whose token is a training target.
  std::vector<bool> loss_mask;

  // Next-token targets for logits rows 0..n-2 (-1 where masked out).
  std::vector<int> targets() const;
  std::size_t target_count() const;
};

// [BOS, equation, SEP, keywords, SEP, mwp, EOS]; targets are the MWP tokens
// and EOS.
SerializedInput serialize_input(const Vocab& vocab, const std::vector<std::string>& equation,
                                const std::vector<std::string>& keywords,
                                const std::vector<std::string>& mwp, std::size_t max_seq_len);
// [BOS, mwp, SEP, equation, EOS]; targets are the equation symbols and EOS.
SerializedInput serialize_parser_input(const Vocab& vocab, const std::vector<std::string>& mwp,
                                       const std::vector<std::string>& equation,
                                       std::size_t max_seq_len);

// Key/value cache of one sequence under incremental decoding.
struct DecodeState {
  std::vector<Tensor> keys;    // per layer, (length x d_model)
  std::vector<Tensor> values;
  std::size_t length = 0;
};

// Pre-LN decoder-only transformer with tied input/output embeddings.
class Decoder {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& cfg, Rng& init_rng);

  const DecoderConfig& config() const { return cfg_; }
  const Tensor& token_embedding() const { return tok_emb_; }
  std::vector<NamedParam> params(const std::string& prefix) const;
  std::vector<Tensor> param_tensors() const;

  Tensor embed_tokens(Tape& tape, std::span<const int> ids) const;
  // Probability rows over the vocabulary, consumed as expected embeddings.
  Tensor embed_soft(Tape& tape, const Tensor& rows) const;

  // Logits for several sequences packed row-wise in `x`; lengths partition
  // the rows. With states, each sequence continues from its cache.
  Tensor forward_embeddings(Tape& tape, const Tensor& x, std::span<const std::size_t> lengths,
                            std::span<DecodeState> states = {}, Rng* dropout_rng = nullptr) const;
  Tensor forward(Tape& tape, std::span<const int> ids) const;

  DecodeState new_state() const;

 private:
  struct Layer {
    Tensor ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  Tensor dropout(Tape& tape, const Tensor& x, Rng* rng) const;

  DecoderConfig cfg_;
  Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_;
  std::vector<Layer> layers_;
};

enum class Reduction { mean, sum };

// Masked mean (or sum) of per-token cross entropies. Rows with target -1 are
// excluded.
Tensor nll_loss(Tape& tape, const Tensor& logits, std::span<const int> targets,
                Reduction reduction = Reduction::mean);

struct DecodeMode {
  enum class Kind { greedy, top_k };
  Kind kind = Kind::greedy;
  std::size_t k = 10;
  double temperature = 1.0;

  static DecodeMode greedy() { return {}; }
  static DecodeMode top_k(std::size_t k, double temperature) { return {Kind::top_k, k, temperature}; }
};

struct DecodeResult {
  std::vector<int> ids;  // generated ids, EOS excluded
  bool hit_eos = false;
  std::size_t steps = 0;
};

// Continues `prompt` until EOS, max_new_tokens, or the context limit. PAD,
// BOS and SEP are never emitted.
DecodeResult decode(const Decoder& model, const std::vector<int>& prompt, const DecodeMode& mode,
                    std::size_t max_new_tokens, Rng* rng = nullptr);

std::vector<std::string> generate(const Decoder& generator, const Vocab& vocab,
                                  const std::vector<std::string>& equation,
                                  const std::vector<std::string>& keywords, const DecodeMode& mode,
                                  std::size_t max_new_tokens, Rng* rng = nullptr);

struct ParseResult {
  std::vector<std::string> equation;
  bool overflow = false;  // cap reached without EOS
};
ParseResult parse_equation(const Decoder& parser, const Vocab& vocab,
                           const std::vector<std::string>& mwp, std::size_t max_new_tokens = 32);

}  // namespace mwpgen
