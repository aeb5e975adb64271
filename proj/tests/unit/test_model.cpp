#include <cmath>

#include "corpus.hpp"
#include "doctest.h"
#include "fd_oracle.hpp"
#include "model.hpp"

using namespace mwpgen;

namespace {

DecoderConfig small_config(std::size_t vocab) {
  DecoderConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.max_seq_len = 24;
  c.vocab_size = vocab;
  return c;
}

Decoder small_decoder(std::size_t vocab, std::uint64_t seed = 1) {
  Rng rng(seed);
  Decoder d(small_config(vocab), rng);
  // Larger weights than the default init so attention is far from uniform.
  Rng noise(seed + 100);
  for (auto& p : d.params("g")) {
    Matrix& v = p.tensor.mutable_value();
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += 0.3 * noise.normal();
  }
  return d;
}

}  // namespace

TEST_CASE("generator serialization") {
  const Vocab v = Vocab::build(synth_corpus(10, 1), 1);
  const std::vector<std::string> eq = {"x", "=", "(", "num1", "+", "num2", ")"};
  const std::vector<std::string> kw = {"apples"};
  const std::vector<std::string> mwp = {"how", "many", "apples", "?"};
  const SerializedInput s = serialize_input(v, eq, kw, mwp, 64);
  REQUIRE(s.ids.size() == 1 + 7 + 1 + 1 + 1 + 4 + 1);
  CHECK(s.ids.front() == Vocab::kBos);
  CHECK(s.ids[8] == Vocab::kSep);
  CHECK(s.ids[10] == Vocab::kSep);
  CHECK(s.ids.back() == Vocab::kEos);
  CHECK(s.target_count() == 5);
  const auto t = s.targets();
  REQUIRE(t.size() == s.ids.size() - 1);
  // Position i predicts token i+1; only MWP tokens and EOS are targets.
  for (std::size_t i = 0; i + 1 < s.ids.size(); ++i) {
    CHECK(t[i] == (s.loss_mask[i + 1] ? s.ids[i + 1] : -1));
  }
  CHECK(t[10] == v.id("how"));
  CHECK_THROWS(serialize_input(v, eq, kw, mwp, 10));

  const SerializedInput p = serialize_parser_input(v, mwp, eq, 64);
  CHECK(p.ids[0] == Vocab::kBos);
  CHECK(p.ids[5] == Vocab::kSep);
  CHECK(p.target_count() == 8);
}

TEST_CASE("causality: a later token never changes earlier logits") {
  const Decoder d = small_decoder(20);
  std::vector<int> ids = {1, 7, 9, 5, 11, 6, 8};
  Tape t(false);
  const Matrix base = d.forward(t, ids).value();
  for (std::size_t k = 1; k < ids.size(); ++k) {
    std::vector<int> alt = ids;
    alt[k] = (alt[k] + 3) % 20;
    const Matrix other = d.forward(t, alt).value();
    CHECK(other.topRows(static_cast<Eigen::Index>(k)) == base.topRows(static_cast<Eigen::Index>(k)));
    CHECK((other.row(static_cast<Eigen::Index>(k)) - base.row(static_cast<Eigen::Index>(k))).norm() > 1e-6);
  }
}

TEST_CASE("incremental decoding with the cache matches a full forward") {
  const Decoder d = small_decoder(20);
  const std::vector<int> ids = {1, 7, 9, 5, 11, 6};
  Tape t(false);
  const Matrix full = d.forward(t, ids).value();
  DecodeState st = d.new_state();
  std::span<DecodeState> states(&st, 1);
  const std::vector<int> head(ids.begin(), ids.begin() + 3);
  const std::size_t len3[] = {3};
  Matrix out = d.forward_embeddings(t, d.embed_tokens(t, head), len3, states).value();
  CHECK((out - full.topRows(3)).cwiseAbs().maxCoeff() < 1e-12);
  for (std::size_t i = 3; i < ids.size(); ++i) {
    const int one[] = {ids[i]};
    const std::size_t len1[] = {1};
    out = d.forward_embeddings(t, d.embed_tokens(t, one), len1, states).value();
    CHECK((out.row(0) - full.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK(st.length == ids.size());
}

TEST_CASE("packed sequences do not attend across boundaries") {
  const Decoder d = small_decoder(20);
  const std::vector<int> a = {1, 4, 5}, b = {1, 9, 8, 7};
  std::vector<int> both = a;
  both.insert(both.end(), b.begin(), b.end());
  Tape t(false);
  const std::size_t lengths[] = {3, 4};
  const Matrix packed = d.forward_embeddings(t, d.embed_tokens(t, both), lengths).value();
  CHECK((packed.topRows(3) - d.forward(t, a).value()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((packed.bottomRows(4) - d.forward(t, b).value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("one-hot soft rows reproduce the hard forward pass") {
  const Decoder d = small_decoder(20);
  const std::vector<int> ids = {1, 3, 12, 12, 19};
  Matrix onehot = Matrix::Zero(5, 20);
  for (int i = 0; i < 5; ++i) onehot(i, ids[static_cast<std::size_t>(i)]) = 1.0;
  Tape t(false);
  const std::size_t len[] = {5};
  const Matrix soft = d.forward_embeddings(t, d.embed_soft(t, Tensor::constant(onehot)), len).value();
  CHECK((soft - d.forward(t, ids).value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sequence NLL factorizes into next-token terms") {
  const Decoder d = small_decoder(20);
  const std::vector<int> ids = {1, 4, 9, 2, 15, 6};
  std::vector<int> targets(ids.begin() + 1, ids.end());
  Tape t(false);
  const Tensor logits = d.forward(t, std::vector<int>(ids.begin(), ids.end() - 1));
  const double summed = nll_loss(t, logits, targets, Reduction::sum).item();
  const double mean = nll_loss(t, logits, targets, Reduction::mean).item();
  CHECK(mean == doctest::Approx(summed / 5).epsilon(1e-12));

  // Independent product of conditionals, each from a fresh prefix forward.
  double chain = 0.0;
  for (std::size_t i = 1; i < ids.size(); ++i) {
    const Matrix l = d.forward(t, std::vector<int>(ids.begin(), ids.begin() + static_cast<long>(i))).value();
    const Eigen::RowVectorXd row = l.row(l.rows() - 1);
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    chain += lse - row(ids[i]);
  }
  CHECK(std::abs(summed - chain) < 1e-9);

  std::vector<int> masked = targets;
  masked[0] = -1;
  const double partial = nll_loss(t, logits, masked, Reduction::sum).item();
  CHECK(partial < summed);
}

TEST_CASE("uniform logits give NLL ln V") {
  Rng rng(0);
  Decoder d(small_config(100), rng);
  d.params("g")[0].tensor.mutable_value().setZero();  // tied embedding
  Tape t(false);
  const std::vector<int> ids = {1, 10, 20, 30};
  const std::vector<int> targets = {10, 20, 30, 2};
  CHECK(nll_loss(t, d.forward(t, ids), targets).item() == doctest::Approx(std::log(100.0)).epsilon(1e-9));
}

TEST_CASE("decoder gradients match central differences") {
  const Decoder d = small_decoder(12, 4);
  const std::vector<int> ids = {1, 5, 7, 3, 9};
  const std::vector<int> targets = {5, 7, -1, 9, 2};
  for (const auto& p : d.params("g")) {
    const double err = max_fd_error(p.tensor, [&](Tape& t) { return nll_loss(t, d.forward(t, ids), targets); });
    INFO(p.name);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("decoding") {
  const Decoder d = small_decoder(20, 3);
  const std::vector<int> prompt = {1, 7, 3};
  const DecodeResult a = decode(d, prompt, DecodeMode::greedy(), 10);
  const DecodeResult b = decode(d, prompt, DecodeMode::greedy(), 10);
  CHECK(a.ids == b.ids);
  CHECK(a.ids.size() <= 10);
  for (int id : a.ids) {
    CHECK(id != Vocab::kPad);
    CHECK(id != Vocab::kBos);
    CHECK(id != Vocab::kSep);
    CHECK(id != Vocab::kEos);
  }

  Rng r1(5), r2(5);
  const DecodeMode topk = DecodeMode::top_k(3, 0.8);
  CHECK(decode(d, prompt, topk, 10, &r1).ids == decode(d, prompt, topk, 10, &r2).ids);

  // The context limit bounds generation.
  const DecodeResult capped = decode(d, prompt, DecodeMode::greedy(), 1000);
  CHECK(prompt.size() + capped.ids.size() <= d.config().max_seq_len + 1);

  CHECK_THROWS(decode(d, prompt, DecodeMode::greedy(), 0));
}

TEST_CASE("config validation") {
  DecoderConfig c = small_config(10);
  c.n_heads = 3;
  CHECK_THROWS(c.validate());
  c = small_config(10);
  c.vocab_size = 0;
  CHECK_THROWS(c.validate());
}
