#include <cmath>

#include "corpus.hpp"
#include "doctest.h"
#include "fd_oracle.hpp"
#include "selector.hpp"

using namespace mwpgen;

namespace {

const char* kEmily =
    "Emily collects num1 cards . Emily ' s father gives Emily num2 more . Bruce has apples . How many cards does "
    "Emily have ?";

struct Fixture {
  std::vector<MaskedExample> corpus;
  Vocab vocab;
  SelectorParams params;
  std::vector<int> ids;

  Fixture() {
    MaskedExample ex;
    ex.mwp_tokens = tokenize_mwp(kEmily);
    ex.equation_symbols = {"x", "=", "num1", "+", "num2"};
    corpus = {ex};
    vocab = Vocab::build(corpus, 1);
    Rng rng(3);
    Matrix emb(static_cast<Eigen::Index>(vocab.size()), 8);
    for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = rng.normal();
    params = SelectorParams::init(emb, rng);
    ids = vocab.encode(ex.mwp_tokens);
  }
};

}  // namespace

TEST_CASE("contextual embedding") {
  Rng rng(1);
  Matrix m(4, 3);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  Tape t;
  const ContextualEmbedding ce = contextual_embed(t, Tensor::constant(m));
  for (Eigen::Index i = 0; i < 4; ++i) {
    CHECK(ce.attention.value().row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    // Independent recomputation of row i.
    Eigen::RowVectorXd s = (m * m.row(i).transpose()).transpose() / std::sqrt(3.0);
    s = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    CHECK((ce.attention.value().row(i) - s).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((ce.contextual.value().row(i) - s * m).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("keyword distribution covers eligible tokens only") {
  Fixture f;
  Tape t;
  const KeywordDistribution d = keyword_probs(t, f.vocab, f.ids, f.params);
  std::vector<std::string> items;
  for (int id : d.items) items.push_back(f.vocab.token(id));
  CHECK(items == std::vector<std::string>{"emily", "collects", "cards", "s", "father", "gives", "bruce", "apples", "many"});
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double q = d.q.value()(static_cast<Eigen::Index>(i), 0);
    CHECK(q > 0.0);
    CHECK(q < 1.0);
  }
  CHECK(d.prob(f.vocab.id("how")) == 0.0);
  CHECK(d.prob(f.vocab.id("num1")) == 0.0);
  CHECK(d.prob(f.vocab.id(".")) == 0.0);
}

TEST_CASE("threshold selection on the Emily example") {
  Fixture f;
  Tape t;
  KeywordDistribution d = keyword_probs(t, f.vocab, f.ids, f.params);
  Matrix q = Matrix::Constant(static_cast<Eigen::Index>(d.size()), 1, 0.1);
  q(0, 0) = 0.9;  // emily
  q(2, 0) = 0.7;  // cards
  q(7, 0) = 0.5;  // apples, exactly at the threshold
  d.q = Tensor::constant(q);
  const ContextMask m = select_threshold(d);
  CHECK(f.vocab.decode(m.selected) == std::vector<std::string>{"emily", "cards"});
}

TEST_CASE("context loss sums KL over eligible items") {
  Fixture f;
  Tape t;
  const KeywordDistribution d = keyword_probs(t, f.vocab, f.ids, f.params);
  double expected = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double q = d.q.value()(static_cast<Eigen::Index>(i), 0);
    expected += q * std::log(q / 0.05) + (1 - q) * std::log((1 - q) / 0.95);
  }
  CHECK(context_loss(t, d, 0.05).item() == doctest::Approx(expected).epsilon(1e-12));

  KeywordDistribution three;
  three.items = {10, 11, 12};
  three.q = Tensor::constant(Matrix::Constant(3, 1, 0.5));
  CHECK(context_loss(t, three, 0.05).item() == doctest::Approx(2.491098).epsilon(1e-6));

  KeywordDistribution empty;
  CHECK(context_loss(t, empty, 0.05).item() == 0.0);
}

TEST_CASE("selector gradients match central differences") {
  Fixture f;
  const auto loss = [&](Tape& t) {
    const KeywordDistribution d = keyword_probs(t, f.vocab, f.ids, f.params);
    Matrix w(static_cast<Eigen::Index>(d.size()), 1);
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, 0) = 1.0 + static_cast<double>(i);
    return t.add(t.sum(t.mul(d.q, Tensor::constant(w))), context_loss(t, d, 0.05));
  };
  CHECK(max_fd_error(f.params.w, loss) < 1e-6);
  CHECK(max_fd_error(f.params.b, loss) < 1e-6);
}

TEST_CASE("sampled selection is straight-through") {
  Fixture f;
  Rng rng(4);
  Tape t;
  const KeywordDistribution d = keyword_probs(t, f.vocab, f.ids, f.params);
  const ContextMask m = select_sample(t, d, rng);
  REQUIRE(m.c.defined());
  std::size_t ones = 0;
  for (Eigen::Index i = 0; i < m.c.value().rows(); ++i) ones += m.c.value()(i, 0) == 1.0;
  CHECK(ones == m.selected.size());
}

TEST_CASE("frozen embeddings are rescaled constants") {
  Fixture f;
  CHECK_FALSE(f.params.embeddings.requires_grad());
  for (Eigen::Index r = 0; r < f.params.embeddings.value().rows(); ++r) {
    CHECK(f.params.embeddings.value().row(r).norm() == doctest::Approx(std::sqrt(8.0)));
  }
  CHECK(f.params.params().size() == 2);
}

TEST_CASE("tf-idf keywords") {
  auto doc = [](std::string text) {
    MaskedExample ex;
    ex.mwp_tokens = tokenize_mwp(text);
    return ex;
  };
  const std::vector<MaskedExample> train = {doc("tom has apples"), doc("sam has apples and pears"),
                                            doc("ann has kites kites"), doc("bob sells pears")};
  const TfidfStats s = TfidfStats::build(train);
  CHECK(s.documents == 4);
  CHECK(s.document_frequency.at("has") == 3);
  CHECK(s.idf("kites") == doctest::Approx(std::log(4.0 / 2.0)));
  CHECK(s.idf("unseen") == doctest::Approx(std::log(4.0)));
  const Vocab v = Vocab::build(train, 1);
  // kites: 2 * ln 2; ann: ln 2; has is a stopword.
  CHECK(tfidf_keywords(s, v, tokenize_mwp("ann has kites kites"), 2) == std::vector<std::string>{"kites", "ann"});
  // Equal scores come back in lexicographic order.
  CHECK(tfidf_keywords(s, v, tokenize_mwp("bob tom"), 5) == std::vector<std::string>{"bob", "tom"});
}
