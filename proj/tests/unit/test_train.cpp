#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "checkpoint.hpp"
#include "config.hpp"
#include "doctest.h"
#include "error.hpp"
#include "toml_lite.hpp"
#include "train.hpp"

using namespace mwpgen;

namespace {

DecoderConfig tiny_decoder() {
  DecoderConfig d;
  d.n_layers = 1;
  d.n_heads = 2;
  d.d_model = 16;
  d.d_ff = 32;
  d.max_seq_len = 48;
  return d;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.generator = c.consistency_parser = c.eval_parser = tiny_decoder();
  c.stage1_epochs = 1;
  c.stage2_epochs = 1;
  c.eval_parser_epochs = 1;
  c.batch_size = 8;
  c.max_rollout = 6;
  c.seed = 3;
  return c;
}

std::vector<const MaskedExample*> batch_of(const std::vector<MaskedExample>& data, std::size_t n) {
  std::vector<const MaskedExample*> b;
  for (std::size_t i = 0; i < n; ++i) b.push_back(&data[i]);
  return b;
}

std::vector<Matrix> grads_of(const std::vector<Tensor>& params) {
  std::vector<Matrix> g;
  for (const auto& p : params) g.push_back(p.has_grad() ? p.grad() : Matrix::Zero(p.value().rows(), p.value().cols()));
  return g;
}

void zero(const Models& m) {
  for (auto p : m.trainable()) p.tensor.zero_grad();
}

std::vector<Matrix> values_of(const Models& m) {
  std::vector<Matrix> v;
  for (const auto& p : m.trainable()) v.push_back(p.tensor.value());
  return v;
}

std::vector<Matrix> values_of(const std::vector<NamedParam>& ps) {
  std::vector<Matrix> v;
  for (const auto& p : ps) v.push_back(p.tensor.value());
  return v;
}

std::string with_header(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit) {
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  nlohmann::json h = nlohmann::json::parse(bytes.substr(16, len));
  edit(h);
  const std::string nh = h.dump();
  std::string out = bytes.substr(0, 8);
  const std::uint64_t nl = nh.size();
  out.append(reinterpret_cast<const char*>(&nl), 8);
  out += nh;
  out += bytes.substr(16 + len);
  return out;
}

}  // namespace

TEST_CASE("toml subset") {
  std::istringstream in(R"(# comment
alpha = 0.5
keyword_source = "tfidf"  # trailing
keyword_permute = false
[generator]
n_layers = 3
)");
  const TomlTable t = parse_toml(in, "mem");
  CHECK(std::get<double>(t.at("alpha")) == 0.5);
  CHECK(std::get<std::string>(t.at("keyword_source")) == "tfidf");
  CHECK(std::get<bool>(t.at("keyword_permute")) == false);
  CHECK(std::get<long long>(t.at("generator.n_layers")) == 3);

  TrainConfig c;
  c.apply(t);
  CHECK(c.alpha == 0.5);
  CHECK(c.keyword_source == KeywordSource::tfidf);
  CHECK_FALSE(c.keyword_permute);
  CHECK(c.generator.n_layers == 3);

  std::istringstream bad("alpha = \n");
  CHECK_THROWS(parse_toml(bad, "mem"));
}

TEST_CASE("shipped default config matches the built-in defaults") {
  const TrainConfig c = load_config(MWPGEN_SOURCE_DIR "/configs/default.toml");
  CHECK(c.to_json() == TrainConfig{}.to_json());
  CHECK(c.fingerprint() == TrainConfig{}.fingerprint());
  const TrainConfig tiny = load_config(MWPGEN_SOURCE_DIR "/configs/tiny.toml", {"alpha=0"});
  CHECK(tiny.generator.d_model == 32);
  CHECK(tiny.alpha == 0.0);
}

TEST_CASE("config overrides, validation and fingerprint") {
  TrainConfig c;
  const std::string fp = c.fingerprint();
  CHECK(fp.size() == 16);
  CHECK(TrainConfig{}.fingerprint() == fp);
  c.set("beta", "0.2");
  CHECK(c.beta == 0.2);
  CHECK(c.fingerprint() != fp);
  c.set("eval_parser.d_model", "64");
  CHECK(c.eval_parser.d_model == 64);

  try {
    c.set("nonsense", "1");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::usage);
    CHECK(std::string(e.what()).find("nonsense") != std::string::npos);
  }
  CHECK_THROWS(c.set("alpha", "abc"));
  CHECK_THROWS(c.set("batch_size", "-1"));

  TrainConfig bad;
  bad.rho = 1.0;
  CHECK_THROWS(bad.validate());
  bad = TrainConfig{};
  bad.alpha = -1;
  CHECK_THROWS(bad.validate());

  const TrainConfig r = TrainConfig::from_json(c.to_json());
  CHECK(r.fingerprint() == c.fingerprint());
  CHECK(r.to_json() == c.to_json());
  // Every key accepts its own serialized value and leaves the config as is.
  TrainConfig same;
  const nlohmann::json j = same.to_json();
  for (const auto& k : TrainConfig::keys()) {
    const auto dot = k.find('.');
    const nlohmann::json& v = dot == std::string::npos ? j.at(k) : j.at(k.substr(0, dot)).at(k.substr(dot + 1));
    INFO(k);
    CHECK_NOTHROW(same.set(k, v.is_string() ? v.get<std::string>() : v.dump()));
  }
  CHECK(same.fingerprint() == TrainConfig{}.fingerprint());
}

TEST_CASE("stage 1 objective decomposes exactly") {
  const auto data = synth_corpus(16, 1);
  TrainConfig cfg = tiny_config();
  cfg.beta = 0.37;
  const Models m = init_models(data, cfg);
  Rng kw(5);
  Tape tape;
  const Objective o = stage1_objective(tape, m, batch_of(data, 8), kw);
  CHECK(std::abs(o.total.item() - (o.lm + cfg.beta * o.c)) < 1e-12);
  CHECK(o.c > 0.0);

  cfg.beta = 0.0;
  const Models m0 = init_models(data, cfg);
  Rng kw0(5);
  Tape t0;
  const Objective o0 = stage1_objective(t0, m0, batch_of(data, 8), kw0);
  CHECK(o0.total.item() == o0.lm);
}

TEST_CASE("stage 1 L_c is the batch mean of summed KL terms") {
  const auto data = synth_corpus(4, 2);
  const Models m = init_models(data, tiny_config());
  Rng kw(1);
  Tape tape;
  const Objective o = stage1_objective(tape, m, batch_of(data, 4), kw);
  double expected = 0.0;
  for (const auto& ex : data) {
    Tape t(false);
    const KeywordDistribution d = keyword_probs(t, m.vocab, m.vocab.encode(ex.mwp_tokens), m.selector);
    for (std::size_t i = 0; i < d.size(); ++i) expected += bernoulli_kl(d.q.value()(static_cast<Eigen::Index>(i), 0), m.cfg.rho);
  }
  CHECK(o.c == doctest::Approx(expected / 4).epsilon(1e-12));
}

TEST_CASE("stage 2 objective decomposes and alpha = 0 reduces to L_LM") {
  const auto data = synth_corpus(16, 1);
  TrainConfig cfg = tiny_config();
  cfg.keyword_source = KeywordSource::tfidf;
  cfg.alpha = 0.6;
  {
    const Models m = init_models(data, cfg);
    Rng kw(5), g(6);
    Tape tape;
    const Objective o = stage2_objective(tape, m, batch_of(data, 8), kw, g);
    CHECK(o.eq > 0.0);
    CHECK(std::abs(o.total.item() - (o.lm + cfg.alpha * o.eq)) < 1e-12);
  }

  // Generator gradients of the alpha = 0 objective are bitwise those of the
  // LM term alone (stage 1 with beta = 0 under the same keywords).
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  const Models m = init_models(data, cfg);
  const std::vector<Tensor> gen = m.generator.param_tensors();
  zero(m);
  {
    Rng kw(5), g(6);
    Tape tape;
    const Objective o = stage2_objective(tape, m, batch_of(data, 8), kw, g);
    CHECK(o.eq == 0.0);
    tape.backward(o.total);
  }
  const auto g2 = grads_of(gen);
  zero(m);
  {
    Rng kw(5);
    Tape tape;
    tape.backward(stage1_objective(tape, m, batch_of(data, 8), kw).total);
  }
  const auto g1 = grads_of(gen);
  bool identical = true;
  for (std::size_t i = 0; i < g1.size(); ++i) identical = identical && g1[i] == g2[i];
  CHECK(identical);

  TrainConfig on = cfg;
  on.alpha = 1.0;
  const Models ma = init_models(data, on);
  const std::vector<Tensor> gena = ma.generator.param_tensors();
  zero(ma);
  {
    Rng kw(5), g(6);
    Tape tape;
    tape.backward(stage2_objective(tape, ma, batch_of(data, 8), kw, g).total);
  }
  const auto ga = grads_of(gena);
  bool differs = false;
  for (std::size_t i = 0; i < ga.size(); ++i) differs = differs || ga[i] != g1[i];
  CHECK(differs);
}

TEST_CASE("relaxed rollout") {
  const auto data = synth_corpus(8, 1);
  const Models m = init_models(data, tiny_config());
  const std::vector<int> prompt = {Vocab::kBos, m.vocab.id("x"), m.vocab.id("="), m.vocab.id("num1"), Vocab::kSep,
                                   Vocab::kSep};
  Rng g(2);
  Tape tape;
  const RelaxedRollout r = rollout_relaxed(tape, m.generator, prompt, 0.5, 5, Relaxation::gumbel_softmax, g);
  CHECK(r.hard.size() <= 5);
  CHECK(r.rows.rows() == r.hard.size());
  for (Eigen::Index i = 0; i < r.rows.value().rows(); ++i) {
    CHECK(r.rows.value().row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Near-zero temperature without noise: the soft feedback reproduces hard
  // greedy decoding with argmax over all ids.
  Rng unused(0);
  const RelaxedRollout cold = rollout_relaxed(tape, m.generator, prompt, 1e-9, 5, Relaxation::softmax, unused);
  std::vector<int> seq = prompt;
  Tape t(false);
  for (int h : cold.hard) {
    const Matrix l = m.generator.forward(t, seq).value();
    Eigen::Index best;
    l.row(l.rows() - 1).maxCoeff(&best);
    CHECK(h == best);
    seq.push_back(h);
  }
}

TEST_CASE("selector is frozen in stage 2 and untouched models stay put") {
  const auto data = synth_corpus(16, 4);
  TrainConfig cfg = tiny_config();
  cfg.stage1_epochs = 0;
  cfg.stage2_epochs = 1;
  cfg.eval_parser_epochs = 0;
  const Models init = init_models(data, cfg);
  const Models trained = run_training(data, cfg);
  CHECK(trained.selector.w.value() == init.selector.w.value());
  CHECK(trained.selector.b.value() == init.selector.b.value());
  CHECK(values_of(trained.eval_parser.params("e")) == values_of(init.eval_parser.params("e")));
  CHECK(values_of(trained.generator.params("g")) != values_of(init.generator.params("g")));
  CHECK(trained.step == 2);

  cfg.stage2_epochs = 0;
  const Models idle = run_training(data, cfg);
  CHECK(values_of(idle) == values_of(init));
  CHECK(checkpoint_bytes(idle) == checkpoint_bytes(init_models(data, cfg)));
}

TEST_CASE("training logs and determinism") {
  const auto data = synth_corpus(16, 4);
  TrainConfig cfg = tiny_config();
  std::vector<nlohmann::json> logs;
  TrainHooks hooks;
  hooks.log = [&](const nlohmann::json& j) { logs.push_back(j); };
  const Models a = run_training(data, cfg, hooks);
  REQUIRE(logs.size() >= 4);
  CHECK(logs[0]["stage"] == "stage1");
  CHECK(logs[0].contains("L_LM"));
  CHECK(logs[0].contains("L_c"));
  CHECK(logs[2]["stage"] == "stage2");
  CHECK(logs.back()["stage"] == "eval_parser");

  const Models b = run_training(data, cfg);
  CHECK(checkpoint_bytes(a) == checkpoint_bytes(b));
  cfg.seed = 4;
  CHECK(checkpoint_bytes(run_training(data, cfg)) != checkpoint_bytes(a));
}

TEST_CASE("checkpoint round trip") {
  const auto data = synth_corpus(16, 4);
  const Models m = run_training(data, tiny_config());
  const std::string bytes = checkpoint_bytes(m);
  CHECK(bytes.substr(0, 8) == kCheckpointMagic);
  const Models r = checkpoint_from_bytes(bytes);
  CHECK(checkpoint_bytes(r) == bytes);
  CHECK(r.cfg.fingerprint() == m.cfg.fingerprint());
  CHECK(r.vocab.tokens() == m.vocab.tokens());
  CHECK(r.step == m.step);
  CHECK(r.adam_gen.step == m.adam_gen.step);
  for (std::size_t i = 0; i < m.trainable().size(); ++i) {
    CHECK((r.trainable()[i].tensor.value() - m.trainable()[i].tensor.value()).cwiseAbs().maxCoeff() < 1e-6);
  }

  const auto path = (std::filesystem::temp_directory_path() / "mwpgen_unit.ckpt").string();
  save_checkpoint(r, path);
  CHECK(read_file(path) == bytes);
  CHECK(checkpoint_bytes(load_checkpoint(path)) == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are data errors") {
  const auto data = synth_corpus(8, 4);
  TrainConfig cfg = tiny_config();
  cfg.stage1_epochs = cfg.stage2_epochs = cfg.eval_parser_epochs = 0;
  const std::string bytes = checkpoint_bytes(init_models(data, cfg));
  const auto kind_of = [](const std::string& b) {
    try {
      checkpoint_from_bytes(b);
    } catch (const Error& e) {
      return std::make_pair(e.kind(), std::string(e.what()));
    }
    return std::make_pair(ErrorKind::usage, std::string("no error"));
  };
  CHECK(kind_of(bytes.substr(0, 10)).first == ErrorKind::data);
  CHECK(kind_of("XXXXXXXX" + bytes.substr(8)).first == ErrorKind::data);
  CHECK(kind_of(bytes.substr(0, bytes.size() - 4)).first == ErrorKind::data);

  std::string v2 = bytes;
  v2[6] = '2';
  const auto version = kind_of(v2);
  CHECK(version.first == ErrorKind::data);
  CHECK(version.second.find('1') != std::string::npos);
  CHECK(version.second.find('2') != std::string::npos);

  const auto shape = kind_of(with_header(bytes, [](nlohmann::json& h) {
    for (auto& s : h["segments"]) {
      if (s["name"] == "sel.w") s["shape"][0] = s["shape"][0].get<int>() + 1;
    }
  }));
  CHECK(shape.first == ErrorKind::data);
  CHECK(shape.second.find("sel.w") != std::string::npos);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/none.ckpt"), Error);
}

TEST_CASE("context-only optimization drives q to rho") {
  const auto data = synth_corpus(16, 6);
  const Models m = init_models(data, tiny_config());
  std::vector<Tensor> params = {m.selector.w, m.selector.b};
  AdamState st;
  st.init(params);
  AdamConfig ac;
  ac.lr = 0.05;
  const auto worst = [&] {
    double w = 0.0;
    for (const auto& ex : data) {
      Tape t(false);
      const auto d = keyword_probs(t, m.vocab, m.vocab.encode(ex.mwp_tokens), m.selector);
      if (d.size()) w = std::max(w, (d.q.value().array() - 0.05).abs().maxCoeff());
    }
    return w;
  };
  for (int step = 0; step < 600 && worst() >= 1e-3; ++step) {
    Tape tape;
    std::vector<Tensor> terms;
    for (const auto& ex : data) {
      const auto d = keyword_probs(tape, m.vocab, m.vocab.encode(ex.mwp_tokens), m.selector);
      terms.push_back(context_loss(tape, d, 0.05));
    }
    for (auto& p : params) p.zero_grad();
    tape.backward(tape.sum(tape.concat(terms, 0)));
    adam_step(params, st, ac);
  }
  CHECK(worst() < 1e-3);
}

TEST_CASE("keywords at inference") {
  const auto data = synth_corpus(16, 6);
  TrainConfig cfg = tiny_config();
  cfg.keyword_source = KeywordSource::all;
  const Models m = init_models(data, cfg);
  const auto kw = select_keywords_for(m, data[0].mwp_tokens);
  for (const auto& k : kw) CHECK(m.vocab.is_eligible(m.vocab.id(k)));
  CHECK(kw.size() >= 2);
  cfg.keyword_source = KeywordSource::tfidf;
  cfg.tfidf_k = 2;
  CHECK(select_keywords_for(init_models(data, cfg), data[0].mwp_tokens).size() == 2);
}

TEST_CASE("evaluate produces a complete report") {
  const auto data = synth_corpus(24, 8);
  const std::vector<MaskedExample> train(data.begin(), data.begin() + 16), test(data.begin() + 16, data.end());
  const Models m = run_training(train, tiny_config());
  const MetricsReport r = evaluate(m, test, &train);
  CHECK(r.examples == 8);
  CHECK(r.bleu4 >= 0.0);
  CHECK(r.acc_eq >= 0.0);
  CHECK(r.acc_eq <= 1.0);
  CHECK(r.novelty >= 0.0);
  CHECK(r.config_fingerprint == m.cfg.fingerprint());
}

TEST_CASE("evaluation parser generalizes on held-out synthetic problems") {
  const auto train = synth_corpus(400, 21);
  const auto held = synth_corpus(100, 22);
  TrainConfig cfg;
  cfg.stage1_epochs = cfg.stage2_epochs = 0;
  Models m = init_models(train, cfg);
  train_eval_mwp2eq(m, train);
  std::size_t exact = 0;
  for (const auto& ex : held) exact += parse_equation(m.eval_parser, m.vocab, ex.mwp_tokens).equation == ex.equation_symbols;
  CHECK(static_cast<double>(exact) / static_cast<double>(held.size()) >= 0.95);
}
