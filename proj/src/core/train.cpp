#include "train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "discrete.hpp"
#include "error.hpp"

namespace mwpgen {

std::vector<NamedParam> Models::trainable() const {
  std::vector<NamedParam> out = generator.params("gen");
  for (auto& p : consistency_parser.params("cons")) out.push_back(std::move(p));
  for (auto& p : eval_parser.params("eval")) out.push_back(std::move(p));
  for (auto& p : selector.params()) out.push_back(std::move(p));
  return out;
}

TrainRngs TrainRngs::from_seed(std::uint64_t seed) {
  return {Rng::stream(seed, "data"), Rng::stream(seed, "keywords"), Rng::stream(seed, "gumbel"),
          Rng::stream(seed, "dropout")};
}

Models init_models(const std::vector<MaskedExample>& training, const TrainConfig& cfg) {
  if (training.empty()) fail_data("training corpus is empty");
  cfg.validate();
  Models m;
  m.cfg = cfg;
  m.vocab = Vocab::build(training, cfg.min_freq);
  m.cfg.generator.vocab_size = m.vocab.size();
  m.cfg.consistency_parser.vocab_size = m.vocab.size();
  m.cfg.eval_parser.vocab_size = m.vocab.size();

  Rng init = Rng::stream(cfg.seed, "init");
  m.generator = Decoder(m.cfg.generator, init);
  m.consistency_parser = Decoder(m.cfg.consistency_parser, init);
  m.eval_parser = Decoder(m.cfg.eval_parser, init);
  m.selector = SelectorParams::init(m.generator.token_embedding().value(), init);
  m.tfidf = TfidfStats::build(training);

  m.adam_gen.init(m.generator.param_tensors());
  m.adam_cons.init(m.consistency_parser.param_tensors());
  m.adam_eval.init(m.eval_parser.param_tensors());
  const Tensor sel[] = {m.selector.w, m.selector.b};
  m.adam_sel.init(sel);
  return m;
}

namespace {

// Sequences stacked row-wise for one packed forward pass.
struct Packed {
  std::vector<Tensor> parts;
  std::vector<std::size_t> lengths;
  std::vector<int> targets;

  void push(Tensor x, const std::vector<int>& next_targets) {
    lengths.push_back(x.rows());
    parts.push_back(std::move(x));
    targets.insert(targets.end(), next_targets.begin(), next_targets.end());
    targets.push_back(-1);
  }
  Tensor stacked(Tape& tape) const { return parts.size() == 1 ? parts[0] : tape.concat(parts, 0); }
};

std::vector<std::string> tokens_of(const Vocab& vocab, const std::vector<int>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(vocab.token(id));
  return out;
}

std::vector<std::string> all_eligible(const Vocab& vocab, const std::vector<std::string>& mwp_tokens) {
  std::vector<std::string> out;
  for (const auto& t : mwp_tokens) {
    if (vocab.is_eligible(vocab.id(t)) && std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
  }
  return out;
}

std::vector<std::string> augment(const TrainConfig& cfg, const std::vector<std::string>& kw, Rng& rng) {
  if (cfg.keyword_permute) return augment_context(kw, cfg.keyword_drop_p, rng);
  std::vector<std::string> kept;
  for (const auto& k : kw) {
    if (!rng.bernoulli(cfg.keyword_drop_p)) kept.push_back(k);
  }
  return kept;
}

Tensor lm_loss(Tape& tape, const Decoder& model, const Packed& p, Reduction r, Rng* dropout_rng) {
  Tensor logits = model.forward_embeddings(tape, p.stacked(tape), p.lengths, {}, dropout_rng);
  return nll_loss(tape, logits, p.targets, r);
}

void push_parser_example(Tape& tape, Packed& p, const Decoder& parser, const Vocab& vocab,
                         const MaskedExample& ex) {
  SerializedInput s = serialize_parser_input(vocab, ex.mwp_tokens, ex.equation_symbols, parser.config().max_seq_len);
  p.push(parser.embed_tokens(tape, s.ids), s.targets());
}

}  // namespace

std::vector<std::string> select_keywords_for(const Models& m, const std::vector<std::string>& mwp_tokens) {
  switch (m.cfg.keyword_source) {
    case KeywordSource::tfidf:
      return tfidf_keywords(m.tfidf, m.vocab, mwp_tokens, m.cfg.tfidf_k);
    case KeywordSource::all:
      return all_eligible(m.vocab, mwp_tokens);
    case KeywordSource::selector:
      break;
  }
  Tape tape(false);
  KeywordDistribution dist = keyword_probs(tape, m.vocab, m.vocab.encode(mwp_tokens), m.selector);
  return tokens_of(m.vocab, select_threshold(dist).selected);
}

Objective stage1_objective(Tape& tape, const Models& m, Batch batch, Rng& keyword_rng, Rng* dropout_rng) {
  if (batch.empty()) fail_usage("stage 1: empty batch");
  const TrainConfig& cfg = m.cfg;
  Packed packed;
  std::vector<Tensor> kl_terms;

  for (const MaskedExample* ex : batch) {
    std::vector<std::string> kw;
    std::vector<std::size_t> kw_item;
    Tensor c;
    if (cfg.keyword_source == KeywordSource::selector) {
      const std::vector<int> mwp_ids = m.vocab.encode(ex->mwp_tokens);
      KeywordDistribution dist = keyword_probs(tape, m.vocab, mwp_ids, m.selector);
      if (dist.size() > 0) {
        ContextMask mask = select_sample(tape, dist, keyword_rng);
        c = mask.c;
        kw = augment(cfg, tokens_of(m.vocab, mask.selected), keyword_rng);
        for (const auto& t : kw) {
          const int id = m.vocab.id(t);
          kw_item.push_back(static_cast<std::size_t>(
              std::find(dist.items.begin(), dist.items.end(), id) - dist.items.begin()));
        }
        kl_terms.push_back(context_loss(tape, dist, cfg.rho));
      }
    } else {
      kw = augment(cfg, select_keywords_for(m, ex->mwp_tokens), keyword_rng);
    }

    SerializedInput s = serialize_input(m.vocab, ex->equation_symbols, kw, ex->mwp_tokens,
                                        m.generator.config().max_seq_len);
    Tensor x = m.generator.embed_tokens(tape, s.ids);
    if (c.defined() && !kw.empty()) {
      // Keyword rows are scaled by their sample c_i (forward value 1), so
      // the LM gradient reaches q through the straight-through path.
      const auto n = static_cast<Eigen::Index>(s.ids.size());
      Matrix route = Matrix::Zero(n, static_cast<Eigen::Index>(c.rows()));
      Matrix base = Matrix::Ones(n, 1);
      const std::size_t start = ex->equation_symbols.size() + 2;
      for (std::size_t j = 0; j < kw.size(); ++j) {
        const auto row = static_cast<Eigen::Index>(start + j);
        route(row, static_cast<Eigen::Index>(kw_item[j])) = 1.0;
        base(row, 0) = 0.0;
      }
      Tensor gate = tape.add(Tensor::constant(std::move(base)), tape.matmul(Tensor::constant(std::move(route)), c));
      x = tape.scale_rows(x, gate);
    }
    packed.push(x, s.targets());
  }

  Objective o;
  Tensor lm = lm_loss(tape, m.generator, packed, cfg.lm_reduction, dropout_rng);
  Tensor lc = Tensor::scalar(0.0);
  if (!kl_terms.empty()) {
    Tensor sum = kl_terms.size() == 1 ? kl_terms[0] : tape.sum(tape.concat(kl_terms, 0));
    lc = tape.scalar_mul(sum, 1.0 / static_cast<double>(batch.size()));
  }
  o.lm = lm.item();
  o.c = lc.item();
  o.total = cfg.beta == 0.0 ? lm : tape.add(lm, tape.scalar_mul(lc, cfg.beta));
  return o;
}

RelaxedRollout rollout_relaxed(Tape& tape, const Decoder& generator, const std::vector<int>& prompt,
                               double tau, std::size_t cap, Relaxation relaxation, Rng& gumbel_rng) {
  if (cap < 1) fail_usage("rollout: cap must be at least 1");
  if (prompt.empty()) fail_usage("rollout: empty prompt");
  const std::size_t v = generator.config().vocab_size;
  DecodeState state = generator.new_state();
  std::span<DecodeState> st(&state, 1);
  const std::size_t plen[] = {prompt.size()};
  const std::size_t one[] = {1};
  Tensor logits = generator.forward_embeddings(tape, generator.embed_tokens(tape, prompt), plen, st);
  Tensor last = tape.slice(logits, 0, logits.rows() - 1, 1);

  RelaxedRollout r;
  std::vector<Tensor> rows;
  for (std::size_t step = 0; step < cap; ++step) {
    Matrix noise = relaxation == Relaxation::gumbel_softmax ? gumbel_noise(1, v, gumbel_rng) : Matrix::Zero(1, v);
    const int hard = gumbel_max(last.value(), noise)[0];
    Tensor y = gumbel_softmax(tape, last, noise, tau);
    rows.push_back(y);
    r.hard.push_back(hard);
    if (hard == Vocab::kEos) {
      r.hit_eos = true;
      break;
    }
    if (step + 1 == cap || state.length >= generator.config().max_seq_len) break;
    last = generator.forward_embeddings(tape, generator.embed_soft(tape, y), one, st);
  }
  r.rows = rows.size() == 1 ? rows[0] : tape.concat(rows, 0);
  return r;
}

Objective stage2_objective(Tape& tape, const Models& m, Batch batch, Rng& keyword_rng, Rng& gumbel_rng,
                           Rng* dropout_rng) {
  if (batch.empty()) fail_usage("stage 2: empty batch");
  const TrainConfig& cfg = m.cfg;
  const Decoder& gen = m.generator;
  const Decoder& parser = m.consistency_parser;
  const double tau = cfg.tau.at(m.step);

  Packed lm_pack, eq_pack;
  for (const MaskedExample* ex : batch) {
    const std::vector<std::string> kw = augment(cfg, select_keywords_for(m, ex->mwp_tokens), keyword_rng);
    SerializedInput s = serialize_input(m.vocab, ex->equation_symbols, kw, ex->mwp_tokens, gen.config().max_seq_len);
    lm_pack.push(gen.embed_tokens(tape, s.ids), s.targets());
    if (cfg.alpha == 0.0) continue;

    const std::size_t prompt_len = ex->equation_symbols.size() + kw.size() + 3;
    std::vector<int> prompt(s.ids.begin(), s.ids.begin() + static_cast<std::ptrdiff_t>(prompt_len));
    const std::size_t eq_len = ex->equation_symbols.size();
    const std::size_t pmax = parser.config().max_seq_len;
    std::size_t cap = std::min(cfg.max_rollout, gen.config().max_seq_len - prompt_len + 1);
    cap = pmax > eq_len + 3 ? std::min(cap, pmax - eq_len - 3) : 0;
    if (cap == 0) continue;

    RelaxedRollout r = rollout_relaxed(tape, gen, prompt, tau, cap, cfg.relaxation, gumbel_rng);
    std::size_t used = r.hard.size() - (r.hit_eos ? 1 : 0);

    std::vector<Tensor> parts;
    const int bos[] = {Vocab::kBos};
    parts.push_back(parser.embed_tokens(tape, bos));
    if (used > 0) parts.push_back(parser.embed_soft(tape, used == r.rows.rows() ? r.rows : tape.slice(r.rows, 0, 0, used)));
    std::vector<int> tail;
    tail.push_back(Vocab::kSep);
    for (const auto& e : ex->equation_symbols) tail.push_back(m.vocab.id(e));
    tail.push_back(Vocab::kEos);
    parts.push_back(parser.embed_tokens(tape, tail));

    std::vector<int> targets(1 + used, -1);
    targets.insert(targets.end(), tail.begin() + 1, tail.end());
    eq_pack.push(tape.concat(parts, 0), targets);
  }

  Objective o;
  Tensor lm = lm_loss(tape, gen, lm_pack, cfg.lm_reduction, dropout_rng);
  o.lm = lm.item();
  o.total = lm;
  if (!eq_pack.parts.empty()) {
    Tensor eq = lm_loss(tape, parser, eq_pack, Reduction::mean, dropout_rng);
    o.eq = eq.item();
    o.total = tape.add(lm, tape.scalar_mul(eq, cfg.alpha));
  }
  return o;
}

double parser_nll(const Decoder& parser, const Vocab& vocab, const std::vector<MaskedExample>& data) {
  if (data.empty()) fail_usage("parser_nll: empty data");
  constexpr std::size_t chunk = 64;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < data.size(); i += chunk) {
    Tape tape(false);
    Packed p;
    for (std::size_t j = i; j < std::min(data.size(), i + chunk); ++j) push_parser_example(tape, p, parser, vocab, data[j]);
    const auto n = static_cast<std::size_t>(std::count_if(p.targets.begin(), p.targets.end(), [](int t) { return t >= 0; }));
    total += lm_loss(tape, parser, p, Reduction::sum, nullptr).item();
    count += n;
  }
  return total / static_cast<double>(count);
}

namespace {

struct Group {
  std::vector<Tensor> params;
  AdamState* state;
  double grad_scale = 1.0;
};

void zero_grads(const Models& m) {
  for (auto& p : m.trainable()) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void optimize(std::span<Group> groups, const TrainConfig& cfg) {
  AdamConfig ac;
  ac.lr = cfg.lr;
  for (Group& g : groups) {
    if (g.grad_scale != 1.0) {
      for (Tensor& t : g.params) {
        if (t.has_grad()) t.node()->grad *= g.grad_scale;
      }
    }
    clip_grad_norm(g.params, cfg.grad_clip);
    adam_step(g.params, *g.state, ac);
  }
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

std::vector<const MaskedExample*> gather(const std::vector<MaskedExample>& data, const std::vector<std::size_t>& idx) {
  std::vector<const MaskedExample*> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(&data[i]);
  return out;
}

void check_finite(const Objective& o, long step, const char* stage) {
  if (!std::isfinite(o.total.item())) {
    fail_numerical(std::string("non-finite loss at ") + stage + " step " + std::to_string(step) +
                       " (L_LM=" + std::to_string(o.lm) + ", L_eq=" + std::to_string(o.eq) +
                       ", L_c=" + std::to_string(o.c) + ")",
                   "step " + std::to_string(step));
  }
}

void log_step(const TrainHooks& hooks, long step, const char* stage, const Objective& o) {
  if (!hooks.log) return;
  nlohmann::ordered_json j;
  j["step"] = step;
  j["stage"] = stage;
  j["L_LM"] = o.lm;
  j["L_eq"] = o.eq;
  j["L_c"] = o.c;
  j["total"] = o.total.item();
  hooks.log(nlohmann::json(j));
}

}  // namespace

void train_parser_epoch(Decoder& parser, AdamState& adam, const Models& m, const std::vector<MaskedExample>& data,
                        Rng& data_rng, Rng* dropout_rng) {
  std::vector<Tensor> params = parser.param_tensors();
  for (const auto& idx : epoch_batches(data.size(), m.cfg.batch_size, data_rng)) {
    Tape tape;
    Packed p;
    for (std::size_t i : idx) push_parser_example(tape, p, parser, m.vocab, data[i]);
    Tensor loss = lm_loss(tape, parser, p, Reduction::mean, dropout_rng);
    if (!std::isfinite(loss.item())) fail_numerical("non-finite parser loss");
    for (Tensor& t : params) t.zero_grad();
    tape.backward(loss);
    Group g{params, &adam};
    optimize(std::span<Group>(&g, 1), m.cfg);
  }
}

void train_eval_mwp2eq(Models& m, const std::vector<MaskedExample>& training, const TrainHooks& hooks) {
  if (m.cfg.eval_parser_epochs == 0) return;
  Rng rng = Rng::stream(m.cfg.seed, "eval_parser");
  Rng dropout = Rng::stream(m.cfg.seed, "eval_parser.dropout");

  std::vector<std::size_t> order(training.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::size_t n_hold = static_cast<std::size_t>(std::llround(m.cfg.eval_holdout_fraction * static_cast<double>(training.size())));
  if (training.size() < 2) n_hold = 0;
  n_hold = std::min(n_hold, training.size() - 1);
  std::vector<MaskedExample> fit, hold;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_hold ? hold : fit).push_back(training[order[i]]);

  std::vector<Tensor> params = m.eval_parser.param_tensors();
  std::vector<Matrix> best;
  double best_nll = INFINITY;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < m.cfg.eval_parser_epochs; ++epoch) {
    train_parser_epoch(m.eval_parser, m.adam_eval, m, fit, rng, &dropout);
    if (hold.empty()) continue;
    const double nll = parser_nll(m.eval_parser, m.vocab, hold);
    if (hooks.log) hooks.log({{"stage", "eval_parser"}, {"epoch", epoch + 1}, {"holdout_nll", nll}});
    if (nll < best_nll) {
      best_nll = nll;
      since_best = 0;
      best.clear();
      for (const Tensor& t : params) best.push_back(t.value());
    } else if (++since_best >= m.cfg.eval_parser_patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < best.size(); ++i) params[i].mutable_value() = best[i];
}

Models run_training(const std::vector<MaskedExample>& training, const TrainConfig& cfg, const TrainHooks& hooks) {
  Models m = init_models(training, cfg);
  TrainRngs rng = TrainRngs::from_seed(cfg.seed);
  Rng* dropout = &rng.dropout;

  auto after_step = [&] {
    ++m.step;
    if (hooks.checkpoint && cfg.checkpoint_every > 0 && m.step % static_cast<long>(cfg.checkpoint_every) == 0) {
      hooks.checkpoint(m);
    }
  };

  std::vector<Tensor> gen_params = m.generator.param_tensors();
  std::vector<Tensor> cons_params = m.consistency_parser.param_tensors();
  std::vector<Tensor> sel_params = {m.selector.w, m.selector.b};

  for (std::size_t epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
    for (const auto& idx : epoch_batches(training.size(), cfg.batch_size, rng.data)) {
      const auto batch = gather(training, idx);
      Tape tape;
      Objective o = stage1_objective(tape, m, batch, rng.keywords, dropout);
      check_finite(o, m.step, "stage1");
      zero_grads(m);
      tape.backward(o.total);
      std::vector<Group> groups = {{gen_params, &m.adam_gen}};
      if (cfg.keyword_source == KeywordSource::selector) groups.push_back({sel_params, &m.adam_sel});
      optimize(groups, cfg);
      log_step(hooks, m.step, "stage1", o);
      after_step();
    }
  }

  if (cfg.stage2_epochs > 0) {
    if (cfg.alpha > 0.0) {
      for (std::size_t e = 0; e < cfg.parser_warmup_epochs; ++e) {
        train_parser_epoch(m.consistency_parser, m.adam_cons, m, training, rng.data, dropout);
      }
    }
    for (std::size_t epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
      for (const auto& idx : epoch_batches(training.size(), cfg.batch_size, rng.data)) {
        const auto batch = gather(training, idx);
        Tape tape;
        Objective o = stage2_objective(tape, m, batch, rng.keywords, rng.gumbel, dropout);
        check_finite(o, m.step, "stage2");
        zero_grads(m);
        tape.backward(o.total);
        std::vector<Group> groups = {{gen_params, &m.adam_gen}};
        // The parser follows the gradient of L_eq itself, not alpha * L_eq.
        if (cfg.alpha > 0.0) groups.push_back({cons_params, &m.adam_cons, 1.0 / cfg.alpha});
        optimize(groups, cfg);
        log_step(hooks, m.step, "stage2", o);
        after_step();
      }
    }
  }

  train_eval_mwp2eq(m, training, hooks);
  return m;
}

std::vector<Generation> generate_for(const Models& m, const std::vector<MaskedExample>& examples) {
  std::vector<Generation> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    Generation g;
    g.keywords = select_keywords_for(m, ex.mwp_tokens);
    g.mwp = generate(m.generator, m.vocab, ex.equation_symbols, g.keywords, DecodeMode::greedy(),
                     m.cfg.max_generate_tokens);
    out.push_back(std::move(g));
  }
  return out;
}

MetricsReport evaluate(const Models& m, const std::vector<MaskedExample>& test,
                       const std::vector<MaskedExample>* training) {
  if (test.empty()) fail_data("evaluation set is empty");
  const std::vector<Generation> gens = generate_for(m, test);
  std::vector<Tokens> cands, refs, eqs;
  std::vector<std::string> gen_text;
  for (std::size_t i = 0; i < test.size(); ++i) {
    cands.push_back(gens[i].mwp);
    refs.push_back(test[i].mwp_tokens);
    eqs.push_back(test[i].equation_symbols);
    std::string t;
    for (const auto& tok : gens[i].mwp) t += (t.empty() ? "" : " ") + tok;
    gen_text.push_back(std::move(t));
  }
  MetricsReport r;
  r.examples = test.size();
  r.bleu4 = bleu4(cands, refs);
  r.rouge_l = rouge_l_corpus(cands, refs);
  r.meteor_lite = meteor_lite_corpus(cands, refs);
  const AccEqResult acc = acc_eq(cands, eqs, m.eval_parser, m.vocab);
  r.acc_eq = acc.accuracy;
  r.parser_overflows = acc.overflows;
  r.dist3 = dist_n(cands, 3);
  if (training != nullptr) {
    std::vector<std::string> train_text;
    for (const auto& ex : *training) {
      std::string t;
      for (const auto& tok : ex.mwp_tokens) t += (t.empty() ? "" : " ") + tok;
      train_text.push_back(std::move(t));
    }
    r.novelty = novelty(gen_text, train_text);
  }
  r.config_fingerprint = m.cfg.fingerprint();
  return r;
}

}  // namespace mwpgen
