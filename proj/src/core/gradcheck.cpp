#include "gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "discrete.hpp"
#include "error.hpp"
#include "selector.hpp"
#include "train.hpp"

namespace mwpgen {

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& r : rows) m = std::max(m, r.max_rel_error);
  return m;
}

nlohmann::ordered_json GradcheckReport::to_json() const {
  nlohmann::ordered_json j;
  j["pass"] = pass;
  j["max_rel_error"] = max_rel_error();
  j["total_samples"] = total_samples;
  j["seconds"] = seconds;
  j["step"] = kFiniteDifferenceStep;
  auto& rs = j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    rs.push_back({{"name", r.name}, {"max_rel_error", r.max_rel_error}, {"samples", r.samples},
                  {"tolerance", r.tolerance}, {"pass", r.pass}});
  }
  return j;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

GradcheckRow check_gradient(const std::string& name, std::vector<Tensor> params,
                            const std::function<Tensor(Tape&)>& loss, std::size_t max_samples, Rng& pick,
                            double tolerance) {
  for (Tensor& p : params) p.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  std::vector<Matrix> analytic;
  std::size_t total = 0;
  for (const Tensor& p : params) {
    analytic.push_back(p.has_grad() ? p.grad() : Matrix::Zero(p.value().rows(), p.value().cols()));
    total += static_cast<std::size_t>(p.value().size());
  }

  std::vector<std::size_t> flat;
  if (total <= max_samples) {
    for (std::size_t i = 0; i < total; ++i) flat.push_back(i);
  } else {
    std::set<std::size_t> chosen;
    while (chosen.size() < max_samples) chosen.insert(static_cast<std::size_t>(pick.below(total)));
    flat.assign(chosen.begin(), chosen.end());
  }

  GradcheckRow row;
  row.name = name;
  row.tolerance = tolerance;
  const double h = kFiniteDifferenceStep;
  for (std::size_t f : flat) {
    std::size_t which = 0;
    while (f >= static_cast<std::size_t>(params[which].value().size())) {
      f -= static_cast<std::size_t>(params[which].value().size());
      ++which;
    }
    double& x = params[which].mutable_value().data()[f];
    const double orig = x;
    x = orig + h;
    Tape plus(false);
    const double fp = loss(plus).item();
    x = orig - h;
    Tape minus(false);
    const double fm = loss(minus).item();
    x = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    row.max_rel_error = std::max(row.max_rel_error, relative_error(analytic[which].data()[f], numeric));
    ++row.samples;
  }
  row.pass = row.max_rel_error < tolerance;
  for (Tensor& p : params) p.zero_grad();
  return row;
}

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = lo + (hi - lo) * rng.uniform();
  return m;
}

// sum(out * R) for a fixed random R, so every output entry matters.
Tensor weighted(Tape& tape, const Tensor& out, const Matrix& r) {
  return tape.sum(tape.mul(out, Tensor::constant(r)));
}

constexpr double kPrimitiveTolerance = 1e-6;
constexpr double kComposedTolerance = 1e-3;

void primitive_rows(GradcheckReport& rep, Rng& rng) {
  auto param = [&](std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    return Tensor::parameter(random_matrix(r, c, rng, lo, hi));
  };
  auto unary = [&](const std::string& name, Tensor x, std::function<Tensor(Tape&, const Tensor&)> op) {
    Tape probe(false);
    const Tensor y = op(probe, x);
    const Matrix r = random_matrix(y.rows(), y.cols(), rng);
    rep.rows.push_back(check_gradient(name, {x}, [&](Tape& t) { return weighted(t, op(t, x), r); }, 1000, rng,
                                      kPrimitiveTolerance));
  };
  auto binary = [&](const std::string& name, Tensor a, Tensor b,
                    std::function<Tensor(Tape&, const Tensor&, const Tensor&)> op) {
    Tape probe(false);
    const Tensor y = op(probe, a, b);
    const Matrix r = random_matrix(y.rows(), y.cols(), rng);
    rep.rows.push_back(check_gradient(name, {a, b}, [&](Tape& t) { return weighted(t, op(t, a, b), r); }, 1000,
                                      rng, kPrimitiveTolerance));
  };

  binary("add", param(3, 4), param(3, 4), [](Tape& t, const Tensor& a, const Tensor& b) { return t.add(a, b); });
  binary("sub", param(3, 4), param(3, 4), [](Tape& t, const Tensor& a, const Tensor& b) { return t.sub(a, b); });
  binary("mul", param(3, 4), param(3, 4), [](Tape& t, const Tensor& a, const Tensor& b) { return t.mul(a, b); });
  binary("add_row", param(3, 4), param(1, 4),
         [](Tape& t, const Tensor& a, const Tensor& b) { return t.add_row(a, b); });
  binary("scale_rows", param(3, 4), param(3, 1),
         [](Tape& t, const Tensor& a, const Tensor& b) { return t.scale_rows(a, b); });
  binary("matmul", param(3, 4), param(4, 2),
         [](Tape& t, const Tensor& a, const Tensor& b) { return t.matmul(a, b); });
  binary("matmul_nt", param(3, 4), param(5, 4),
         [](Tape& t, const Tensor& a, const Tensor& b) { return t.matmul_nt(a, b); });
  binary("concat_rows", param(2, 3), param(3, 3), [](Tape& t, const Tensor& a, const Tensor& b) {
    const Tensor parts[] = {a, b};
    return t.concat(parts, 0);
  });
  binary("concat_cols", param(3, 2), param(3, 1), [](Tape& t, const Tensor& a, const Tensor& b) {
    const Tensor parts[] = {a, b, a};
    return t.concat(parts, 1);
  });
  unary("scalar_mul", param(3, 4), [](Tape& t, const Tensor& x) { return t.scalar_mul(x, -1.7); });
  unary("transpose", param(3, 4), [](Tape& t, const Tensor& x) { return t.transpose(x); });
  unary("slice_rows", param(5, 3), [](Tape& t, const Tensor& x) { return t.slice(x, 0, 1, 3); });
  unary("slice_cols", param(3, 5), [](Tape& t, const Tensor& x) { return t.slice(x, 1, 2, 2); });
  unary("embedding_gather", param(6, 3), [](Tape& t, const Tensor& x) {
    const int ids[] = {4, 0, 4, 2};
    return t.embedding_gather(x, ids);
  });
  unary("softmax_rows", param(3, 5), [](Tape& t, const Tensor& x) { return t.softmax_rows(x, 0.7); });
  unary("softmax_rows_causal", param(3, 5),
        [](Tape& t, const Tensor& x) { return t.softmax_rows(x, 1.3, true, 2); });
  unary("sigmoid", param(3, 4, -3.0, 3.0), [](Tape& t, const Tensor& x) { return t.sigmoid(x); });
  unary("log", param(3, 4, 0.2, 3.0), [](Tape& t, const Tensor& x) { return t.log(x); });
  unary("exp", param(3, 4), [](Tape& t, const Tensor& x) { return t.exp(x); });
  unary("gelu", param(3, 4, -3.0, 3.0), [](Tape& t, const Tensor& x) { return t.gelu(x); });
  unary("sum", param(3, 4), [](Tape& t, const Tensor& x) { return t.sum(x); });
  unary("mean", param(3, 4), [](Tape& t, const Tensor& x) { return t.mean(x); });
  unary("cross_entropy_from_logits", param(4, 6, -2.0, 2.0), [](Tape& t, const Tensor& x) {
    const int targets[] = {1, -1, 5, 0};
    return t.cross_entropy_from_logits(x, targets);
  });
  {
    Tensor x = param(3, 6), g = param(1, 6, 0.5, 1.5), b = param(1, 6);
    const Matrix r = random_matrix(3, 6, rng);
    rep.rows.push_back(check_gradient(
        "layer_norm", {x, g, b}, [&](Tape& t) { return weighted(t, t.layer_norm(x, g, b), r); }, 1000, rng,
        kPrimitiveTolerance));
  }
  {
    const Matrix noise = gumbel_noise(2, 5, rng);
    unary("gumbel_softmax", param(2, 5), [noise](Tape& t, const Tensor& x) { return gumbel_softmax(t, x, noise, 0.6); });
  }
  unary("bernoulli_kl", param(4, 1, 0.05, 0.95), [](Tape& t, const Tensor& x) { return bernoulli_kl(t, x, 0.05); });
}

// Tiny two-model setup shared by the composed checks.
struct Fixture {
  std::vector<MaskedExample> corpus;
  Models models;
  std::vector<const MaskedExample*> batch;
};

Fixture make_fixture(std::uint64_t seed) {
  Fixture f;
  f.corpus = synth_corpus(6, seed);
  TrainConfig cfg;
  cfg.seed = seed;
  for (DecoderConfig* d : {&cfg.generator, &cfg.consistency_parser, &cfg.eval_parser}) {
    d->n_layers = 2;
    d->n_heads = 2;
    d->d_model = 16;
    d->d_ff = 32;
    d->max_seq_len = 64;
  }
  cfg.max_rollout = 4;
  f.models = init_models(f.corpus, cfg);
  // Spread the weights well beyond the default init.
  Rng perturb = Rng::stream(seed, "gradcheck.weights");
  for (auto& p : f.models.trainable()) {
    Matrix& v = p.tensor.mutable_value();
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += 0.2 * perturb.normal();
  }
  f.batch = {&f.corpus[0], &f.corpus[1]};
  return f;
}

std::vector<Tensor> tensors(const std::vector<NamedParam>& ps) {
  std::vector<Tensor> out;
  for (const auto& p : ps) out.push_back(p.tensor);
  return out;
}

void composed_rows(GradcheckReport& rep, std::uint64_t seed, Rng& pick) {
  Fixture f = make_fixture(seed);
  Models& m = f.models;
  const Rng keywords = Rng::stream(seed, "keywords");
  const Rng gumbel = Rng::stream(seed, "gumbel");

  {
    m.cfg.beta = 0.0;
    rep.rows.push_back(check_gradient(
        "L_LM", tensors(m.generator.params("gen")),
        [&](Tape& t) {
          Rng k = keywords;
          return stage1_objective(t, m, f.batch, k).total;
        },
        60, pick, kComposedTolerance));
    m.cfg.beta = 0.1;
  }
  rep.rows.push_back(check_gradient(
      "L_c", tensors(m.selector.params()),
      [&](Tape& t) {
        std::vector<Tensor> terms;
        for (const MaskedExample* ex : f.batch) {
          KeywordDistribution d = keyword_probs(t, m.vocab, m.vocab.encode(ex->mwp_tokens), m.selector);
          terms.push_back(context_loss(t, d, m.cfg.rho));
        }
        return t.sum(t.concat(terms, 0));
      },
      40, pick, kComposedTolerance));

  {
    const MaskedExample& ex = *f.batch[0];
    SerializedInput s = serialize_input(m.vocab, ex.equation_symbols, {}, ex.mwp_tokens, 64);
    const std::vector<int> prompt(s.ids.begin(), s.ids.begin() + static_cast<std::ptrdiff_t>(ex.equation_symbols.size() + 3));
    Rng wr = Rng::stream(seed, "gradcheck.rollout");
    const Matrix r = random_matrix(4, m.vocab.size(), wr);
    rep.rows.push_back(check_gradient(
        "rollout_relaxed", tensors(m.generator.params("gen")),
        [&](Tape& t) {
          Rng g = gumbel;
          RelaxedRollout ro = rollout_relaxed(t, m.generator, prompt, 1.0, 4, Relaxation::gumbel_softmax, g);
          return weighted(t, ro.rows, r.topRows(static_cast<Eigen::Index>(ro.rows.rows())));
        },
        40, pick, kComposedTolerance));
  }

  auto stage2 = [&](Tape& t) {
    Rng k = keywords;
    Rng g = gumbel;
    return stage2_objective(t, m, f.batch, k, g).total;
  };
  rep.rows.push_back(check_gradient("L_eq", tensors(m.consistency_parser.params("cons")), stage2, 40, pick,
                                    kComposedTolerance));
  std::vector<Tensor> both = tensors(m.generator.params("gen"));
  for (const Tensor& t : tensors(m.consistency_parser.params("cons"))) both.push_back(t);
  rep.rows.push_back(check_gradient("stage2_total", both, stage2, 60, pick, kComposedTolerance));
}

}  // namespace

GradcheckReport run_gradcheck(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport rep;
  Rng rng = Rng::stream(seed, "gradcheck");
  primitive_rows(rep, rng);
  composed_rows(rep, seed, rng);
  rep.pass = true;
  for (const auto& r : rep.rows) {
    rep.total_samples += r.samples;
    rep.pass = rep.pass && r.pass;
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace mwpgen
