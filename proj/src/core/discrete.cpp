#include "discrete.hpp"

#include <algorithm>
#include <cmath>

#include "error.hpp"

namespace mwpgen {

double gumbel_from_uniform(double u) {
  u = std::clamp(u, kUniformClamp, 1.0 - kUniformClamp);
  return -std::log(-std::log(u));
}

Matrix gumbel_noise(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix g(rows, cols);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = gumbel_from_uniform(rng.uniform_open());
  return g;
}

std::vector<int> gumbel_max(const Matrix& logits, const Matrix& noise) {
  if (logits.rows() != noise.rows() || logits.cols() != noise.cols()) {
    fail_usage("gumbel_max: logits and noise shapes differ");
  }
  std::vector<int> idx(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    double bv = logits(r, 0) + noise(r, 0);
    for (Eigen::Index c = 1; c < logits.cols(); ++c) {
      const double v = logits(r, c) + noise(r, c);
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    idx[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return idx;
}

Matrix one_hot(const std::vector<int>& index, std::size_t width) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(index.size()), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < index.size(); ++i) m(static_cast<Eigen::Index>(i), index[i]) = 1.0;
  return m;
}

Tensor gumbel_softmax(Tape& tape, const Tensor& logits, const Matrix& noise, double tau) {
  if (!(tau > 0.0)) fail_usage("gumbel_softmax: temperature must be positive");
  if (logits.value().rows() != noise.rows() || logits.value().cols() != noise.cols()) {
    fail_usage("gumbel_softmax: logits and noise shapes differ");
  }
  Tensor perturbed = tape.add(logits, Tensor::constant(noise));
  return tape.softmax_rows(perturbed, 1.0 / tau);
}

Tensor st_bernoulli(Tape& tape, const Tensor& q, Rng& rng) {
  const Matrix& p = q.value();
  if (!((p.array() >= 0.0).all() && (p.array() <= 1.0).all())) {
    fail_usage("st_bernoulli: probabilities must lie in [0, 1]");
  }
  Matrix sample(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    sample.data()[i] = rng.uniform() < p.data()[i] ? 1.0 : 0.0;
  }
  return tape.straight_through(q, std::move(sample));
}

namespace {
void check_rho(double rho) {
  if (!(rho > 0.0 && rho < 1.0)) fail_usage("bernoulli_kl: prior rho must lie in (0, 1)");
}
double xlogy_ratio(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(x / y); }
}  // namespace

double bernoulli_kl(double q, double rho) {
  check_rho(rho);
  if (!(q >= 0.0 && q <= 1.0)) fail_usage("bernoulli_kl: q must lie in [0, 1]");
  return xlogy_ratio(q, rho) + xlogy_ratio(1.0 - q, 1.0 - rho);
}

Tensor bernoulli_kl(Tape& tape, const Tensor& q, double rho) {
  check_rho(rho);
  const Matrix& p = q.value();
  Matrix value(p.rows(), p.cols()), deriv(p.rows(), p.cols());
  const double logit_rho = std::log(rho / (1.0 - rho));
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double v = p.data()[i];
    value.data()[i] = bernoulli_kl(v, rho);
    // d/dq = logit(q) - logit(rho); clamped where it diverges at 0 and 1.
    const double c = std::clamp(v, 1e-12, 1.0 - 1e-12);
    deriv.data()[i] = std::log(c / (1.0 - c)) - logit_rho;
  }
  return tape.elementwise(q, std::move(value), std::move(deriv));
}

double TemperatureSchedule::at(long step) const {
  if (!(tau0 > 0.0)) fail_usage("temperature must be positive");
  if (mode == Mode::constant) return tau0;
  return std::max(floor, tau0 * std::exp(-rate * static_cast<double>(step)));
}

}  // namespace mwpgen
