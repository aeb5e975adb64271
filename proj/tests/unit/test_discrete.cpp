#include <cmath>

#include "discrete.hpp"
#include "doctest.h"
#include "fd_oracle.hpp"

using namespace mwpgen;

TEST_CASE("gumbel transform") {
  CHECK(gumbel_from_uniform(0.5) == doctest::Approx(-std::log(-std::log(0.5))).epsilon(1e-12));
  CHECK(gumbel_from_uniform(0.5) == doctest::Approx(0.3665129).epsilon(1e-6));
  CHECK(std::abs(gumbel_from_uniform(std::exp(-1.0))) < 1e-12);
  CHECK(std::isfinite(gumbel_from_uniform(0.0)));
  CHECK(std::isfinite(gumbel_from_uniform(1.0)));
}

TEST_CASE("gumbel noise has the standard moments") {
  Rng rng(5);
  const Matrix g = gumbel_noise(200, 100, rng);
  const double mean = g.mean();
  const double var = (g.array() - mean).square().mean();
  CHECK(std::abs(mean - 0.5772156649) < 0.02);
  CHECK(std::abs(var - M_PI * M_PI / 6) < 0.05);
}

TEST_CASE("gumbel-max samples the softmax distribution") {
  Matrix logits(1, 3);
  logits << std::log(0.2), std::log(0.3), std::log(0.5);
  Rng rng(9);
  int counts[3] = {0, 0, 0};
  const int n = 40000;
  for (int i = 0; i < n; ++i) ++counts[gumbel_max(logits, gumbel_noise(1, 3, rng))[0]];
  CHECK(std::abs(counts[0] / double(n) - 0.2) < 0.01);
  CHECK(std::abs(counts[2] / double(n) - 0.5) < 0.01);

  Matrix tie = Matrix::Zero(1, 3);
  CHECK(gumbel_max(tie, Matrix::Zero(1, 3))[0] == 0);
  const Matrix oh = one_hot({2, 0}, 3);
  CHECK(oh(0, 2) == 1.0);
  CHECK(oh.sum() == 2.0);
}

TEST_CASE("gumbel softmax") {
  Rng rng(2);
  Matrix l(2, 4);
  l << 1, 2, 0.5, -1, 0, 0, 3, 1;
  const Matrix noise = gumbel_noise(2, 4, rng);
  Tape t;
  const Tensor y = gumbel_softmax(t, Tensor::constant(l), noise, 0.7);
  for (Eigen::Index i = 0; i < 2; ++i) {
    CHECK(y.value().row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    Eigen::Index best, bi;
    y.value().row(i).maxCoeff(&best);
    (l + noise).row(i).maxCoeff(&bi);
    CHECK(best == bi);
  }
  // As tau shrinks the relaxed sample approaches the hard one-hot.
  const Tensor cold = gumbel_softmax(t, Tensor::constant(l), noise, 1e-3);
  CHECK((cold.value() - one_hot(gumbel_max(l, noise), 4)).cwiseAbs().maxCoeff() < 1e-9);

  Tensor p = Tensor::parameter(l);
  CHECK(max_fd_error(p, [&](Tape& tt) {
          Matrix w(2, 4);
          w << 1, 2, 3, 4, 5, 6, 7, 8;
          return tt.sum(tt.mul(gumbel_softmax(tt, p, noise, 0.7), Tensor::constant(w)));
        }) < 1e-6);
}

TEST_CASE("bernoulli KL") {
  CHECK(bernoulli_kl(0.5, 0.05) == doctest::Approx(0.5 * std::log(0.5 / 0.05) + 0.5 * std::log(0.5 / 0.95)));
  CHECK(bernoulli_kl(0.5, 0.05) == doctest::Approx(0.830366).epsilon(1e-6));
  CHECK(bernoulli_kl(1.0, 0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bernoulli_kl(0.0, 0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bernoulli_kl(0.05, 0.05) == 0.0);
  for (double q = 0.01; q < 1; q += 0.07) CHECK(bernoulli_kl(q, 0.3) >= 0.0);

  Matrix q(3, 1);
  q << 0.2, 0.5, 0.9;
  Tensor qp = Tensor::parameter(q);
  CHECK(max_fd_error(qp, [&](Tape& t) { return t.sum(bernoulli_kl(t, qp, 0.05)); }) < 1e-6);
  // d/dq KL = ln(q (1 - rho) / ((1 - q) rho)).
  CHECK(qp.grad()(1, 0) == doctest::Approx(std::log(0.95 / 0.05)).epsilon(1e-9));
}

TEST_CASE("straight-through bernoulli") {
  Matrix q(4, 1);
  q << 0.0, 1.0, 0.3, 0.7;
  Tensor qp = Tensor::parameter(q);
  Rng rng(1);
  Tape t;
  const Tensor c = st_bernoulli(t, qp, rng);
  CHECK(c.value()(0, 0) == 0.0);
  CHECK(c.value()(1, 0) == 1.0);
  for (int i = 0; i < 4; ++i) CHECK((c.value()(i, 0) == 0.0 || c.value()(i, 0) == 1.0));
  Matrix w(4, 1);
  w << 1, 2, 3, 4;
  t.backward(t.sum(t.mul(c, Tensor::constant(w))));
  CHECK(qp.grad() == w);

  double hits = 0;
  for (int i = 0; i < 20000; ++i) {
    Tape tt(false);
    hits += st_bernoulli(tt, Tensor::constant(Matrix::Constant(1, 1, 0.3)), rng).item();
  }
  CHECK(std::abs(hits / 20000 - 0.3) < 0.015);
}

TEST_CASE("temperature schedule") {
  TemperatureSchedule s;
  CHECK(s.at(0) == 1.0);
  CHECK(s.at(1000) == 1.0);
  s.mode = TemperatureSchedule::Mode::exponential;
  s.rate = 0.01;
  s.floor = 0.1;
  CHECK(s.at(10) == doctest::Approx(std::exp(-0.1)));
  CHECK(s.at(100000) == 0.1);
}
