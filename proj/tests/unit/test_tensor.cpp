#include <cmath>
#include <limits>

#include "doctest.h"
#include "error.hpp"
#include "fd_oracle.hpp"
#include "rng.hpp"
#include "tensor.hpp"

using namespace mwpgen;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Weighted sum so every output entry carries a distinct upstream gradient.
Tensor probe(Tape& t, const Tensor& y) {
  Matrix w(static_cast<Eigen::Index>(y.rows()), static_cast<Eigen::Index>(y.cols()));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
  return t.sum(t.mul(y, Tensor::constant(w)));
}

}  // namespace

TEST_CASE("forward values") {
  Tape t;
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  Matrix b(2, 2);
  b << 5, 6, 7, 8;
  const Tensor A = Tensor::constant(a), B = Tensor::constant(b);
  Matrix ab(2, 2);
  ab << 19, 22, 43, 50;
  CHECK(t.matmul(A, B).value() == ab);
  CHECK(t.matmul_nt(A, B).value() == a * b.transpose());
  CHECK(t.transpose(A).value() == a.transpose());
  CHECK(t.sum(A).item() == 10);
  CHECK(t.mean(A).item() == 2.5);
  CHECK(t.sigmoid(Tensor::scalar(0)).item() == 0.5);

  const std::vector<int> targets = {2};
  CHECK(t.cross_entropy_from_logits(Tensor::constant(Matrix::Zero(1, 4)), targets).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const std::vector<int> none = {-1};
  CHECK(t.cross_entropy_from_logits(Tensor::constant(Matrix::Zero(1, 4)), none).item() == 0.0);

  Matrix big(1, 3);
  big << 1000, 1000, 1000;
  const Tensor s = t.softmax_rows(Tensor::constant(big));
  for (int j = 0; j < 3; ++j) CHECK(s.value()(0, j) == doctest::Approx(1.0 / 3));
}

TEST_CASE("sigmoid derivative at zero") {
  Tensor x = Tensor::parameter(Matrix::Zero(1, 1));
  Tape t;
  t.backward(t.sigmoid(x));
  CHECK(x.grad()(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("causal softmax gives exact zeros above the diagonal") {
  Rng rng(3);
  Tape t;
  const Tensor s = t.softmax_rows(Tensor::constant(random_matrix(5, 5, rng)), 0.7, true);
  for (Eigen::Index i = 0; i < 5; ++i) {
    CHECK(s.value().row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    for (Eigen::Index j = i + 1; j < 5; ++j) CHECK(s.value()(i, j) == 0.0);
  }
  const Tensor off = t.softmax_rows(Tensor::constant(random_matrix(2, 5, rng)), 1.0, true, 3);
  CHECK(off.value()(0, 4) == 0.0);
  CHECK(off.value()(1, 4) > 0.0);
}

TEST_CASE("reverse-mode gradients match central differences") {
  Rng rng(7);
  Tensor a = Tensor::parameter(random_matrix(3, 4, rng));
  Tensor b = Tensor::parameter(random_matrix(4, 3, rng));
  Tensor c = Tensor::parameter(random_matrix(3, 4, rng));
  Tensor row = Tensor::parameter(random_matrix(1, 4, rng));
  Tensor gate = Tensor::parameter(random_matrix(3, 1, rng));
  Matrix pos = random_matrix(3, 4, rng).cwiseAbs().array() + 0.5;
  Tensor p = Tensor::parameter(pos);
  Tensor g = Tensor::parameter(random_matrix(1, 4, rng));
  Tensor bias = Tensor::parameter(random_matrix(1, 4, rng));
  const double tol = 1e-6;

  CHECK(max_fd_error(a, [&](Tape& t) { return probe(t, t.matmul(a, b)); }) < tol);
  CHECK(max_fd_error(b, [&](Tape& t) { return probe(t, t.matmul(a, b)); }) < tol);
  CHECK(max_fd_error(c, [&](Tape& t) { return probe(t, t.matmul_nt(a, c)); }) < tol);
  CHECK(max_fd_error(a, [&](Tape& t) { return probe(t, t.mul(a, c)); }) < tol);
  CHECK(max_fd_error(row, [&](Tape& t) { return probe(t, t.add_row(a, row)); }) < tol);
  CHECK(max_fd_error(gate, [&](Tape& t) { return probe(t, t.scale_rows(a, gate)); }) < tol);
  CHECK(max_fd_error(a, [&](Tape& t) { return probe(t, t.softmax_rows(a, 0.8, true, 1)); }) < tol);
  CHECK(max_fd_error(a, [&](Tape& t) { return probe(t, t.gelu(a)); }) < tol);
  CHECK(max_fd_error(a, [&](Tape& t) { return probe(t, t.exp(t.scalar_mul(a, 0.5))); }) < tol);
  CHECK(max_fd_error(p, [&](Tape& t) { return probe(t, t.log(p)); }) < tol);
  CHECK(max_fd_error(a, [&](Tape& t) { return probe(t, t.layer_norm(a, g, bias)); }) < 1e-5);
  CHECK(max_fd_error(g, [&](Tape& t) { return probe(t, t.layer_norm(a, g, bias)); }) < tol);
  CHECK(max_fd_error(a, [&](Tape& t) {
          const Tensor parts[] = {a, c};
          return probe(t, t.slice(t.concat(parts, 0), 0, 2, 3));
        }) < tol);
  CHECK(max_fd_error(a, [&](Tape& t) {
          const Tensor parts[] = {a, c};
          return probe(t, t.slice(t.concat(parts, 1), 1, 3, 3));
        }) < tol);
  const std::vector<int> ids = {2, 0, 2};
  CHECK(max_fd_error(a, [&](Tape& t) { return probe(t, t.embedding_gather(a, ids)); }) < tol);
  const std::vector<int> targets = {1, -1, 3};
  CHECK(max_fd_error(a, [&](Tape& t) { return t.sum(t.cross_entropy_from_logits(a, targets)); }) < tol);
}

TEST_CASE("backward accumulates across reuse and repeated calls") {
  Tensor x = Tensor::parameter(Matrix::Constant(1, 1, 3.0));
  {
    Tape t;
    t.backward(t.mul(x, x));
  }
  CHECK(x.grad()(0, 0) == doctest::Approx(6.0));
  {
    Tape t;
    t.backward(t.add(x, x));
  }
  CHECK(x.grad()(0, 0) == doctest::Approx(8.0));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("constants and non-recording tapes") {
  Tape t(false);
  const Tensor y = t.add(Tensor::parameter(Matrix::Ones(2, 2)), Tensor::constant(Matrix::Ones(2, 2)));
  CHECK(y.value()(1, 1) == 2.0);
  CHECK(t.size() == 0);
}

TEST_CASE("straight-through passes the gradient unchanged") {
  Tensor x = Tensor::parameter(Matrix::Constant(1, 2, 0.3));
  Tape t;
  const Tensor y = t.straight_through(x, Matrix::Ones(1, 2));
  CHECK(y.value()(0, 0) == 1.0);
  t.backward(t.sum(t.scalar_mul(y, 2.0)));
  CHECK(x.grad()(0, 1) == 2.0);
}

TEST_CASE("adam step") {
  Tensor p = Tensor::parameter(Matrix::Zero(1, 1));
  std::vector<Tensor> params = {p};
  AdamState state;
  state.init(params);
  {
    Tape t;
    t.backward(t.sum(p));
  }
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_step(params, state, cfg);
  // First bias-corrected step is -lr * g / (|g| + eps).
  CHECK(p.value()(0, 0) == doctest::Approx(-0.1).epsilon(1e-7));
  CHECK(state.step == 1);
}

TEST_CASE("adam refuses non-finite gradients") {
  Tensor p = Tensor::parameter(Matrix::Zero(1, 1));
  std::vector<Tensor> params = {p};
  AdamState state;
  state.init(params);
  {
    Tape t;
    t.backward(t.log(p));
  }
  try {
    adam_step(params, state, AdamConfig{});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numerical);
  }
  CHECK(p.value()(0, 0) == 0.0);
  CHECK(state.step == 0);
}

TEST_CASE("gradient clipping") {
  Tensor a = Tensor::parameter(Matrix::Zero(1, 2));
  std::vector<Tensor> params = {a};
  {
    Tape t;
    Matrix w(1, 2);
    w << 3, 4;
    t.backward(t.sum(t.mul(a, Tensor::constant(w))));
  }
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()(0, 0) == doctest::Approx(0.6));
  CHECK(a.grad()(0, 1) == doctest::Approx(0.8));
}

TEST_CASE("validate flags NaN") {
  Tensor x = Tensor::constant(Matrix::Constant(1, 1, std::numeric_limits<double>::quiet_NaN()));
  CHECK_THROWS_AS(x.validate("x"), Error);
}
