#pragma once

#include <cstddef>

#include "rng.hpp"
#include "tensor.hpp"

namespace mwpgen {

inline constexpr double kUniformClamp = 1e-12;

// -log(-log u) with u clamped to [1e-12, 1 - 1e-12].
double gumbel_from_uniform(double u);
Matrix gumbel_noise(std::size_t rows, std::size_t cols, Rng& rng);

// Per-row argmax of logits + noise; ties go to the lowest index.
std::vector<int> gumbel_max(const Matrix& logits, const Matrix& noise);
Matrix one_hot(const std::vector<int>& index, std::size_t width);

// softmax((logits + noise) / tau), differentiable with respect to logits.
Tensor gumbel_softmax(Tape& tape, const Tensor& logits, const Matrix& noise, double tau);

// Forward: independent Bernoulli draws from q. Backward: identity onto q.
Tensor st_bernoulli(Tape& tape, const Tensor& q, Rng& rng);

// KL(Bernoulli(q) || Bernoulli(rho)) with 0 ln 0 := 0.
double bernoulli_kl(double q, double rho);
// Elementwise KL, differentiable in q.
Tensor bernoulli_kl(Tape& tape, const Tensor& q, double rho);

struct TemperatureSchedule {
  enum class Mode { constant, exponential };
  double tau0 = 1.0;
  Mode mode = Mode::constant;
  double rate = 0.0;  // per step, exponential mode only
  double floor = 0.05;

  double at(long step) const;
};

}  // namespace mwpgen
