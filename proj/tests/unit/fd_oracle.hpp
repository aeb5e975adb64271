#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "tensor.hpp"

// Central-difference check of every entry of `param` against the tape's
// reverse-mode gradient.
inline double max_fd_error(mwpgen::Tensor param, const std::function<mwpgen::Tensor(mwpgen::Tape&)>& loss,
                           double h = 1e-5) {
  using mwpgen::Tape;
  param.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  const mwpgen::Matrix analytic = param.grad();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < param.value().size(); ++i) {
    double& x = param.mutable_value().data()[i];
    const double x0 = x;
    x = x0 + h;
    double up;
    {
      Tape t(false);
      up = loss(t).item();
    }
    x = x0 - h;
    double down;
    {
      Tape t(false);
      down = loss(t).item();
    }
    x = x0;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.size() ? analytic.data()[i] : 0.0;
    worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4}));
  }
  return worst;
}
