#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace mwpgen {

struct GradcheckRow {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t samples = 0;
  double tolerance = 0.0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  std::size_t total_samples = 0;
  double seconds = 0.0;
  bool pass = false;

  double max_rel_error() const;
  nlohmann::ordered_json to_json() const;
};

inline constexpr double kFiniteDifferenceStep = 1e-4;

// |a - n| / max(|a|, |n|, 1e-6)
double relative_error(double analytic, double numeric);

// Central differences on up to max_samples entries of `params` (all entries
// when there are fewer). `loss` must replay the same random draws on every
// call.
GradcheckRow check_gradient(const std::string& name, std::vector<Tensor> params,
                            const std::function<Tensor(Tape&)>& loss, std::size_t max_samples, Rng& pick,
                            double tolerance);

// Every primitive plus the composed training objectives on a 2-layer d=16
// model with rollouts capped at 4 tokens.
GradcheckReport run_gradcheck(std::uint64_t seed = 0);

}  // namespace mwpgen
