#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mct/tensor.hpp"

namespace mct {

/// Scalar-valued function of one tensor. It must work both when `x` is
/// tracked (analytic pass) and when it is a plain value (numeric passes).
using ScalarFunction = std::function<Tensor(const Tensor& x)>;

/// Largest per-coordinate relative error between reverse-mode and central
/// finite-difference gradients: |a − n| / max(1e-8, |a| + |n|).
/// `eps` must lie in [1e-7, 1e-3].
double grad_check(const ScalarFunction& f, const Tensor& x, double eps, Fault fault = Fault::kNone);

inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckEps = 1e-4;

struct GradcheckResult {
  std::string family;
  double max_error = 0.0;
  std::string worst_slot;  // input or parameter with the largest error
  std::size_t coordinates = 0;
  bool passed() const { return max_error < kGradcheckTolerance; }
};

/// Checks every input and parameter of each differentiable operation
/// family at desk widths: matmul, softmax, layer_norm, relu,
/// attention_head, encoder_block, decoder_block, lstm_cell, elmo_mixer,
/// cross_entropy. The projection is sum(out ⊙ R) for a seeded random R.
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, Fault fault = Fault::kNone);

}  // namespace mct
