#include "mct/random.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace mct {

double Rng::normal() {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) {
  // Reject the tail so the modulo is unbiased.
  const std::uint64_t bound = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t draw;
  do {
    draw = engine_();
  } while (draw >= limit);
  return static_cast<std::size_t>(draw % bound);
}

Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double r = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> data(fan_in * fan_out);
  for (double& v : data) v = rng.uniform(-r, r);
  return Tensor::matrix(fan_in, fan_out, std::move(data));
}

Tensor random_normal(Shape shape, Rng& rng, double stddev) {
  Tensor out(std::move(shape));
  for (double& v : out.mutable_data()) v = stddev * rng.normal();
  return out;
}

}  // namespace mct
