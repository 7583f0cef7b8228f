#pragma once

// Reference computations used to check the library. They share no code with
// the implementations they verify beyond the Graph/Tensor API being tested.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "levasa/diffcore.hpp"

namespace oracle {

// Scalar function of a flat parameter vector.
using ScalarFn = std::function<double(const std::vector<double>&)>;

inline std::vector<double> central_difference(const ScalarFn& f, std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// |a - n| / max(|a|, |n|, floor); the floor stops near-zero gradients from
// turning round-off into large relative errors.
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& n, double floor = 1e-6) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - n[i]) / std::max({std::abs(a[i]), std::abs(n[i]), floor}));
  return worst;
}

// KL(N(mu, diag e^lv) || N(0, I)) by sampling from q with std::mt19937_64.
inline double monte_carlo_kl(const std::vector<double>& mu, const std::vector<double>& lv, std::size_t n,
                             unsigned seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  double acc = 0;
  for (std::size_t s = 0; s < n; ++s) {
    double log_q = 0, log_p = 0;
    for (std::size_t d = 0; d < mu.size(); ++d) {
      const double sd = std::exp(0.5 * lv[d]);
      const double e = nd(gen);
      const double z = mu[d] + sd * e;
      log_q += -0.5 * e * e - std::log(sd);
      log_p += -0.5 * z * z;
    }
    acc += log_q - log_p;
  }
  return acc / static_cast<double>(n);
}

}  // namespace oracle
