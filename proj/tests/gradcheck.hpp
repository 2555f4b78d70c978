#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "robustit/tensor.hpp"

namespace rit::testing {

struct GradReport {
  double rel_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  std::size_t checked = 0;
};

// Compares backward() against central differences on `coords` entries per leaf
// (all entries when coords == 0). f must rebuild its graph from the leaves.
inline GradReport gradcheck(const std::function<ad::Tensor()>& f, std::vector<ad::Tensor> leaves, double eps = 1e-5,
                            std::size_t coords = 0, std::uint64_t seed = 1) {
  for (auto& l : leaves) l.clear_grad();
  ad::backward(f());
  std::mt19937_64 rng(seed);
  double num = 0, den_a = 0, den_n = 0;
  GradReport rep;
  for (auto& l : leaves) {
    std::vector<double> analytic = l.has_grad() ? l.grad() : std::vector<double>(l.numel(), 0.0);
    std::vector<std::size_t> idx(l.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (coords && coords < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(coords);
    }
    auto& d = l.mutable_data();
    for (auto i : idx) {
      const double keep = d[i];
      d[i] = keep + eps;
      const double up = f().item();
      d[i] = keep - eps;
      const double dn = f().item();
      d[i] = keep;
      const double n = (up - dn) / (2 * eps);
      num += (analytic[i] - n) * (analytic[i] - n);
      den_a += analytic[i] * analytic[i];
      den_n += n * n;
      ++rep.checked;
    }
  }
  const double den = std::max({std::sqrt(den_a), std::sqrt(den_n), 1e-300});
  rep.rel_error = std::sqrt(num) / den;
  return rep;
}

inline ad::Tensor random_tensor(ad::Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1, bool grad = true,
                                double avoid_zero = 0) {
  std::uniform_real_distribution<double> U(lo, hi);
  std::vector<double> v(ad::numel_of(s));
  for (auto& x : v) {
    do x = U(rng);
    while (std::fabs(x) < avoid_zero);
  }
  return ad::Tensor::from(std::move(s), std::move(v), grad);
}

}  // namespace rit::testing
