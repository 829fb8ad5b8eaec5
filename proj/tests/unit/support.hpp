#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "medpeft/nn.hpp"
#include "medpeft/tensor.hpp"

namespace testutil {

template <typename T>
medpeft::Tensor<T> random_tensor(std::vector<int64_t> shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  medpeft::Tensor<T> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
double dot(const medpeft::Tensor<T>& a, const medpeft::Tensor<T>& b) {
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename T>
double max_abs_diff(const medpeft::Tensor<T>& a, const medpeft::Tensor<T>& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
  return m;
}

struct FdResult {
  double worst_rel = 0.0;
  int checked = 0;
};

/// Central differences of `loss` against the analytic gradient already stored
/// in the parameters, on `count` randomly chosen scalar entries.
inline FdResult finite_difference_check(medpeft::nn::ParameterList<double>& params, const std::function<double()>& loss,
                                        int count, uint64_t seed, double h = 1e-6) {
  std::mt19937_64 rng(seed);
  FdResult r;
  std::uniform_int_distribution<size_t> pick_tensor(0, params.size() - 1);
  for (int n = 0; n < count; ++n) {
    auto& p = *params[pick_tensor(rng)].param;
    std::uniform_int_distribution<int64_t> pick(0, p.value.size() - 1);
    const int64_t i = pick(rng);
    const double saved = p.value[i];
    p.value[i] = saved + h;
    const double up = loss();
    p.value[i] = saved - h;
    const double dn = loss();
    p.value[i] = saved;
    const double numeric = (up - dn) / (2 * h);
    const double analytic = p.grad[i];
    const double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-3});
    r.worst_rel = std::max(r.worst_rel, std::fabs(numeric - analytic) / denom);
    ++r.checked;
  }
  return r;
}

}  // namespace testutil
