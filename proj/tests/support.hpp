#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "dm1/diff.hpp"
#include "dm1/rng.hpp"
#include "dm1/tensor.hpp"

namespace dm1::testing {

inline Tensor random_tensor(std::size_t rows, std::size_t cols, SplitMix64& rng, double sd = 1.0) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = rng.normal(0.0, sd);
  return t;
}

// ||a - b||_inf / max(||b||_inf, floor).
inline double rel_err(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return num / std::max(den, floor);
}

inline std::vector<Tensor> shifted(std::span<const Tensor> x, std::span<const Tensor> d, double h) {
  std::vector<Tensor> out(x.begin(), x.end());
  for (std::size_t k = 0; k < out.size(); ++k)
    for (std::size_t i = 0; i < out[k].size(); ++i) out[k][i] += h * d[k][i];
  return out;
}

// Central difference of a tensor-valued f along `dirs`.
template <class F>
Tensor fd_directional(F&& f, std::span<const Tensor> x, std::span<const Tensor> dirs, double h = 1e-4) {
  const auto xp = shifted(x, dirs, h), xm = shifted(x, dirs, -h);
  const Tensor fp = f(std::span<const Tensor>(xp)), fm = f(std::span<const Tensor>(xm));
  return scale(sub(fp, fm), 0.5 / h);
}

// Central-difference gradient of a scalar f, coordinate by coordinate.
template <class F>
std::vector<Tensor> fd_grad(F&& f, std::span<const Tensor> x, double h = 1e-5) {
  std::vector<Tensor> g;
  std::vector<Tensor> work(x.begin(), x.end());
  for (std::size_t k = 0; k < work.size(); ++k) {
    g.push_back(Tensor::zeros_like(work[k]));
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double keep = work[k][i];
      work[k][i] = keep + h;
      const double fp = f(std::span<const Tensor>(work));
      work[k][i] = keep - h;
      const double fm = f(std::span<const Tensor>(work));
      work[k][i] = keep;
      g[k][i] = (fp - fm) / (2.0 * h);
    }
  }
  return g;
}

inline double rel_err(const std::vector<Tensor>& a, const std::vector<Tensor>& b, double floor = 1e-8) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].size(); ++i) {
      num = std::max(num, std::abs(a[k][i] - b[k][i]));
      den = std::max(den, std::abs(b[k][i]));
    }
  return num / std::max(den, floor);
}

}  // namespace dm1::testing
