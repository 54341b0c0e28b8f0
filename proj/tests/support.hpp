#pragma once

// Shared tolerances and independent brute-force oracles for the test suites.
// The oracles deliberately avoid the library's op implementations: they are
// plain nested loops over the raw buffers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "olfsl/rng.hpp"
#include "olfsl/tensor.hpp"

namespace testsup {

inline constexpr double kTightTol = 1e-12;     // hand-checkable exact arithmetic
inline constexpr double kOracleTol = 1e-9;     // float64 oracle equivalence
inline constexpr double kGradTolPrimitive = 1e-6;
inline constexpr double kGradTolComposite = 1e-4;
inline constexpr double kFdStep = 1e-5;

using olfsl::Rng;
using olfsl::Shape;
using olfsl::Tensor;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return a.shape == b.shape ? m : std::numeric_limits<double>::infinity();
}

// Direct definition of a zero-padded cross-correlation, one output cell at a
// time by full window scan.
inline Tensor<double> conv2d_oracle(const Tensor<double>& x, const Tensor<double>& k, int stride,
                                    int padding) {
  const int H = x.shape[0], W = x.shape[1], Cin = x.shape[2];
  const int K = k.shape[0], Cout = k.shape[3];
  const int Ho = (H + 2 * padding - K) / stride + 1;
  const int Wo = (W + 2 * padding - K) / stride + 1;
  Tensor<double> y = Tensor<double>::zeros({Ho, Wo, Cout});
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox)
      for (int co = 0; co < Cout; ++co) {
        double acc = 0.0;
        for (int ky = 0; ky < K; ++ky)
          for (int kx = 0; kx < K; ++kx)
            for (int ci = 0; ci < Cin; ++ci) {
              const int iy = oy * stride + ky - padding;
              const int ix = ox * stride + kx - padding;
              const double xv = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x.at(iy, ix, ci) : 0.0;
              acc += xv * k.at(ky, kx, ci, co);
            }
        y.at(oy, ox, co) = acc;
      }
  return y;
}

inline Tensor<double> max_pool2d_oracle(const Tensor<double>& x, int k, int stride) {
  const int H = x.shape[0], W = x.shape[1], C = x.shape[2];
  const int Ho = (H - k) / stride + 1;
  const int Wo = (W - k) / stride + 1;
  Tensor<double> y = Tensor<double>::zeros({Ho, Wo, C});
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox)
      for (int c = 0; c < C; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        for (int wy = 0; wy < k; ++wy)
          for (int wx = 0; wx < k; ++wx) best = std::max(best, x.at(oy * stride + wy, ox * stride + wx, c));
        y.at(oy, ox, c) = best;
      }
  return y;
}

inline Tensor<double> avg_pool2d_oracle(const Tensor<double>& x, int k, int stride) {
  const int H = x.shape[0], W = x.shape[1], C = x.shape[2];
  const int Ho = (H - k) / stride + 1;
  const int Wo = (W - k) / stride + 1;
  Tensor<double> y = Tensor<double>::zeros({Ho, Wo, C});
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int wy = 0; wy < k; ++wy)
          for (int wx = 0; wx < k; ++wx) acc += x.at(oy * stride + wy, ox * stride + wx, c);
        y.at(oy, ox, c) = acc / (k * k);
      }
  return y;
}

// y_j = sum_i x_i W_ij + b_j via explicit dot products.
inline Tensor<double> dense_oracle(const Tensor<double>& x, const Tensor<double>& w,
                                   const Tensor<double>& b) {
  const int n = w.shape[0], m = w.shape[1];
  Tensor<double> y = Tensor<double>::zeros({m});
  for (int j = 0; j < m; ++j) {
    double acc = b.at(j);
    for (int i = 0; i < n; ++i) acc += x.at(i) * w.at(i, j);
    y.at(j) = acc;
  }
  return y;
}

inline double bce_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  double acc = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    acc += labels[i] == 1 ? std::log(scores[i]) : std::log(1.0 - scores[i]);
  }
  return -acc / static_cast<double>(scores.size());
}

inline std::pair<double, double> ci_oracle(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, 1.96 * sd / std::sqrt(n)};
}

// Central finite difference of f w.r.t. one element of `t`.
template <typename F>
double fd_scalar(Tensor<double>& t, std::size_t index, F&& f, double step = kFdStep) {
  const double saved = t.data[index];
  t.data[index] = saved + step;
  const double fp = f();
  t.data[index] = saved - step;
  const double fm = f();
  t.data[index] = saved;
  return (fp - fm) / (2.0 * step);
}

inline double rel_err(double a, double b, double guard = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), guard});
}

}  // namespace testsup
