#pragma once

// Reference implementations used as test oracles. Written directly from the
// math, without calling into the library.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;
using IMat = std::vector<std::vector<std::int64_t>>;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Round half to even, without nearbyint.
inline double round_even(double v) {
  const double f = std::floor(v);
  const double diff = v - f;
  if (diff < 0.5) return f;
  if (diff > 0.5) return f + 1.0;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

inline std::int64_t quantize(double x, double scale, int bits) {
  const double qmax = std::pow(2.0, bits - 1) - 1.0;
  double v = round_even(x / scale);
  if (v > qmax) v = qmax;
  if (v < -qmax) v = -qmax;
  return static_cast<std::int64_t>(v);
}

// floor(v / 2^n) through floating point.
inline std::int64_t floor_shift(std::int64_t v, int n) {
  return static_cast<std::int64_t>(std::floor(static_cast<double>(v) / std::pow(2.0, n)));
}

inline IMat matmul(const IMat& a, const IMat& b) {
  IMat c(a.size(), std::vector<std::int64_t>(b[0].size(), 0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

/// One plain SGD step of logistic regression with the mean cross-entropy
/// gradient. X: B x d, y: B, w: d, b: scalar.
inline void logistic_step(const Mat& X, const std::vector<double>& y, std::vector<double>& w, double& b, double lr) {
  const std::size_t B = X.size(), d = w.size();
  std::vector<double> e(B);
  for (std::size_t i = 0; i < B; ++i) {
    double z = b;
    for (std::size_t k = 0; k < d; ++k) z += X[i][k] * w[k];
    e[i] = sigmoid(z) - y[i];
  }
  std::vector<double> gw(d, 0.0);
  double gb = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t k = 0; k < d; ++k) gw[k] += X[i][k] * e[i];
    gb += e[i];
  }
  for (std::size_t k = 0; k < d; ++k) w[k] -= lr * gw[k] / static_cast<double>(B);
  b -= lr * gb / static_cast<double>(B);
}

/// One SGD step of a one-hidden-layer network with sigmoid output.
/// W1: d x H, b1: H, W2: H, b2: scalar. relu selects the hidden activation.
inline void mlp_step(const Mat& X, const std::vector<double>& y, Mat& W1, std::vector<double>& b1, std::vector<double>& W2,
                     double& b2, double lr, bool relu) {
  const std::size_t B = X.size(), d = W1.size(), H = b1.size();
  Mat pre(B, std::vector<double>(H)), act(B, std::vector<double>(H));
  std::vector<double> e(B);
  for (std::size_t i = 0; i < B; ++i) {
    double z = b2;
    for (std::size_t h = 0; h < H; ++h) {
      double s = b1[h];
      for (std::size_t k = 0; k < d; ++k) s += X[i][k] * W1[k][h];
      pre[i][h] = s;
      act[i][h] = relu ? std::max(s, 0.0) : sigmoid(s);
      z += act[i][h] * W2[h];
    }
    e[i] = sigmoid(z) - y[i];
  }
  Mat gW1(d, std::vector<double>(H, 0.0));
  std::vector<double> gb1(H, 0.0), gW2(H, 0.0);
  double gb2 = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    gb2 += e[i];
    for (std::size_t h = 0; h < H; ++h) {
      gW2[h] += act[i][h] * e[i];
      const double deriv = relu ? (pre[i][h] > 0 ? 1.0 : 0.0) : act[i][h] * (1.0 - act[i][h]);
      const double delta = e[i] * W2[h] * deriv;
      gb1[h] += delta;
      for (std::size_t k = 0; k < d; ++k) gW1[k][h] += X[i][k] * delta;
    }
  }
  const double s = lr / static_cast<double>(B);
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t h = 0; h < H; ++h) W1[k][h] -= s * gW1[k][h];
  for (std::size_t h = 0; h < H; ++h) {
    b1[h] -= s * gb1[h];
    W2[h] -= s * gW2[h];
  }
  b2 -= s * gb2;
}

}  // namespace oracle
