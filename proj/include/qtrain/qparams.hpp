#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "qtrain/error.hpp"
#include "qtrain/tensor.hpp"

namespace qtrain {

/// Symmetric signed uniform quantizer. The zero point is always 0 so that
/// sums of quantized values stay free of cross terms.
struct QParams {
  double scale = 1.0;
  int bits = 4;
  // Set when the calibration range was empty and the scale fell back to 1.
  bool degenerate = false;

  std::int64_t qmax() const { return (std::int64_t{1} << (bits - 1)) - 1; }
  double range_max() const { return scale * static_cast<double>(qmax()); }
  friend bool operator==(const QParams&, const QParams&) = default;
};

inline QParams make_qparams(double abs_max, int bits) {
  if (bits < 2 || bits > 16) throw QuantizationError("bit-width must be in [2, 16], got " + std::to_string(bits));
  if (!(abs_max >= 0.0) || !std::isfinite(abs_max)) throw QuantizationError("abs_max must be finite and non-negative");
  QParams q;
  q.bits = bits;
  if (abs_max == 0.0) {
    q.scale = 1.0;
    q.degenerate = true;
    return q;
  }
  q.scale = abs_max / static_cast<double>(q.qmax());
  return q;
}

/// Counts elements clipped by quantization.
struct SaturationCounter {
  std::uint64_t clipped = 0;
  std::uint64_t total = 0;

  double fraction() const { return total == 0 ? 0.0 : static_cast<double>(clipped) / static_cast<double>(total); }
  SaturationCounter& operator+=(const SaturationCounter& o) {
    clipped += o.clipped;
    total += o.total;
    return *this;
  }
};

/// Round-half-to-even of x / scale, clipped to the symmetric range.
inline std::int64_t quantize(double x, const QParams& q, SaturationCounter* sat = nullptr) {
  const double qmax = static_cast<double>(q.qmax());
  double v = std::nearbyint(x / q.scale);
  bool clipped = false;
  if (!(v <= qmax)) {  // also catches NaN
    v = std::isnan(v) ? 0.0 : qmax;
    clipped = true;
  } else if (v < -qmax) {
    v = -qmax;
    clipped = true;
  }
  if (sat) {
    ++sat->total;
    if (clipped) ++sat->clipped;
  }
  return static_cast<std::int64_t>(v);
}

inline double dequantize(std::int64_t code, const QParams& q) { return static_cast<double>(code) * q.scale; }

inline IntTensor quantize(const FloatTensor& t, const QParams& q, SaturationCounter* sat = nullptr) {
  IntTensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = quantize(t[i], q, sat);
  return out;
}

inline FloatTensor dequantize(const IntTensor& t, const QParams& q) {
  FloatTensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = dequantize(t[i], q);
  return out;
}

/// M = 2^-n_r * M0 with M0 in [0.5, 1).
struct ScaleDecomposition {
  double m = 0.0;
  double m0 = 0.0;
  int n_r = 0;
  // M >= 1: no bits can be removed and M0 carries the whole factor.
  bool no_rounding = false;
};

inline ScaleDecomposition decompose_scale(double m) {
  if (!(m > 0.0) || !std::isfinite(m)) throw QuantizationError("scale to decompose must be positive and finite");
  ScaleDecomposition d;
  d.m = m;
  if (m >= 1.0) {
    d.m0 = m;
    d.no_rounding = true;
    return d;
  }
  int exp = 0;
  d.m0 = std::frexp(m, &exp);  // m = m0 * 2^exp, m0 in [0.5, 1)
  d.n_r = -exp;
  return d;
}

}  // namespace qtrain
