#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <string>

#include "qtrain/error.hpp"

namespace qtrain {

/// Closed integer interval used by the worst-case range analysis.
struct Interval {
  std::int64_t lo = 0;
  std::int64_t hi = 0;

  std::int64_t max_abs() const { return std::max(std::llabs(lo), std::llabs(hi)); }
  bool contains(std::int64_t v) const { return lo <= v && v <= hi; }
  bool contains(const Interval& o) const { return lo <= o.lo && o.hi <= hi; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

inline Interval hull(const Interval& a, const Interval& b) {
  return {std::min(a.lo, b.lo), std::max(a.hi, b.hi)};
}
inline Interval operator+(const Interval& a, const Interval& b) { return {a.lo + b.lo, a.hi + b.hi}; }
inline Interval operator-(const Interval& a, const Interval& b) { return {a.lo - b.hi, a.hi - b.lo}; }
inline Interval operator*(const Interval& a, const Interval& b) {
  const std::int64_t c[4] = {a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi};
  return {*std::min_element(c, c + 4), *std::max_element(c, c + 4)};
}
/// Sum of `count` independent values drawn from `a`.
inline Interval scaled(const Interval& a, std::int64_t count) { return {a.lo * count, a.hi * count}; }

/// Signed bit-width needed to hold every value of magnitude <= max_abs:
/// ceil(log2(max_abs + 1)) magnitude bits plus one sign bit.
inline int signed_bits(std::int64_t max_abs) {
  const auto m = static_cast<std::uint64_t>(max_abs);
  return static_cast<int>(std::bit_width(m)) + 1;
}
inline int signed_bits(const Interval& r) { return signed_bits(r.max_abs()); }

/// Wraps v into the two's-complement range of `bits` bits.
inline std::int64_t wrap_signed(std::int64_t v, int bits) {
  const std::uint64_t mask = bits >= 64 ? ~0ULL : ((1ULL << bits) - 1);
  std::uint64_t u = static_cast<std::uint64_t>(v) & mask;
  if (bits < 64 && (u >> (bits - 1)) & 1ULL) u |= ~mask;
  return static_cast<std::int64_t>(u);
}

inline bool fits_signed(std::int64_t v, int bits) {
  if (bits >= 64) return true;
  const std::int64_t half = std::int64_t{1} << (bits - 1);
  return -half <= v && v < half;
}

/// Table index of a signed value in a two's-complement domain of `bits` bits.
inline std::size_t table_index(std::int64_t v, int bits) {
  return static_cast<std::size_t>(static_cast<std::uint64_t>(v) & ((1ULL << bits) - 1));
}
inline std::int64_t index_value(std::size_t index, int bits) {
  return wrap_signed(static_cast<std::int64_t>(index), bits);
}

/// f_sq(x) = floor(x^2 / 4), the table behind the product identity
/// a*b = f_sq(a + b) - f_sq(a - b).
inline std::int64_t floor_square_quarter(std::int64_t x) { return (x * x) / 4; }

/// Bound on every partial sum of an accumulation of `k` terms
/// f_sq(a + b) - f_sq(a - b), evaluated term by term, for a in `a`, b in `b`.
inline Interval product_sum_bound(const Interval& a, const Interval& b, std::int64_t k) {
  const Interval sum = a + b, diff = a - b;
  return scaled(Interval{-floor_square_quarter(diff.max_abs()), floor_square_quarter(sum.max_abs())}, k);
}

/// Width of the operands a + b and a - b fed to the f_sq lookup.
inline int product_pbs_bits(const Interval& a, const Interval& b) { return signed_bits(hull(a + b, a - b)); }

/// How the least-significant bits of an accumulator are dropped before a PBS.
/// Truncate subtracts the low bits as-is; Nearest first adds half a step.
enum class RoundingMode { Truncate = 0, Nearest = 1 };

inline std::string to_string(RoundingMode m) { return m == RoundingMode::Truncate ? "truncate" : "nearest"; }
inline RoundingMode rounding_from_string(const std::string& s) {
  if (s == "truncate") return RoundingMode::Truncate;
  if (s == "nearest") return RoundingMode::Nearest;
  throw Error("unknown rounding mode '" + s + "'");
}

inline std::int64_t rounding_offset(int n_r, RoundingMode mode) {
  return (mode == RoundingMode::Nearest && n_r > 0) ? (std::int64_t{1} << (n_r - 1)) : 0;
}

/// Integer result of removing n_r low bits: floor((v + offset) / 2^n_r).
inline std::int64_t remove_low_bits(std::int64_t v, int n_r, RoundingMode mode) {
  const std::int64_t x = v + rounding_offset(n_r, mode);
  return x >> n_r;  // arithmetic shift is floor division
}

/// Interval of remove_low_bits over every value of r.
inline Interval remove_low_bits(const Interval& r, int n_r, RoundingMode mode) {
  return {remove_low_bits(r.lo, n_r, mode), remove_low_bits(r.hi, n_r, mode)};
}

/// Accumulator value represented by a rounded code: the midpoint of the set
/// of accumulators that map onto it.
inline double reconstruct(std::int64_t rounded, int n_r, RoundingMode mode) {
  if (n_r == 0) return static_cast<double>(rounded);
  const double step = std::ldexp(1.0, n_r);
  const double base = static_cast<double>(rounded) * step;
  return mode == RoundingMode::Truncate ? base + (step - 1.0) / 2.0 : base - 0.5;
}

/// Bit-removal plan for one accumulator feeding a rounded PBS.
struct RoundingPlan {
  int n_r = 0;
  // Message width of the accumulator, including the rounding offset.
  int acc_bits = 0;
  // Width of the value reaching the table: acc_bits - n_r.
  int pbs_bits = 0;
  Interval rounded;
};

/// Keeps at least two bits (sign + one magnitude bit) after removal.
inline RoundingPlan plan_rounding(const Interval& acc, int wanted_n_r, RoundingMode mode) {
  RoundingPlan p;
  p.n_r = std::clamp(wanted_n_r, 0, std::max(0, signed_bits(acc) - 2));
  const std::int64_t off = rounding_offset(p.n_r, mode);
  p.acc_bits = signed_bits(hull(acc, Interval{acc.lo + off, acc.hi + off}));
  p.pbs_bits = p.acc_bits - p.n_r;
  p.rounded = remove_low_bits(acc, p.n_r, mode);
  return p;
}

}  // namespace qtrain
