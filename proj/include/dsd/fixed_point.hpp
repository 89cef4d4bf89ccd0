#pragma once
// Saturating fixed-point arithmetic for the inference datapath.
// All rounding is half-away-from-zero; overflow always saturates, never wraps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace dsd {

struct QFormat {
  int total_bits = 10;
  int frac_bits = 7;
  bool is_signed = true;

  void validate() const {
    if (total_bits < 2 || total_bits > 32)
      throw std::invalid_argument("QFormat: total_bits out of range [2,32]: " + std::to_string(total_bits));
    if (frac_bits < 0 || frac_bits >= total_bits)
      throw std::invalid_argument("QFormat: frac_bits must be in [0,total_bits): " + std::to_string(frac_bits));
  }

  int64_t raw_min() const {
    return is_signed ? -(int64_t(1) << (total_bits - 1)) : 0;
  }
  int64_t raw_max() const {
    return is_signed ? (int64_t(1) << (total_bits - 1)) - 1
                     : (int64_t(1) << total_bits) - 1;
  }
  double lsb() const { return std::ldexp(1.0, -frac_bits); }

  bool operator==(const QFormat&) const = default;
};

// 10-bit signed, 7 fraction bits: the sample/activation format used on the wire.
inline constexpr QFormat kSampleFormat{10, 7, true};

struct FxValue {
  int32_t raw = 0;
  QFormat fmt{};

  double to_real() const { return std::ldexp(double(raw), -fmt.frac_bits); }
};

inline int64_t saturate_raw(int64_t v, const QFormat& fmt) {
  const int64_t lo = fmt.raw_min(), hi = fmt.raw_max();
  return v < lo ? lo : (v > hi ? hi : v);
}

// v / 2^shift, rounding half away from zero. shift >= 0.
inline int64_t round_shift_right(int64_t v, int shift) {
  if (shift <= 0) return v;
  const int64_t d = int64_t(1) << shift;
  const int64_t half = d >> 1;
  return v >= 0 ? (v + half) >> shift : -((-v + half) >> shift);
}

inline __int128 round_shift_right_128(__int128 v, int shift) {
  if (shift <= 0) return v;
  const __int128 d = __int128(1) << shift;
  const __int128 half = d >> 1;
  if (v >= 0) return (v + half) / d;
  return -((-v + half) / d);
}

inline FxValue quantize(double x, const QFormat& fmt) {
  fmt.validate();
  if (std::isnan(x)) throw std::invalid_argument("quantize: NaN input");
  double scaled = std::ldexp(x, fmt.frac_bits);
  int64_t raw;
  if (scaled >= double(fmt.raw_max()))
    raw = fmt.raw_max();
  else if (scaled <= double(fmt.raw_min()))
    raw = fmt.raw_min();
  else
    raw = std::llround(scaled);  // llround: half away from zero
  return FxValue{int32_t(saturate_raw(raw, fmt)), fmt};
}

inline double dequantize(const FxValue& v) { return v.to_real(); }

// ps + m1*m2 computed exactly, then rounded/saturated once into ps's format.
inline FxValue mac(const FxValue& m1, const FxValue& m2, const FxValue& ps) {
  const int fp = m1.fmt.frac_bits + m2.fmt.frac_bits;
  const int fa = ps.fmt.frac_bits;
  const __int128 prod = __int128(m1.raw) * __int128(m2.raw);
  __int128 sum;
  if (fp <= fa) {
    // product aligns up to the accumulator exactly, no rounding needed
    sum = __int128(ps.raw) + (prod << (fa - fp));
  } else {
    sum = (__int128(ps.raw) << (fp - fa)) + prod;
    sum = round_shift_right_128(sum, fp - fa);
  }
  __int128 lo = ps.fmt.raw_min(), hi = ps.fmt.raw_max();
  if (sum < lo) sum = lo;
  if (sum > hi) sum = hi;
  return FxValue{int32_t(int64_t(sum)), ps.fmt};
}

// --- helpers shared by the quantized forward pass and the pipeline blocks ---

inline int32_t sat_add_acc(int32_t acc, int64_t addend, const QFormat& accfmt) {
  return int32_t(saturate_raw(int64_t(acc) + addend, accfmt));
}

// Re-express a raw value at from_frac in to fmt (frac = fmt.frac_bits), rounding/saturating.
inline int32_t rescale_raw(int64_t v, int from_frac, const QFormat& fmt) {
  int64_t r;
  if (from_frac >= fmt.frac_bits) {
    r = round_shift_right(v, from_frac - fmt.frac_bits);
  } else {
    __int128 w = __int128(v) << (fmt.frac_bits - from_frac);
    __int128 lo = fmt.raw_min(), hi = fmt.raw_max();
    if (w < lo) w = lo;
    if (w > hi) w = hi;
    return int32_t(int64_t(w));
  }
  return int32_t(saturate_raw(r, fmt));
}

// Per-tensor power-of-two scaling for stored parameters. Unlike QFormat the
// exponent may exceed the bit width (tensors full of tiny values) or go
// negative (values above the integer range), so it gets its own type.
struct TensorQuant {
  int bits = 8;       // storage width, 2..8
  int frac_exp = 0;   // value = raw * 2^-frac_exp

  void validate() const {
    if (bits < 2 || bits > 8)
      throw std::invalid_argument("TensorQuant: bits out of range [2,8]: " + std::to_string(bits));
  }
  int64_t raw_min() const { return -(int64_t(1) << (bits - 1)); }
  int64_t raw_max() const { return (int64_t(1) << (bits - 1)) - 1; }
};

// Accumulator fraction = weight frac_exp + activation frac_bits must stay a
// legal 32-bit QFormat, so the exponent is clamped to that window.
inline constexpr int kMinWeightFracExp = -7;
inline constexpr int kMaxWeightFracExp = 24;

// Largest power-of-two scale under which max|values| still fits in `bits`.
// All-zero tensors get scale 1 (frac_exp 0).
template <class Range>
inline TensorQuant choose_tensor_quant(const Range& values, int bits) {
  TensorQuant tq{bits, 0};
  tq.validate();
  double maxabs = 0.0;
  for (double v : values) maxabs = std::max(maxabs, std::fabs(v));
  if (maxabs == 0.0) return tq;
  int f = int(std::floor(std::log2(double(tq.raw_max()) / maxabs)));
  // guard against log2 rounding: back off while a value would saturate
  auto fits = [&](int fe) {
    double lim = std::ldexp(double(tq.raw_max()) + 0.5, -fe);
    return maxabs < lim;
  };
  while (!fits(f)) --f;
  while (fits(f + 1)) ++f;
  tq.frac_exp = std::clamp(f, kMinWeightFracExp, kMaxWeightFracExp);
  return tq;
}

inline int32_t quantize_to(double x, const TensorQuant& tq) {
  double scaled = std::ldexp(x, tq.frac_exp);
  int64_t raw;
  if (scaled >= double(tq.raw_max()))
    raw = tq.raw_max();
  else if (scaled <= double(tq.raw_min()))
    raw = tq.raw_min();
  else
    raw = std::llround(scaled);
  if (raw < tq.raw_min()) raw = tq.raw_min();
  if (raw > tq.raw_max()) raw = tq.raw_max();
  return int32_t(raw);
}

inline double dequantize_from(int32_t raw, const TensorQuant& tq) {
  return std::ldexp(double(raw), -tq.frac_exp);
}

}  // namespace dsd
