#pragma once

#include <cstdint>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

namespace asha {

using ConfigId = std::int64_t;
using Resource = std::int64_t;

// Exact non-negative fraction, always kept in lowest terms.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  constexpr Rational() = default;
  constexpr Rational(std::int64_t n, std::int64_t d = 1) : num(n), den(d) {
    if (den == 0) throw std::invalid_argument("Rational: zero denominator");
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  friend constexpr Rational operator+(const Rational& a, const Rational& b) {
    const std::int64_t g = std::gcd(a.den, b.den);
    return Rational(a.num * (b.den / g) + b.num * (a.den / g), a.den / g * b.den);
  }
  friend constexpr bool operator==(const Rational&, const Rational&) = default;
  friend constexpr bool operator<(const Rational& a, const Rational& b) {
    return static_cast<__int128>(a.num) * b.den < static_cast<__int128>(b.num) * a.den;
  }
  friend constexpr bool operator<=(const Rational& a, const Rational& b) { return !(b < a); }

  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
  friend std::ostream& operator<<(std::ostream& os, const Rational& r) { return os << r.str(); }
};

/// Integer power with overflow detection.
inline std::int64_t checked_pow(std::int64_t base, std::int64_t exp) {
  std::int64_t out = 1;
  for (std::int64_t i = 0; i < exp; ++i) {
    if (__builtin_mul_overflow(out, base, &out)) {
      throw std::overflow_error("checked_pow: overflow");
    }
  }
  return out;
}

/// A result report whose (config, rung) is not outstanding.
class RejectedReport : public std::runtime_error {
 public:
  enum class Reason { kUnknown, kDuplicate };
  RejectedReport(Reason reason, const std::string& what)
      : std::runtime_error(what), reason_(reason) {}
  Reason reason() const { return reason_; }

 private:
  Reason reason_;
};

class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace asha
