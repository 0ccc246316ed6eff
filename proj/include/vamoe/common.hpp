#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace vamoe {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Error taxonomy. Every failure the library raises carries a kind so the
// CLI can emit one machine-parsable line and a stable nonzero exit code.
enum class ErrorKind {
  shape_mismatch,
  invalid_argument,
  domain_error,
  non_finite,
  index_out_of_range,
  bad_magic,
  version_mismatch,
  truncated_file,
  io_error,
  catalog_mismatch,
  config_error,
  nan_gradient,
  plan_mismatch,
  already_expanded,
  duplicate_group,
  unknown_group,
  unknown_channel,
  preservation_violation,
  cfl_violation,
};

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::domain_error: return "domain_error";
    case ErrorKind::non_finite: return "non_finite";
    case ErrorKind::index_out_of_range: return "index_out_of_range";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::version_mismatch: return "version_mismatch";
    case ErrorKind::truncated_file: return "truncated_file";
    case ErrorKind::io_error: return "io_error";
    case ErrorKind::catalog_mismatch: return "catalog_mismatch";
    case ErrorKind::config_error: return "config_error";
    case ErrorKind::nan_gradient: return "nan_gradient";
    case ErrorKind::plan_mismatch: return "plan_mismatch";
    case ErrorKind::already_expanded: return "already_expanded";
    case ErrorKind::duplicate_group: return "duplicate_group";
    case ErrorKind::unknown_group: return "unknown_group";
    case ErrorKind::unknown_channel: return "unknown_channel";
    case ErrorKind::preservation_violation: return "preservation_violation";
    case ErrorKind::cfl_violation: return "cfl_violation";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }
  std::string one_line() const {
    return std::string("error: kind=") + error_kind_name(kind_) + " msg=" + what();
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) {
  throw Error(k, msg);
}

inline void require(bool cond, ErrorKind k, const std::string& msg) {
  if (!cond) fail(k, msg);
}

// Deterministic RNG. mt19937_64 has a standard-pinned sequence; the
// transforms below avoid std distributions, whose output is
// implementation-defined.
class Rng {
 public:
  explicit Rng(u64 seed) : gen_(seed) {}

  u64 next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  i64 uniform_int(i64 n) {  // [0, n)
    return i64(next_u64() % u64(n));
  }

  // Box-Muller; caches the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Standard truncated-normal init: resample outside two sigma.
  double truncated_normal(double sigma) {
    double z = normal();
    while (std::abs(z) > 2.0) z = normal();
    return z * sigma;
  }

  // Derive an independent stream; SplitMix64 scramble of (seed, salt).
  static u64 derive(u64 seed, u64 salt) {
    u64 z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vamoe
