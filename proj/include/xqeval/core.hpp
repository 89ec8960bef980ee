#pragma once

// Shared vocabulary types, error hierarchy, seeded RNG and digests.

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace xqeval {

inline constexpr const char* kVersion = "1.0.0";

enum class Label { human, machine };

inline const char* to_string(Label label) {
  return label == Label::human ? "human" : "machine";
}

inline Label opposite(Label label) {
  return label == Label::human ? Label::machine : Label::human;
}

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class EmptyCorpusError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  TransportError(const std::string& what, int attempts)
      : Error(what + " (after " + std::to_string(attempts) + " attempts)"),
        attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

inline Label parse_label(std::string_view text) {
  if (text == "human") return Label::human;
  if (text == "machine") return Label::machine;
  throw ArgumentError("unknown label '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Logging. Warnings go to stderr unless a test swaps the sink.

class Log {
 public:
  using Sink = void (*)(const std::string&);

  static void warn(const std::string& message) {
    std::lock_guard lock(mutex());
    if (sink()) {
      sink()(message);
    } else {
      std::cerr << "warning: " << message << '\n';
    }
  }
  static void set_sink(Sink s) {
    std::lock_guard lock(mutex());
    sink() = s;
  }

 private:
  static std::mutex& mutex() {
    static std::mutex m;
    return m;
  }
  static Sink& sink() {
    static Sink s = nullptr;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Seeds and RNG.
//
// All draws go through Rng so results do not depend on the standard library's
// distribution implementations.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based seed derivation: the seed for (experiment, doc, run) depends
/// only on those coordinates, so adding documents never shifts other seeds.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t index = 0, std::uint64_t run = 0) {
  std::uint64_t s = splitmix64(master ^ fnv1a(tag));
  s = splitmix64(s ^ splitmix64(index + 0x632be59bd9b4e019ULL));
  return splitmix64(s ^ splitmix64(run + 0x8cb92ba72f3d8dd7ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // xoshiro-style quality is unnecessary here; splitmix64 as a stream is
  // well distributed and trivially portable.
  std::uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1).
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer on [lo, hi], inclusive.
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
    const std::uint64_t range = hi - lo + 1;
    if (range == 0) return next();
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return lo + x % range;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_int(0, i - 1)]);
    }
  }

  /// k distinct indices drawn from [0, n), in draw order.
  std::vector<std::size_t> sample(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    k = std::min(k, n);
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(pool[i], pool[uniform_int(i, n - 1)]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Digests

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_Digest(data.data(), data.size(), digest, &length, EVP_sha256(), nullptr);
  std::ostringstream out;
  out << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < length; ++i) out << std::setw(2) << int(digest[i]);
  return out.str();
}

/// Builds a digest over several fields without ambiguity at field boundaries.
class Digest {
 public:
  Digest& add(std::string_view field) {
    buffer_ += std::to_string(field.size());
    buffer_ += ':';
    buffer_.append(field);
    return *this;
  }
  Digest& add(std::uint64_t value) { return add(std::to_string(value)); }
  std::string hex() const { return sha256_hex(buffer_); }

 private:
  std::string buffer_;
};

/// Round half-to-even at `digits` decimals (report precision).
inline double round_half_even(double value, int digits = 3) {
  if (!std::isfinite(value)) return value;
  const double scale = std::pow(10.0, digits);
  const double scaled = value * scale;
  double whole = std::floor(scaled);
  const double frac = scaled - whole;
  constexpr double kEps = 1e-9;
  if (frac > 0.5 + kEps) {
    whole += 1.0;
  } else if (std::abs(frac - 0.5) <= kEps) {
    if (std::fmod(whole, 2.0) != 0.0) whole += 1.0;
  }
  return whole / scale;
}

inline std::string format_fixed(double value, int digits = 3) {
  if (!std::isfinite(value)) return "NA";
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << round_half_even(value, digits);
  std::string s = out.str();
  if (s == "-0.000") s = "0.000";
  return s;
}

}  // namespace xqeval
