#pragma once

#include <Eigen/Core>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gmmkin {

using Point3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using PointCloud = std::vector<Point3>;

/// Tendon displacements in meters, one entry per tendon.
using TendonConfig = Eigen::VectorXd;

// Error hierarchy. Every failure the library reports derives from Error so
// callers (the CLI in particular) can map it to a nonzero exit status.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidInput : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};
struct UnsupportedOperation : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

struct ParseError : Error {
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset(offset) {}
  std::size_t offset;
};

struct ShapeError : ParseError {
  using ParseError::ParseError;
};

struct TrainingFailure : Error {
  TrainingFailure(const std::string& what, std::size_t epoch)
      : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch(epoch) {}
  std::size_t epoch;
};

struct PathNotFound : Error {
  PathNotFound(const std::string& side)
      : Error("no path found: disconnected side is " + side), side(side) {}
  std::string side;
};

inline bool all_finite(const Point3& p) { return p.allFinite(); }

// ---------------------------------------------------------------------------
// Seed derivation. Stage- and index-specific random streams are derived from
// one seed with the splitmix64 finalizer so streams can be regenerated
// independently of evaluation order.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return derive_seed(seed, h);
}

// ---------------------------------------------------------------------------
// Text formatting and parsing shared by the file formats.

/// 17 significant digits: enough for an exact double round trip.
inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Whitespace tokenizer over an in-memory file that remembers byte offsets.
class TokenReader {
 public:
  explicit TokenReader(std::string_view text) : text_(text) {}

  std::size_t offset() const { return pos_; }

  bool at_end() {
    skip_space();
    return pos_ >= text_.size();
  }

  std::string_view next(std::string_view what) {
    skip_space();
    if (pos_ >= text_.size()) throw ParseError("unexpected end of file, expected " + std::string(what), pos_);
    const std::size_t start = pos_;
    while (pos_ < text_.size() && !is_space(text_[pos_])) ++pos_;
    return text_.substr(start, pos_ - start);
  }

  /// Reads the remainder of the current line (without the newline).
  std::string_view line(std::string_view what) {
    skip_space();
    if (pos_ >= text_.size()) throw ParseError("unexpected end of file, expected " + std::string(what), pos_);
    const std::size_t start = pos_;
    while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
    std::string_view out = text_.substr(start, pos_ - start);
    if (!out.empty() && out.back() == '\r') out.remove_suffix(1);
    return out;
  }

  double real(std::string_view what) {
    const std::size_t at = (skip_space(), pos_);
    const std::string_view tok = next(what);
    return parse_real(tok, at, what);
  }

  long long integer(std::string_view what) {
    const std::size_t at = (skip_space(), pos_);
    const std::string_view tok = next(what);
    long long v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size())
      throw ParseError("expected integer for " + std::string(what) + ", got '" + std::string(tok) + "'", at);
    return v;
  }

  static double parse_real(std::string_view tok, std::size_t at, std::string_view what) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size())
      throw ParseError("expected real for " + std::string(what) + ", got '" + std::string(tok) + "'", at);
    return v;
  }

 private:
  static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }
  void skip_space() {
    while (pos_ < text_.size() && is_space(text_[pos_])) ++pos_;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

/// Splits on any run of the given delimiters, dropping empty pieces.
inline std::vector<std::string_view> split(std::string_view s, std::string_view delims = " \t") {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && delims.find(s[i]) != std::string_view::npos) ++i;
    const std::size_t start = i;
    while (i < s.size() && delims.find(s[i]) == std::string_view::npos) ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

/// Standard normal cdf.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Standard normal upper tail 1 - cdf(x), accurate far into the tail.
inline double normal_sf(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

}  // namespace gmmkin
