#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace radprep {

namespace fs = std::filesystem;

/// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration or input that violates a documented contract. The CLI
/// maps this family to exit status 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Output file that only appears at its final path after commit().
// Until then everything goes to a sibling temporary which is removed if the
// object is destroyed uncommitted.
class AtomicOutput {
 public:
  explicit AtomicOutput(fs::path target);
  AtomicOutput(const AtomicOutput&) = delete;
  AtomicOutput& operator=(const AtomicOutput&) = delete;
  ~AtomicOutput();

  std::ofstream& stream() { return out_; }
  const fs::path& target() const { return target_; }
  void commit();

 private:
  fs::path target_;
  fs::path temp_;
  std::ofstream out_;
  bool committed_ = false;
};

using Digest256 = std::array<std::uint8_t, 32>;

Digest256 sha256(std::string_view data);
std::string to_hex(const std::uint8_t* data, std::size_t size);

/// 64-bit value derived from SHA-256(le64(seed) || text). Stable across
/// platforms and runs; used for every per-record pseudo-random decision.
std::uint64_t stable_hash64(std::uint64_t seed, std::string_view text);

std::string_view trim(std::string_view text);

/// Replaces every invalid UTF-8 sequence with U+FFFD; returns the number of
/// replacements made.
std::size_t sanitize_utf8(std::string& text);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Order of calls is
/// unspecified; callers write results by index.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

std::string utc_timestamp();

}  // namespace radprep
