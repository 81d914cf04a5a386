#pragma once

#include <atomic>
#include <cstddef>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "radprep/common.hpp"
#include "radprep/tokenizer.hpp"

namespace radprep::packing {

class CacheIoError : public IoError {
 public:
  using IoError::IoError;
};

/// Persistent content-addressed store of tokenization results.
///
/// Layout under the cache directory:
///   manifest.json             {"format": ..., "tokenizers": {id: entry_count}}
///   entries/<k0k1>/<key>.tok  "RPTK" magic, u32 count, count x i32 (LE)
/// where key is the hex SHA-256 of tokenizer_id + '\0' + text. Entries are
/// written to a temporary name and renamed into place, so concurrent writers
/// of the same key are safe.
class TokenCache {
 public:
  explicit TokenCache(fs::path dir);
  ~TokenCache();
  TokenCache(const TokenCache&) = delete;
  TokenCache& operator=(const TokenCache&) = delete;

  static std::string key(std::string_view tokenizer_id, std::string_view text);

  /// nullopt on miss; throws CacheIoError when an entry exists but cannot be
  /// read or is corrupt.
  std::optional<std::vector<TokenId>> lookup(std::string_view tokenizer_id, std::string_view text) const;
  /// Throws CacheIoError when the entry cannot be written.
  void store(std::string_view tokenizer_id, std::string_view text, const std::vector<TokenId>& ids);

  /// Rewrites manifest.json. Also called from the destructor.
  void flush();

  std::size_t entry_count(const std::string& tokenizer_id) const;
  const fs::path& dir() const { return dir_; }

 private:
  fs::path entry_path(const std::string& key) const;

  fs::path dir_;
  mutable std::mutex mutex_;
  std::map<std::string, std::size_t> counts_;
  bool dirty_ = false;
};

struct CacheCounters {
  std::atomic<std::size_t> hits{0};
  std::atomic<std::size_t> misses{0};
  std::atomic<std::size_t> io_warnings{0};

  double hit_rate() const {
    const auto total = hits.load() + misses.load();
    return total == 0 ? 0.0 : static_cast<double>(hits.load()) / static_cast<double>(total);
  }
};

class EmptyText : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct TokenizedRecord {
  std::string record_id;
  std::vector<TokenId> token_ids;
  /// Trailing tokens that truncation must never remove (the output side of
  /// an instruction pair).
  std::size_t protected_tail = 0;

  std::size_t length() const { return token_ids.size(); }
  bool operator==(const TokenizedRecord&) const = default;
};

/// provider.encode(text) through `cache` (may be null). Cache read or write
/// failures fall back to direct encoding and bump counters->io_warnings.
/// Throws EmptyText when the text encodes to zero tokens.
TokenizedRecord tokenize_cached(std::string record_id, std::string_view text, const TokenizerProvider& provider,
                                TokenCache* cache, CacheCounters* counters = nullptr);

}  // namespace radprep::packing
