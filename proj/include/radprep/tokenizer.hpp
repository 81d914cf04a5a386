#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "radprep/common.hpp"

namespace radprep::packing {

using TokenId = std::int32_t;

/// Pluggable tokenizer. encode() must be deterministic for a given id(), and
/// id() must change whenever encode() behavior changes.
class TokenizerProvider {
 public:
  virtual ~TokenizerProvider() = default;
  virtual const std::string& id() const = 0;
  virtual std::vector<TokenId> encode(std::string_view text) const = 0;
  virtual std::string decode(const std::vector<TokenId>& ids) const = 0;
  virtual std::optional<TokenId> bos() const { return std::nullopt; }
  virtual std::optional<TokenId> eos() const { return std::nullopt; }
  virtual std::optional<TokenId> pad() const { return std::nullopt; }
};

/// Reference tokenizer: whitespace split against a fixed vocabulary. Word i
/// of the vocabulary gets id i + 1; 0 is padding, then come <unk> and <eos>.
/// decode() rejoins words with single spaces.
class WhitespaceTokenizer final : public TokenizerProvider {
 public:
  explicit WhitespaceTokenizer(std::vector<std::string> vocabulary);

  /// Vocabulary in order of first appearance across `texts`.
  template <typename Range>
  static WhitespaceTokenizer fit(const Range& texts) {
    Builder b;
    for (const auto& t : texts) b.add(t);
    return b.build();
  }

  class Builder {
   public:
    void add(std::string_view text);
    WhitespaceTokenizer build() &&;
    WhitespaceTokenizer build() const&;

   private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> seen_;
  };

  const std::string& id() const override { return id_; }
  std::vector<TokenId> encode(std::string_view text) const override;
  std::string decode(const std::vector<TokenId>& ids) const override;
  std::optional<TokenId> eos() const override { return eos_; }
  std::optional<TokenId> pad() const override { return 0; }
  TokenId unk() const { return unk_; }
  const std::vector<std::string>& vocabulary() const { return vocab_; }

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId unk_;
  TokenId eos_;
  std::string id_;
};

/// Byte-level BPE. Text is cut into chunks of (leading whitespace + one
/// non-whitespace run); each chunk starts as raw bytes and adjacent symbols
/// are merged by rank. decode(encode(t)) == t for any input.
/// Ids: 0 pad, 1 bos, 2 eos, 3..258 bytes, 259.. merges in rank order.
class BpeTokenizer final : public TokenizerProvider {
 public:
  using Merge = std::pair<TokenId, TokenId>;

  explicit BpeTokenizer(std::vector<Merge> merges);

  /// Learns up to `merge_count` merges by repeatedly joining the most
  /// frequent adjacent pair (ties go to the smallest pair).
  static BpeTokenizer train(const std::vector<std::string>& texts, std::size_t merge_count);
  static BpeTokenizer load(const fs::path& path);
  void save(const fs::path& path) const;

  const std::string& id() const override { return id_; }
  std::vector<TokenId> encode(std::string_view text) const override;
  std::string decode(const std::vector<TokenId>& ids) const override;
  std::optional<TokenId> bos() const override { return 1; }
  std::optional<TokenId> eos() const override { return 2; }
  std::optional<TokenId> pad() const override { return 0; }
  const std::vector<Merge>& merges() const { return merges_; }

  static constexpr TokenId kFirstByteId = 3;
  static constexpr TokenId kFirstMergeId = 259;

 private:
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, TokenId> rank_;  // packed pair -> merge index
  std::vector<std::string> bytes_;                   // id -> byte string
  std::string id_;
};

/// Splits text into BPE pre-tokenization chunks.
std::vector<std::string_view> bpe_chunks(std::string_view text);

}  // namespace radprep::packing
