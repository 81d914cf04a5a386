#pragma once

// Greedy in-order sequence packing into fixed-capacity blocks, plus the
// block-diagonal causal attention layout that keeps packed sequences apart.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "radprep/common.hpp"
#include "radprep/token_cache.hpp"
#include "radprep/tokenizer.hpp"

namespace radprep::packing {

struct Boundary {
  std::string record_id;
  std::size_t start = 0;
  std::size_t end = 0;  // half-open

  bool operator==(const Boundary&) const = default;
};

/// Stored without padding: token_ids.size() <= capacity, and the remaining
/// positions are implicit padding (segment id 0). A separator token, when
/// used, follows its sequence and carries that sequence's segment id but is
/// outside its boundary.
struct PackedBlock {
  std::size_t block_id = 0;
  std::vector<TokenId> token_ids;
  std::vector<std::int32_t> segment_ids;
  std::vector<Boundary> boundaries;
  std::size_t capacity = 2048;

  bool operator==(const PackedBlock&) const = default;
};

enum class TruncationPolicy { TruncateInput, Error };

struct PackOptions {
  std::size_t capacity = 2048;
  std::optional<TokenId> separator;
  TruncationPolicy truncation = TruncationPolicy::TruncateInput;
};

class RecordTooLong : public ValidationError {
 public:
  RecordTooLong(std::size_t index, const std::string& record_id, std::size_t length, std::size_t capacity)
      : ValidationError("record " + std::to_string(index) + " ('" + record_id + "') needs " + std::to_string(length) +
                        " positions, capacity is " + std::to_string(capacity)),
        index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

struct PackResult {
  std::vector<PackedBlock> blocks;
  std::size_t truncated_records = 0;
  std::size_t truncated_tokens = 0;
};

/// Drops tokens from the end of the unprotected head so that
/// length + separator fits in capacity. Returns tokens removed; throws
/// RecordTooLong when the policy forbids it or the protected tail alone
/// does not fit.
std::size_t fit_record(TokenizedRecord& record, std::size_t index, const PackOptions& options);

/// Incremental form of pack_sequences for corpora that do not fit in
/// memory. add() returns the block it sealed, if any; finish() returns the
/// last open block.
class Packer {
 public:
  explicit Packer(PackOptions options);

  std::optional<PackedBlock> add(TokenizedRecord record);
  std::optional<PackedBlock> finish();

  std::size_t records_added() const { return index_; }
  std::size_t truncated_records() const { return truncated_records_; }
  std::size_t truncated_tokens() const { return truncated_tokens_; }

 private:
  std::optional<PackedBlock> seal();

  PackOptions options_;
  PackedBlock current_;
  std::size_t next_block_id_ = 0;
  std::size_t index_ = 0;
  std::size_t truncated_records_ = 0;
  std::size_t truncated_tokens_ = 0;
};

/// Greedy first-fit in input order: each record (plus separator) goes into
/// the open block if it fits, otherwise the block is sealed and a new one
/// started. Separators count against capacity.
PackResult pack_sequences(std::vector<TokenizedRecord> records, const PackOptions& options);

struct SegmentRun {
  std::int32_t segment = 0;
  std::size_t length = 0;

  bool operator==(const SegmentRun&) const = default;
};

/// Position (i, j) is attendable iff segment[i] == segment[j] != 0 and
/// j <= i. Stored as run lengths of segment ids.
class AttentionLayout {
 public:
  explicit AttentionLayout(std::span<const std::int32_t> segment_ids);

  std::size_t size() const { return segment_ids_.size(); }
  bool attendable(std::size_t i, std::size_t j) const;
  const std::vector<SegmentRun>& runs() const { return runs_; }
  /// Restart at 0 at each segment start; padding positions get 0.
  const std::vector<std::int32_t>& position_ids() const { return position_ids_; }
  /// Row-major size() x size() 0/1 matrix.
  std::vector<std::uint8_t> dense_mask() const;

 private:
  std::vector<std::int32_t> segment_ids_;
  std::vector<std::size_t> run_start_;  // per position: index where its run begins
  std::vector<SegmentRun> runs_;
  std::vector<std::int32_t> position_ids_;
};

/// Layout over the block's stored positions, or over all `capacity`
/// positions (implicit padding included) when pad_to_capacity is set.
AttentionLayout attention_layout(const PackedBlock& block, bool pad_to_capacity = false);

std::string to_json_line(const PackedBlock& block);
PackedBlock block_from_json_line(const std::string& line, std::size_t line_number);

std::size_t write_packed_dataset(std::span<const PackedBlock> blocks, const fs::path& path);
std::vector<PackedBlock> read_packed_dataset(const fs::path& path);

}  // namespace radprep::packing
