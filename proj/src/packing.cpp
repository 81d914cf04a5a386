#include "radprep/packing.hpp"

#include <fstream>

#include "json.hpp"

namespace radprep::packing {

std::size_t fit_record(TokenizedRecord& record, std::size_t index, const PackOptions& options) {
  const std::size_t sep = options.separator ? 1 : 0;
  const std::size_t limit = options.capacity - sep;
  const std::size_t len = record.length();
  if (len <= limit) return 0;
  if (options.truncation == TruncationPolicy::Error || record.protected_tail > limit) {
    throw RecordTooLong(index, record.record_id, len + sep, options.capacity);
  }
  const std::size_t drop = len - limit;
  const auto tail_begin = record.token_ids.end() - static_cast<std::ptrdiff_t>(record.protected_tail);
  record.token_ids.erase(tail_begin - static_cast<std::ptrdiff_t>(drop), tail_begin);
  return drop;
}

Packer::Packer(PackOptions options) : options_(options) {
  const std::size_t sep = options_.separator ? 1 : 0;
  if (options_.capacity <= sep) throw ValidationError("packing capacity too small");
  current_.capacity = options_.capacity;
}

std::optional<PackedBlock> Packer::seal() {
  if (current_.token_ids.empty()) return std::nullopt;
  PackedBlock done = std::move(current_);
  done.block_id = next_block_id_++;
  current_ = PackedBlock{};
  current_.capacity = options_.capacity;
  return done;
}

std::optional<PackedBlock> Packer::add(TokenizedRecord rec) {
  const std::size_t index = index_++;
  if (rec.token_ids.empty()) throw EmptyText("record '" + rec.record_id + "' has no tokens");
  if (rec.protected_tail > rec.length()) throw ValidationError("protected tail longer than record");
  if (const auto dropped = fit_record(rec, index, options_); dropped > 0) {
    ++truncated_records_;
    truncated_tokens_ += dropped;
  }
  const std::size_t sep = options_.separator ? 1 : 0;
  std::optional<PackedBlock> sealed;
  if (current_.token_ids.size() + rec.length() + sep > options_.capacity) sealed = seal();

  const std::size_t start = current_.token_ids.size();
  const auto segment = static_cast<std::int32_t>(current_.boundaries.size() + 1);
  current_.token_ids.insert(current_.token_ids.end(), rec.token_ids.begin(), rec.token_ids.end());
  current_.boundaries.push_back({std::move(rec.record_id), start, start + rec.length()});
  if (options_.separator) current_.token_ids.push_back(*options_.separator);
  current_.segment_ids.resize(current_.token_ids.size(), segment);
  return sealed;
}

std::optional<PackedBlock> Packer::finish() { return seal(); }

PackResult pack_sequences(std::vector<TokenizedRecord> records, const PackOptions& options) {
  Packer packer(options);
  PackResult result;
  for (auto& rec : records) {
    if (auto block = packer.add(std::move(rec))) result.blocks.push_back(std::move(*block));
  }
  if (auto block = packer.finish()) result.blocks.push_back(std::move(*block));
  result.truncated_records = packer.truncated_records();
  result.truncated_tokens = packer.truncated_tokens();
  return result;
}

AttentionLayout::AttentionLayout(std::span<const std::int32_t> segment_ids)
    : segment_ids_(segment_ids.begin(), segment_ids.end()),
      run_start_(segment_ids.size()),
      position_ids_(segment_ids.size(), 0) {
  for (std::size_t i = 0; i < segment_ids_.size(); ++i) {
    if (i > 0 && segment_ids_[i] == segment_ids_[i - 1]) {
      run_start_[i] = run_start_[i - 1];
      ++runs_.back().length;
    } else {
      run_start_[i] = i;
      runs_.push_back({segment_ids_[i], 1});
    }
    if (segment_ids_[i] != 0) position_ids_[i] = static_cast<std::int32_t>(i - run_start_[i]);
  }
}

bool AttentionLayout::attendable(std::size_t i, std::size_t j) const {
  if (i >= size() || j >= size() || j > i) return false;
  return segment_ids_[i] != 0 && segment_ids_[i] == segment_ids_[j] && run_start_[i] == run_start_[j];
}

std::vector<std::uint8_t> AttentionLayout::dense_mask() const {
  const std::size_t n = size();
  std::vector<std::uint8_t> mask(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (segment_ids_[i] == 0) continue;
    for (std::size_t j = run_start_[i]; j <= i; ++j) mask[i * n + j] = 1;
  }
  return mask;
}

AttentionLayout attention_layout(const PackedBlock& block, bool pad_to_capacity) {
  if (!pad_to_capacity || block.segment_ids.size() >= block.capacity) return AttentionLayout(block.segment_ids);
  std::vector<std::int32_t> padded(block.segment_ids);
  padded.resize(block.capacity, 0);
  return AttentionLayout(padded);
}

std::string to_json_line(const PackedBlock& block) {
  nlohmann::ordered_json j;
  j["block_id"] = block.block_id;
  j["capacity"] = block.capacity;
  j["token_ids"] = block.token_ids;
  j["segment_ids"] = block.segment_ids;
  auto bounds = nlohmann::ordered_json::array();
  for (const auto& b : block.boundaries) {
    nlohmann::ordered_json bj;
    bj["record_id"] = b.record_id;
    bj["start"] = b.start;
    bj["end"] = b.end;
    bounds.push_back(std::move(bj));
  }
  j["boundaries"] = std::move(bounds);
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

PackedBlock block_from_json_line(const std::string& line, std::size_t line_number) {
  try {
    const auto j = nlohmann::json::parse(line);
    PackedBlock b;
    b.block_id = j.at("block_id").get<std::size_t>();
    b.capacity = j.at("capacity").get<std::size_t>();
    b.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
    b.segment_ids = j.at("segment_ids").get<std::vector<std::int32_t>>();
    for (const auto& bj : j.at("boundaries")) {
      b.boundaries.push_back(
          {bj.at("record_id").get<std::string>(), bj.at("start").get<std::size_t>(), bj.at("end").get<std::size_t>()});
    }
    if (b.token_ids.size() != b.segment_ids.size() || b.token_ids.size() > b.capacity) {
      throw ParseError(line_number, "inconsistent block lengths");
    }
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_number, std::string("bad packed block: ") + e.what());
  }
}

std::size_t write_packed_dataset(std::span<const PackedBlock> blocks, const fs::path& path) {
  AtomicOutput out(path);
  for (const auto& b : blocks) out.stream() << to_json_line(b) << '\n';
  out.commit();
  return blocks.size();
}

std::vector<PackedBlock> read_packed_dataset(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open packed dataset: " + path.string());
  std::vector<PackedBlock> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    out.push_back(block_from_json_line(line, n));
  }
  return out;
}

}  // namespace radprep::packing
