#include "radprep/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace radprep::packing {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string short_digest(std::string_view data) {
  const auto d = sha256(data);
  return to_hex(d.data(), 8);
}

std::uint64_t pack_pair(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

}  // namespace

WhitespaceTokenizer::WhitespaceTokenizer(std::vector<std::string> vocabulary) : vocab_(std::move(vocabulary)) {
  std::string digest_input;
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (vocab_[i].empty() || std::any_of(vocab_[i].begin(), vocab_[i].end(), is_space)) {
      throw ValidationError("vocabulary words must be nonempty and contain no whitespace");
    }
    if (!index_.emplace(vocab_[i], static_cast<TokenId>(i + 1)).second) {
      throw ValidationError("duplicate vocabulary word: " + vocab_[i]);
    }
    digest_input += vocab_[i];
    digest_input += '\n';
  }
  unk_ = static_cast<TokenId>(vocab_.size() + 1);
  eos_ = static_cast<TokenId>(vocab_.size() + 2);
  id_ = "whitespace/1/" + std::to_string(vocab_.size()) + "/" + short_digest(digest_input);
}

void WhitespaceTokenizer::Builder::add(std::string_view text) {
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t b = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > b) {
      std::string w(text.substr(b, i - b));
      if (seen_.emplace(w, static_cast<TokenId>(words_.size())).second) words_.push_back(std::move(w));
    }
  }
}

WhitespaceTokenizer WhitespaceTokenizer::Builder::build() && { return WhitespaceTokenizer(std::move(words_)); }
WhitespaceTokenizer WhitespaceTokenizer::Builder::build() const& { return WhitespaceTokenizer(words_); }

std::vector<TokenId> WhitespaceTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::string word;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t b = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > b) {
      word.assign(text.substr(b, i - b));
      const auto it = index_.find(word);
      out.push_back(it == index_.end() ? unk_ : it->second);
    }
  }
  return out;
}

std::string WhitespaceTokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (const auto id : ids) {
    if (id == 0 || id == eos_) continue;
    if (!out.empty()) out += ' ';
    if (id >= 1 && static_cast<std::size_t>(id) <= vocab_.size()) {
      out += vocab_[static_cast<std::size_t>(id - 1)];
    } else {
      out += "<unk>";
    }
  }
  return out;
}

std::vector<std::string_view> bpe_chunks(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t b = i;
    while (i < text.size() && is_space(text[i])) ++i;
    while (i < text.size() && !is_space(text[i])) ++i;
    out.push_back(text.substr(b, i - b));
  }
  return out;
}

BpeTokenizer::BpeTokenizer(std::vector<Merge> merges) : merges_(std::move(merges)) {
  bytes_.resize(static_cast<std::size_t>(kFirstMergeId) + merges_.size());
  for (int b = 0; b < 256; ++b) bytes_[static_cast<std::size_t>(kFirstByteId + b)] = std::string(1, static_cast<char>(b));
  std::string digest_input;
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto [a, b] = merges_[r];
    const auto limit = static_cast<TokenId>(kFirstMergeId + r);
    if (a < kFirstByteId || b < kFirstByteId || a >= limit || b >= limit) {
      throw ValidationError("merge " + std::to_string(r) + " refers to an undefined symbol");
    }
    if (!rank_.emplace(pack_pair(a, b), static_cast<TokenId>(r)).second) {
      throw ValidationError("duplicate merge at rank " + std::to_string(r));
    }
    bytes_[static_cast<std::size_t>(limit)] = bytes_[static_cast<std::size_t>(a)] + bytes_[static_cast<std::size_t>(b)];
    digest_input += std::to_string(a) + ' ' + std::to_string(b) + '\n';
  }
  id_ = "bpe/1/" + std::to_string(merges_.size()) + "/" + short_digest(digest_input);
}

BpeTokenizer BpeTokenizer::train(const std::vector<std::string>& texts, std::size_t merge_count) {
  std::map<std::string, std::size_t> chunk_freq;
  for (const auto& t : texts) {
    for (const auto c : bpe_chunks(t)) ++chunk_freq[std::string(c)];
  }
  std::vector<std::vector<TokenId>> words;
  std::vector<std::size_t> freq;
  for (const auto& [chunk, f] : chunk_freq) {
    std::vector<TokenId> w;
    for (const unsigned char c : chunk) w.push_back(kFirstByteId + c);
    words.push_back(std::move(w));
    freq.push_back(f);
  }

  std::vector<Merge> merges;
  while (merges.size() < merge_count) {
    std::map<Merge, std::size_t> counts;
    for (std::size_t w = 0; w < words.size(); ++w) {
      for (std::size_t i = 0; i + 1 < words[w].size(); ++i) counts[{words[w][i], words[w][i + 1]}] += freq[w];
    }
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const Merge m = best->first;
    const auto new_id = static_cast<TokenId>(kFirstMergeId + merges.size());
    merges.push_back(m);
    for (auto& w : words) {
      std::vector<TokenId> merged;
      merged.reserve(w.size());
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == m.first && w[i + 1] == m.second) {
          merged.push_back(new_id);
          ++i;
        } else {
          merged.push_back(w[i]);
        }
      }
      w.swap(merged);
    }
  }
  return BpeTokenizer(std::move(merges));
}

BpeTokenizer BpeTokenizer::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open BPE merges: " + path.string());
  std::string header;
  std::getline(in, header);
  if (header != "radprep-bpe v1") throw ValidationError("not a BPE merges file: " + path.string());
  std::vector<Merge> merges;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::istringstream ls(line);
    TokenId a = 0, b = 0;
    if (!(ls >> a >> b)) throw ValidationError("bad merge line in " + path.string() + ": " + line);
    merges.emplace_back(a, b);
  }
  return BpeTokenizer(std::move(merges));
}

void BpeTokenizer::save(const fs::path& path) const {
  AtomicOutput out(path);
  out.stream() << "radprep-bpe v1\n";
  for (const auto& [a, b] : merges_) out.stream() << a << ' ' << b << '\n';
  out.commit();
}

void BpeTokenizer::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> sym;
  sym.reserve(chunk.size());
  for (const unsigned char c : chunk) sym.push_back(kFirstByteId + c);
  while (sym.size() > 1) {
    TokenId best_rank = std::numeric_limits<TokenId>::max();
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      const auto it = rank_.find(pack_pair(sym[i], sym[i + 1]));
      if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == std::numeric_limits<TokenId>::max()) break;
    const auto [a, b] = merges_[static_cast<std::size_t>(best_rank)];
    const TokenId merged = kFirstMergeId + best_rank;
    std::size_t w = 0;
    for (std::size_t i = 0; i < sym.size(); ++i) {
      if (i + 1 < sym.size() && sym[i] == a && sym[i + 1] == b) {
        sym[w++] = merged;
        ++i;
      } else {
        sym[w++] = sym[i];
      }
    }
    sym.resize(w);
  }
  out.insert(out.end(), sym.begin(), sym.end());
}

std::vector<TokenId> BpeTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (const auto chunk : bpe_chunks(text)) encode_chunk(chunk, out);
  return out;
}

std::string BpeTokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (const auto id : ids) {
    if (id >= kFirstByteId && static_cast<std::size_t>(id) < bytes_.size()) out += bytes_[static_cast<std::size_t>(id)];
  }
  return out;
}

}  // namespace radprep::packing
