#pragma once

// Independent reference implementations used to check the library. Each is
// written for obviousness, not speed, and shares no code with src/.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "radprep/packing.hpp"

namespace oracle {

using Tokens = std::vector<std::string>;

inline bool is_subsequence(const Tokens& sub, const Tokens& seq) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < seq.size() && j < sub.size(); ++i) {
    if (seq[i] == sub[j]) ++j;
  }
  return j == sub.size();
}

/// Tries every subsequence of the shorter list (at most 2^8 for the sizes
/// used here) and keeps the longest one that is also in the other list.
inline std::size_t brute_lcs(const Tokens& a, const Tokens& b) {
  const Tokens& s = a.size() <= b.size() ? a : b;
  const Tokens& t = a.size() <= b.size() ? b : a;
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << s.size()); ++mask) {
    Tokens sub;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (mask & (1u << i)) sub.push_back(s[i]);
    }
    if (sub.size() > best && is_subsequence(sub, t)) best = sub.size();
  }
  return best;
}

inline double harmonic(double p, double r) { return p + r == 0.0 ? 0.0 : 2 * p * r / (p + r); }

struct Triple {
  double p = 0, r = 0, f = 0;
};

/// Clipped n-gram overlap counted with plain maps.
inline Triple rouge_n(const Tokens& c, const Tokens& r, std::size_t n) {
  auto grams = [n](const Tokens& t) {
    std::map<Tokens, int> m;
    for (std::size_t i = 0; i + n <= t.size(); ++i) ++m[Tokens(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i + n))];
    return m;
  };
  const auto gc = grams(c), gr = grams(r);
  int total_c = 0, total_r = 0, overlap = 0;
  for (const auto& [g, k] : gc) {
    total_c += k;
    const auto it = gr.find(g);
    if (it != gr.end()) overlap += std::min(k, it->second);
  }
  for (const auto& [g, k] : gr) total_r += k;
  Triple out;
  if (total_c == 0 || total_r == 0) return out;
  out.p = static_cast<double>(overlap) / total_c;
  out.r = static_cast<double>(overlap) / total_r;
  out.f = harmonic(out.p, out.r);
  return out;
}

/// With orthogonal one-hot vectors a token's best cosine is 1 exactly when
/// its type occurs on the other side, else 0.
inline Triple unigram_membership(const Tokens& c, const Tokens& r) {
  const std::set<std::string> sc(c.begin(), c.end()), sr(r.begin(), r.end());
  double hit_c = 0, hit_r = 0;
  for (const auto& t : c) hit_c += sr.count(t);
  for (const auto& t : r) hit_r += sc.count(t);
  Triple out;
  out.p = hit_c / static_cast<double>(c.size());
  out.r = hit_r / static_cast<double>(r.size());
  out.f = harmonic(out.p, out.r);
  return out;
}

inline Tokens random_tokens(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len, int vocab) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> word(0, vocab - 1);
  Tokens t(len(rng));
  for (auto& w : t) w = "w" + std::to_string(word(rng));
  return t;
}

inline std::string join(const Tokens& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + t[i];
  return s;
}

inline std::size_t count_words(const std::string& s) {
  std::istringstream in(s);
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

/// What a record should look like after truncation: the head keeps its
/// first tokens, the protected tail is untouched.
inline std::vector<radprep::packing::TokenId> fitted(const radprep::packing::TokenizedRecord& r, std::size_t room) {
  if (r.token_ids.size() <= room) return r.token_ids;
  const std::size_t head = room - r.protected_tail;
  std::vector<radprep::packing::TokenId> out(r.token_ids.begin(), r.token_ids.begin() + static_cast<long>(head));
  out.insert(out.end(), r.token_ids.end() - static_cast<long>(r.protected_tail), r.token_ids.end());
  return out;
}

/// Checks conservation, the capacity bound, boundary reconstruction, greedy
/// tightness and segment isolation of the attention layout. Returns an empty
/// string when everything holds, else the first violation.
inline std::string check_packing(const std::vector<radprep::packing::TokenizedRecord>& records,
                                 const radprep::packing::PackOptions& opts,
                                 const std::vector<radprep::packing::PackedBlock>& blocks, std::mt19937_64& rng,
                                 std::size_t exhaustive_limit = 256) {
  using namespace radprep::packing;
  const std::size_t sep = opts.separator ? 1 : 0;
  const std::size_t room = opts.capacity - sep;
  std::vector<std::vector<TokenId>> expected;
  std::size_t expected_tokens = 0;
  for (const auto& r : records) {
    expected.push_back(fitted(r, room));
    expected_tokens += expected.back().size();
  }
  std::size_t next = 0, seen_tokens = 0;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const auto& b = blocks[bi];
    const std::string where = "block " + std::to_string(bi) + ": ";
    if (b.token_ids.size() > opts.capacity) return where + "exceeds capacity";
    if (b.segment_ids.size() != b.token_ids.size()) return where + "segment ids misaligned";
    if (b.boundaries.empty()) return where + "no records";
    std::size_t cursor = 0;
    for (std::size_t k = 0; k < b.boundaries.size(); ++k, ++next) {
      const auto& bd = b.boundaries[k];
      if (next >= records.size()) return where + "more records than input";
      if (bd.record_id != records[next].record_id) return where + "record order changed";
      if (bd.start != cursor) return where + "gap before a record";
      const std::vector<TokenId> got(b.token_ids.begin() + static_cast<long>(bd.start),
                                     b.token_ids.begin() + static_cast<long>(bd.end));
      if (got != expected[next]) return where + "tokens of record " + bd.record_id + " differ";
      for (std::size_t p = bd.start; p < bd.end + sep; ++p) {
        if (b.segment_ids[p] != static_cast<std::int32_t>(k + 1)) return where + "wrong segment id";
      }
      if (sep && b.token_ids[bd.end] != *opts.separator) return where + "missing separator";
      seen_tokens += got.size();
      cursor = bd.end + sep;
    }
    if (cursor != b.token_ids.size()) return where + "trailing tokens";
    if (bi + 1 < blocks.size() && b.token_ids.size() + expected[next].size() + sep <= opts.capacity) {
      return where + "next record would have fit (not greedy)";
    }

    const auto layout = attention_layout(b, true);
    std::vector<std::int32_t> seg(b.segment_ids);
    seg.resize(b.capacity, 0);
    auto ok = [&](std::size_t i, std::size_t j) {
      const bool want = seg[i] != 0 && seg[i] == seg[j] && j <= i;
      return layout.attendable(i, j) == want;
    };
    if (layout.size() <= exhaustive_limit) {
      for (std::size_t i = 0; i < layout.size(); ++i) {
        for (std::size_t j = 0; j < layout.size(); ++j) {
          if (!ok(i, j)) return where + "attention mask wrong at (" + std::to_string(i) + "," + std::to_string(j) + ")";
        }
      }
    } else {
      std::uniform_int_distribution<std::size_t> pos(0, layout.size() - 1);
      for (int s = 0; s < 4000; ++s) {
        const auto i = pos(rng), j = pos(rng);
        if (!ok(i, j)) return where + "attention mask wrong at a sampled pair";
      }
      // Every segment change is a hard wall.
      for (std::size_t i = 1; i < layout.size(); ++i) {
        if (seg[i] != seg[i - 1] && layout.attendable(i, i - 1)) return where + "attention crosses a boundary";
      }
    }
  }
  if (next != records.size()) return "records missing from the output";
  if (seen_tokens != expected_tokens) return "token count not conserved";
  return {};
}

}  // namespace oracle
