#include "radprep/token_cache.hpp"

#include <unistd.h>

#include <cstring>
#include <fstream>
#include <thread>

#include "json.hpp"

namespace radprep::packing {

namespace {

constexpr char kMagic[4] = {'R', 'P', 'T', 'K'};
constexpr const char* kManifestFormat = "radprep-token-cache/1";

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

TokenCache::TokenCache(fs::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  fs::create_directories(dir_ / "entries", ec);
  if (ec) throw CacheIoError("cannot create cache directory " + dir_.string() + ": " + ec.message());
  const auto manifest = dir_ / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    try {
      const auto j = nlohmann::json::parse(in);
      if (j.value("format", "") != kManifestFormat) throw CacheIoError("unrecognized cache manifest format");
      for (const auto& [id, n] : j.at("tokenizers").items()) counts_[id] = n.get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw CacheIoError("corrupt cache manifest " + manifest.string() + ": " + e.what());
    }
  }
}

TokenCache::~TokenCache() {
  try {
    flush();
  } catch (...) {
  }
}

std::string TokenCache::key(std::string_view tokenizer_id, std::string_view text) {
  std::string buf;
  buf.reserve(tokenizer_id.size() + 1 + text.size());
  buf += tokenizer_id;
  buf += '\0';
  buf += text;
  const auto d = sha256(buf);
  return to_hex(d.data(), d.size());
}

fs::path TokenCache::entry_path(const std::string& key) const {
  return dir_ / "entries" / key.substr(0, 2) / (key + ".tok");
}

std::optional<std::vector<TokenId>> TokenCache::lookup(std::string_view tokenizer_id, std::string_view text) const {
  const auto path = entry_path(key(tokenizer_id, text));
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::error_code ec;
    if (fs::exists(path, ec)) throw CacheIoError("cannot read cache entry " + path.string());
    return std::nullopt;
  }
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() < 8 || std::memcmp(data.data(), kMagic, 4) != 0) {
    throw CacheIoError("corrupt cache entry " + path.string());
  }
  const std::uint32_t count = get_u32(data.data() + 4);
  if (data.size() != 8 + 4 * static_cast<std::size_t>(count)) throw CacheIoError("truncated cache entry " + path.string());
  std::vector<TokenId> ids(count);
  for (std::uint32_t i = 0; i < count; ++i) ids[i] = static_cast<TokenId>(get_u32(data.data() + 8 + 4 * i));
  return ids;
}

void TokenCache::store(std::string_view tokenizer_id, std::string_view text, const std::vector<TokenId>& ids) {
  const auto path = entry_path(key(tokenizer_id, text));
  std::string buf(kMagic, 4);
  buf.reserve(8 + 4 * ids.size());
  put_u32(buf, static_cast<std::uint32_t>(ids.size()));
  for (const auto id : ids) put_u32(buf, static_cast<std::uint32_t>(id));

  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  if (ec) throw CacheIoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  const bool existed = fs::exists(path, ec);

  auto temp = path;
  temp += ".tmp-" + std::to_string(::getpid()) + "-" +
          std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) {
      fs::remove(temp, ec);
      throw CacheIoError("cannot write cache entry " + path.string());
    }
  }
  fs::rename(temp, path, ec);
  if (ec) {
    fs::remove(temp, ec);
    throw CacheIoError("cannot publish cache entry " + path.string());
  }
  if (!existed) {
    std::lock_guard lock(mutex_);
    ++counts_[std::string(tokenizer_id)];
    dirty_ = true;
  }
}

void TokenCache::flush() {
  std::lock_guard lock(mutex_);
  if (!dirty_ && fs::exists(dir_ / "manifest.json")) return;
  nlohmann::ordered_json j;
  j["format"] = kManifestFormat;
  j["tokenizers"] = nlohmann::ordered_json::object();
  for (const auto& [id, n] : counts_) j["tokenizers"][id] = n;
  AtomicOutput out(dir_ / "manifest.json");
  out.stream() << j.dump(2) << '\n';
  out.commit();
  dirty_ = false;
}

std::size_t TokenCache::entry_count(const std::string& tokenizer_id) const {
  std::lock_guard lock(mutex_);
  const auto it = counts_.find(tokenizer_id);
  return it == counts_.end() ? 0 : it->second;
}

TokenizedRecord tokenize_cached(std::string record_id, std::string_view text, const TokenizerProvider& provider,
                                TokenCache* cache, CacheCounters* counters) {
  TokenizedRecord rec;
  rec.record_id = std::move(record_id);
  bool hit = false;
  if (cache) {
    try {
      if (auto ids = cache->lookup(provider.id(), text)) {
        rec.token_ids = std::move(*ids);
        hit = true;
      }
    } catch (const CacheIoError&) {
      if (counters) ++counters->io_warnings;
    }
  }
  if (!hit) {
    rec.token_ids = provider.encode(text);
    if (cache && !rec.token_ids.empty()) {
      try {
        cache->store(provider.id(), text, rec.token_ids);
      } catch (const CacheIoError&) {
        if (counters) ++counters->io_warnings;
      }
    }
  }
  if (counters) ++(hit ? counters->hits : counters->misses);
  if (rec.token_ids.empty()) throw EmptyText("text for record '" + rec.record_id + "' encodes to zero tokens");
  return rec;
}

}  // namespace radprep::packing
