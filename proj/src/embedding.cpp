#include "radprep/embedding.hpp"

#include <cstdlib>
#include <mutex>

#include "httplib.h"
#include "json.hpp"
#include "url.hpp"

namespace radprep::metrics {

EmbeddingServiceConfig EmbeddingServiceConfig::from_env(std::string model) {
  EmbeddingServiceConfig c;
  const char* endpoint = std::getenv("RADPREP_EMBED_ENDPOINT");
  if (endpoint == nullptr || *endpoint == '\0') throw ValidationError("RADPREP_EMBED_ENDPOINT is not set");
  c.endpoint = endpoint;
  if (const char* key = std::getenv("RADPREP_EMBED_API_KEY")) c.api_key = key;
  const char* m = std::getenv("RADPREP_EMBED_MODEL");
  c.model = (m && *m) ? std::string(m) : std::move(model);
  return c;
}

struct ServiceEmbedder::Impl {
  EmbeddingServiceConfig config;
  std::string path;
  std::unique_ptr<httplib::Client> client;
  std::mutex mutex;  // httplib::Client is not safe for concurrent use
};

ServiceEmbedder::ServiceEmbedder(EmbeddingServiceConfig config) : impl_(std::make_unique<Impl>()) {
  if (config.max_batch == 0) throw ValidationError("embedding max_batch must be >= 1");
  const auto url = detail::split_url(config.endpoint);
  impl_->client = std::make_unique<httplib::Client>(url.origin);
  impl_->path = url.path;
  impl_->client->set_connection_timeout(config.timeout);
  impl_->client->set_read_timeout(config.timeout);
  id_ = "service/" + config.model + "@" + config.endpoint;
  impl_->config = std::move(config);
}

ServiceEmbedder::~ServiceEmbedder() = default;

std::vector<Vector> ServiceEmbedder::embed(std::span<const std::string> tokens) const {
  auto out = embed_batch({std::vector<std::string>(tokens.begin(), tokens.end())});
  return std::move(out.front());
}

std::vector<std::vector<Vector>> ServiceEmbedder::embed_batch(const std::vector<std::vector<std::string>>& batch) const {
  std::vector<std::vector<Vector>> out;
  out.reserve(batch.size());
  for (std::size_t begin = 0; begin < batch.size(); begin += impl_->config.max_batch) {
    const std::size_t end = std::min(batch.size(), begin + impl_->config.max_batch);
    nlohmann::json req;
    req["model"] = impl_->config.model;
    req["inputs"] = nlohmann::json::array();
    for (std::size_t i = begin; i < end; ++i) req["inputs"].push_back(batch[i]);

    httplib::Headers headers;
    if (!impl_->config.api_key.empty()) headers.emplace("Authorization", "Bearer " + impl_->config.api_key);
    httplib::Result res;
    {
      std::lock_guard lock(impl_->mutex);
      res = impl_->client->Post(impl_->path, headers, req.dump(), "application/json");
    }
    if (!res) throw EmbeddingServiceError("embedding service unreachable: " + httplib::to_string(res.error()));
    if (res->status != 200) throw EmbeddingServiceError("embedding service returned HTTP " + std::to_string(res->status));

    try {
      const auto j = nlohmann::json::parse(res->body);
      const auto& embeddings = j.at("embeddings");
      if (embeddings.size() != end - begin) throw DimensionMismatch("embedding service returned a batch of the wrong size");
      for (std::size_t i = 0; i < embeddings.size(); ++i) {
        auto vectors = embeddings[i].get<std::vector<Vector>>();
        if (vectors.size() != batch[begin + i].size()) {
          throw DimensionMismatch("embedding service returned a vector count different from the token count");
        }
        out.push_back(std::move(vectors));
      }
    } catch (const nlohmann::json::exception& e) {
      throw EmbeddingServiceError(std::string("malformed embedding response: ") + e.what());
    }
  }
  return out;
}

}  // namespace radprep::metrics
