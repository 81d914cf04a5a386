#pragma once

// Client for an external token-embedding service used by BERTScore.
//
// Request (POST, JSON):  {"model": "...", "inputs": [["tok", ...], ...]}
// Response (JSON):       {"embeddings": [[[f, ...], ...], ...]}
// One vector per input token, batches in request order.

#include <chrono>
#include <memory>
#include <string>
#include <vector>

#include "radprep/metrics.hpp"

namespace radprep::metrics {

class EmbeddingServiceError : public Error {
 public:
  using Error::Error;
};

struct EmbeddingServiceConfig {
  std::string endpoint;
  std::string model;
  std::string api_key;  // may be empty for unauthenticated services
  std::size_t max_batch = 32;
  std::chrono::seconds timeout{60};

  /// Endpoint from RADPREP_EMBED_ENDPOINT, key from RADPREP_EMBED_API_KEY,
  /// model from RADPREP_EMBED_MODEL (defaulting to `model`).
  static EmbeddingServiceConfig from_env(std::string model = "default");
};

class ServiceEmbedder final : public EmbeddingProvider {
 public:
  explicit ServiceEmbedder(EmbeddingServiceConfig config);
  ~ServiceEmbedder() override;

  const std::string& id() const override { return id_; }
  std::vector<Vector> embed(std::span<const std::string> tokens) const override;
  std::vector<std::vector<Vector>> embed_batch(const std::vector<std::vector<std::string>>& batch) const override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::string id_;
};

}  // namespace radprep::metrics
