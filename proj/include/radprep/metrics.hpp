#pragma once

// Reference-based scores for generated impressions: ROUGE-L, ROUGE-N and a
// BERTScore-style greedy cosine matching over token embeddings.

#include <cstddef>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "radprep/common.hpp"

namespace radprep::metrics {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct BertScoreTriple {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

class InvalidN : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class EmptyInput : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class DimensionMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class ZeroVector : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class EmptyCorpus : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Lowercases ASCII letters and splits on every ASCII character that is not
/// a letter or digit. Bytes >= 0x80 stay inside tokens so UTF-8 words are
/// never cut apart.
std::vector<std::string> metric_tokenize(std::string_view text);

/// O(|a|*|b|) time, O(min(|a|,|b|)) memory.
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// F-measure (1+b^2)PR / (R + b^2 P); 0 when the denominator is 0.
double f_measure(double precision, double recall, double beta = 1.0);

RougeScore rouge_l(std::string_view candidate, std::string_view reference, double beta = 1.0);
RougeScore rouge_n(std::string_view candidate, std::string_view reference, int n);

using Vector = std::vector<double>;

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual const std::string& id() const = 0;
  /// One vector per token, all of the same dimension.
  virtual std::vector<Vector> embed(std::span<const std::string> tokens) const = 0;
  /// Several token lists at once; the default loops over embed().
  virtual std::vector<std::vector<Vector>> embed_batch(const std::vector<std::vector<std::string>>& batch) const;
};

/// Each distinct token gets its own axis (first come, first served), so
/// distinct tokens are orthogonal unit vectors. Throws DimensionMismatch
/// once more than `dimension` distinct tokens have been seen.
class OneHotEmbedder final : public EmbeddingProvider {
 public:
  explicit OneHotEmbedder(std::size_t dimension = 4096);
  const std::string& id() const override { return id_; }
  std::vector<Vector> embed(std::span<const std::string> tokens) const override;

 private:
  std::size_t dimension_;
  std::string id_;
  mutable std::mutex mutex_;
  mutable std::map<std::string, std::size_t> axes_;
};

/// Pseudo-random but fixed vector per token type, seeded from the token
/// text. With nonnegative=true all components are in [0, 1), so every
/// cosine similarity is >= 0.
class HashedEmbedder final : public EmbeddingProvider {
 public:
  HashedEmbedder(std::size_t dimension, std::uint64_t seed, bool nonnegative = false);
  const std::string& id() const override { return id_; }
  std::vector<Vector> embed(std::span<const std::string> tokens) const override;

 private:
  std::size_t dimension_;
  std::uint64_t seed_;
  bool nonnegative_;
  std::string id_;
};

using IdfWeights = std::map<std::string, double>;

/// Greedy matching on the cosine-similarity matrix. Recall averages, over
/// reference tokens, the best similarity to any candidate token; precision
/// does the same over candidate tokens. Weighted means use `idf` when given
/// (tokens absent from the map weigh 1), otherwise uniform weights.
BertScoreTriple bertscore(std::string_view candidate, std::string_view reference, const EmbeddingProvider& embedder,
                          const IdfWeights* idf = nullptr);

/// Same, over already-embedded tokens.
BertScoreTriple bertscore_from_vectors(std::span<const std::string> cand_tokens, std::span<const Vector> cand,
                                       std::span<const std::string> ref_tokens, std::span<const Vector> ref,
                                       const IdfWeights* idf = nullptr);

struct ScoreInput {
  std::string record_id;
  std::string generated;
  std::string reference;
};

struct PairScores {
  std::string record_id;
  RougeScore rouge1;
  RougeScore rouge2;
  RougeScore rouge_l;
  std::optional<BertScoreTriple> bert;
};

struct CorpusMeans {
  double rouge1_f1 = 0.0;
  double rouge2_f1 = 0.0;
  double rouge_l_p = 0.0;
  double rouge_l_r = 0.0;
  double rouge_l_f1 = 0.0;
  std::optional<BertScoreTriple> bert;
};

struct CorpusScores {
  std::vector<PairScores> rows;
  CorpusMeans means;
};

struct ScoreOptions {
  double rouge_l_beta = 1.0;
  const IdfWeights* idf = nullptr;
  unsigned threads = 1;
};

PairScores score_pair(const ScoreInput& input, const EmbeddingProvider* embedder, const ScoreOptions& options = {});

/// Means are summed in pair order regardless of thread count.
CorpusScores score_corpus(std::span<const ScoreInput> pairs, const EmbeddingProvider* embedder,
                          const ScoreOptions& options = {});

/// Columns: record_id, rouge1_f1, rouge2_f1, rougeL_p, rougeL_r, rougeL_f1,
/// bert_p, bert_r, bert_f1 (BERT columns empty without an embedder).
std::string scores_csv_header();
std::string scores_csv_row(const PairScores& row);
void write_scores_csv(std::span<const PairScores> rows, const fs::path& path);

}  // namespace radprep::metrics
