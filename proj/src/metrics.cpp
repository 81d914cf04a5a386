#include "radprep/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

namespace radprep::metrics {

std::vector<std::string> metric_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c >= 0x80) {
      cur += ch;
    } else if (c >= 'A' && c <= 'Z') {
      cur += static_cast<char>(c - 'A' + 'a');
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.size() < b.size()) std::swap(a, b);
  // Row over the shorter sequence.
  std::vector<std::size_t> row(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = 0;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = a[i - 1] == b[j - 1] ? diag + 1 : std::max(row[j], row[j - 1]);
      diag = up;
    }
  }
  return row[b.size()];
}

double f_measure(double precision, double recall, double beta) {
  const double b2 = beta * beta;
  const double denom = recall + b2 * precision;
  if (denom <= 0.0) return 0.0;
  return (1.0 + b2) * precision * recall / denom;
}

RougeScore rouge_l(std::string_view candidate, std::string_view reference, double beta) {
  const auto c = metric_tokenize(candidate);
  const auto r = metric_tokenize(reference);
  if (c.empty() || r.empty()) return {};
  const auto l = static_cast<double>(lcs_length(c, r));
  RougeScore s;
  s.precision = l / static_cast<double>(c.size());
  s.recall = l / static_cast<double>(r.size());
  s.f1 = f_measure(s.precision, s.recall, beta);
  return s;
}

namespace {

std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& tokens, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

RougeScore rouge_n(std::string_view candidate, std::string_view reference, int n) {
  if (n < 1) throw InvalidN("ROUGE-N requires n >= 1, got " + std::to_string(n));
  const auto c = metric_tokenize(candidate);
  const auto r = metric_tokenize(reference);
  const auto un = static_cast<std::size_t>(n);
  if (c.size() < un || r.size() < un) return {};
  const auto cc = ngram_counts(c, un);
  const auto rc = ngram_counts(r, un);
  std::size_t overlap = 0;
  // Merge walk over the two sorted maps.
  auto ci = cc.begin();
  auto ri = rc.begin();
  while (ci != cc.end() && ri != rc.end()) {
    if (ci->first < ri->first) {
      ++ci;
    } else if (ri->first < ci->first) {
      ++ri;
    } else {
      overlap += std::min(ci->second, ri->second);
      ++ci;
      ++ri;
    }
  }
  RougeScore s;
  s.precision = static_cast<double>(overlap) / static_cast<double>(c.size() - un + 1);
  s.recall = static_cast<double>(overlap) / static_cast<double>(r.size() - un + 1);
  s.f1 = f_measure(s.precision, s.recall);
  return s;
}

std::vector<std::vector<Vector>> EmbeddingProvider::embed_batch(const std::vector<std::vector<std::string>>& batch) const {
  std::vector<std::vector<Vector>> out;
  out.reserve(batch.size());
  for (const auto& tokens : batch) out.push_back(embed(tokens));
  return out;
}

OneHotEmbedder::OneHotEmbedder(std::size_t dimension)
    : dimension_(dimension), id_("onehot/" + std::to_string(dimension)) {}

std::vector<Vector> OneHotEmbedder::embed(std::span<const std::string> tokens) const {
  std::lock_guard lock(mutex_);
  std::vector<Vector> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) {
    auto [it, inserted] = axes_.try_emplace(t, axes_.size());
    if (it->second >= dimension_) {
      axes_.erase(it);
      throw DimensionMismatch("one-hot embedder out of axes (dimension " + std::to_string(dimension_) + ")");
    }
    Vector v(dimension_, 0.0);
    v[it->second] = 1.0;
    out.push_back(std::move(v));
  }
  return out;
}

HashedEmbedder::HashedEmbedder(std::size_t dimension, std::uint64_t seed, bool nonnegative)
    : dimension_(dimension),
      seed_(seed),
      nonnegative_(nonnegative),
      id_("hashed/" + std::to_string(dimension) + "/" + std::to_string(seed) + (nonnegative ? "/nonneg" : "")) {}

std::vector<Vector> HashedEmbedder::embed(std::span<const std::string> tokens) const {
  std::vector<Vector> out;
  out.reserve(tokens.size());
  std::uniform_real_distribution<double> dist(nonnegative_ ? 0.0 : -1.0, 1.0);
  for (const auto& t : tokens) {
    std::mt19937_64 rng(stable_hash64(seed_, t));
    Vector v(dimension_);
    for (auto& x : v) x = dist(rng);
    out.push_back(std::move(v));
  }
  return out;
}

namespace {

std::vector<Vector> normalized(std::span<const Vector> vs, std::size_t& dim, const char* side) {
  std::vector<Vector> out;
  out.reserve(vs.size());
  for (const auto& v : vs) {
    if (dim == 0) dim = v.size();
    if (v.size() != dim || dim == 0) throw DimensionMismatch(std::string("inconsistent vector size on ") + side + " side");
    double norm2 = 0.0;
    for (const double x : v) {
      if (!std::isfinite(x)) throw DimensionMismatch(std::string("non-finite embedding component on ") + side + " side");
      norm2 += x * x;
    }
    if (norm2 == 0.0) throw ZeroVector(std::string("zero embedding vector on ") + side + " side");
    const double inv = 1.0 / std::sqrt(norm2);
    Vector u(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) u[k] = v[k] * inv;
    out.push_back(std::move(u));
  }
  return out;
}

double weight_of(const IdfWeights* idf, const std::string& token) {
  if (!idf) return 1.0;
  const auto it = idf->find(token);
  return it == idf->end() ? 1.0 : it->second;
}

double weighted_mean(std::span<const std::string> tokens, const std::vector<double>& best, const IdfWeights* idf) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const double w = weight_of(idf, tokens[i]);
    num += w * best[i];
    den += w;
  }
  return den > 0.0 ? num / den : 0.0;
}

}  // namespace

BertScoreTriple bertscore_from_vectors(std::span<const std::string> cand_tokens, std::span<const Vector> cand,
                                       std::span<const std::string> ref_tokens, std::span<const Vector> ref,
                                       const IdfWeights* idf) {
  if (cand_tokens.empty() || ref_tokens.empty()) throw EmptyInput("BERTScore needs at least one token on each side");
  if (cand.size() != cand_tokens.size() || ref.size() != ref_tokens.size()) {
    throw DimensionMismatch("embedder returned a vector count different from the token count");
  }
  std::size_t dim = 0;
  const auto cu = normalized(cand, dim, "candidate");
  const auto ru = normalized(ref, dim, "reference");

  std::vector<double> best_c(cu.size(), -1.0);
  std::vector<double> best_r(ru.size(), -1.0);
  for (std::size_t i = 0; i < cu.size(); ++i) {
    for (std::size_t j = 0; j < ru.size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) s += cu[i][k] * ru[j][k];
      best_c[i] = std::max(best_c[i], s);
      best_r[j] = std::max(best_r[j], s);
    }
  }
  BertScoreTriple t;
  t.precision = weighted_mean(cand_tokens, best_c, idf);
  t.recall = weighted_mean(ref_tokens, best_r, idf);
  t.f1 = (t.precision + t.recall) > 0.0 ? 2.0 * t.precision * t.recall / (t.precision + t.recall) : 0.0;
  return t;
}

BertScoreTriple bertscore(std::string_view candidate, std::string_view reference, const EmbeddingProvider& embedder,
                          const IdfWeights* idf) {
  const auto c = metric_tokenize(candidate);
  const auto r = metric_tokenize(reference);
  if (c.empty() || r.empty()) throw EmptyInput("BERTScore needs at least one token on each side");
  const auto vecs = embedder.embed_batch({c, r});
  if (vecs.size() != 2) throw DimensionMismatch("embedder returned a batch of the wrong size");
  return bertscore_from_vectors(c, vecs[0], r, vecs[1], idf);
}

PairScores score_pair(const ScoreInput& input, const EmbeddingProvider* embedder, const ScoreOptions& options) {
  PairScores row;
  row.record_id = input.record_id;
  row.rouge1 = rouge_n(input.generated, input.reference, 1);
  row.rouge2 = rouge_n(input.generated, input.reference, 2);
  row.rouge_l = rouge_l(input.generated, input.reference, options.rouge_l_beta);
  if (embedder) row.bert = bertscore(input.generated, input.reference, *embedder, options.idf);
  return row;
}

CorpusScores score_corpus(std::span<const ScoreInput> pairs, const EmbeddingProvider* embedder,
                          const ScoreOptions& options) {
  if (pairs.empty()) throw EmptyCorpus("no pairs to score");
  CorpusScores out;
  out.rows.resize(pairs.size());
  parallel_for(pairs.size(), options.threads, [&](std::size_t i) { out.rows[i] = score_pair(pairs[i], embedder, options); });

  const auto n = static_cast<double>(pairs.size());
  CorpusMeans m;
  BertScoreTriple bert_sum;
  for (const auto& r : out.rows) {
    m.rouge1_f1 += r.rouge1.f1;
    m.rouge2_f1 += r.rouge2.f1;
    m.rouge_l_p += r.rouge_l.precision;
    m.rouge_l_r += r.rouge_l.recall;
    m.rouge_l_f1 += r.rouge_l.f1;
    if (r.bert) {
      bert_sum.precision += r.bert->precision;
      bert_sum.recall += r.bert->recall;
      bert_sum.f1 += r.bert->f1;
    }
  }
  m.rouge1_f1 /= n;
  m.rouge2_f1 /= n;
  m.rouge_l_p /= n;
  m.rouge_l_r /= n;
  m.rouge_l_f1 /= n;
  if (embedder) m.bert = BertScoreTriple{bert_sum.precision / n, bert_sum.recall / n, bert_sum.f1 / n};
  out.means = m;
  return out;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.8f", v);
  return buf;
}

}  // namespace

std::string scores_csv_header() { return "record_id,rouge1_f1,rouge2_f1,rougeL_p,rougeL_r,rougeL_f1,bert_p,bert_r,bert_f1"; }

std::string scores_csv_row(const PairScores& row) {
  std::string s = csv_field(row.record_id);
  for (const double v : {row.rouge1.f1, row.rouge2.f1, row.rouge_l.precision, row.rouge_l.recall, row.rouge_l.f1}) {
    s += ',';
    s += num(v);
  }
  if (row.bert) {
    for (const double v : {row.bert->precision, row.bert->recall, row.bert->f1}) {
      s += ',';
      s += num(v);
    }
  } else {
    s += ",,,";
  }
  return s;
}

void write_scores_csv(std::span<const PairScores> rows, const fs::path& path) {
  AtomicOutput out(path);
  out.stream() << scores_csv_header() << '\n';
  for (const auto& r : rows) out.stream() << scores_csv_row(r) << '\n';
  out.commit();
}

}  // namespace radprep::metrics
