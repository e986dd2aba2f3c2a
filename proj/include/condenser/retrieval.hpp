#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "condenser/encoder.hpp"
#include "condenser/text.hpp"
#include "condenser/training.hpp"

namespace condenser {

struct SearchHit {
  std::string id;
  double score = 0.0;

  bool operator==(const SearchHit&) const = default;
};

/// Exact flat inner-product index. Rows are kept sorted by passage id, so the
/// content does not depend on insertion order.
class DenseIndex {
 public:
  DenseIndex() = default;
  /// `vectors` is row-major [ids.size(), dim]. Duplicate ids throw.
  DenseIndex(std::size_t dim, std::vector<std::string> ids, std::vector<double> vectors);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  bool empty() const { return ids_.empty(); }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const double> row(std::size_t i) const;

  /// Top min(k, size) rows by inner product, score descending, ties by
  /// ascending id. k must be at least 1.
  std::vector<SearchHit> search(std::span<const double> query, std::size_t k) const;

  void save(const std::filesystem::path& path) const;
  static DenseIndex load(const std::filesystem::path& path);

  bool operator==(const DenseIndex&) const = default;

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<double> vectors_;
};

/// CLS vectors for `texts`, encoded in batches without recording gradients.
std::vector<std::vector<double>> encode_texts(const Encoder& encoder, const text::Vocabulary& vocab,
                                              const std::vector<std::string>& texts,
                                              std::size_t max_len, std::size_t batch_size = 32);

DenseIndex build_index(const Encoder& encoder, const text::Vocabulary& vocab,
                       const std::vector<Passage>& passages, std::size_t max_len,
                       std::size_t batch_size = 32);

inline std::vector<SearchHit> search_topk(const DenseIndex& index, std::span<const double> query,
                                          std::size_t k) {
  return index.search(query, k);
}

/// query id -> relevant passage ids (binary relevance).
using Qrels = std::map<std::string, std::set<std::string>>;
/// query id -> ranked hits.
using Run = std::map<std::string, std::vector<SearchHit>>;

/// "query_id<TAB>passage_id" lines.
Qrels read_qrels(const std::filesystem::path& path);
void write_qrels(const std::filesystem::path& path, const Qrels& qrels);

/// TREC format: "query_id Q0 passage_id rank score tag".
void write_run(const std::filesystem::path& path, const Run& run, const std::string& tag);
Run read_run(const std::filesystem::path& path);

/// Searches every query vector; queries are (id, vector) pairs.
Run search_all(const DenseIndex& index,
               const std::vector<std::pair<std::string, std::vector<double>>>& queries, std::size_t k);

/// Top-`depth` hits minus relevant ids, in rank order. Queries without
/// judgments are skipped with a warning.
std::map<std::string, std::vector<std::string>> mine_hard_negatives(
    const DenseIndex& index, const std::vector<std::pair<std::string, std::vector<double>>>& queries,
    const Qrels& qrels, std::size_t depth);

/// Appends mined negatives (deduplicated, positive excluded) to each pair.
std::vector<TrainingPair> append_negatives(std::vector<TrainingPair> pairs,
                                           const std::map<std::string, std::vector<std::string>>& mined);

// Per-query metrics over a ranked list of passage ids.
double topk_hit(const std::vector<std::string>& ranking, const std::set<std::string>& relevant,
                std::size_t k);
double mrr_at_k(const std::vector<std::string>& ranking, const std::set<std::string>& relevant,
                std::size_t k);
double recall_at_k(const std::vector<std::string>& ranking, const std::set<std::string>& relevant,
                   std::size_t k);
double ndcg_at_k(const std::vector<std::string>& ranking, const std::set<std::string>& relevant,
                 std::size_t k);

enum class Metric { kTopkHit, kMrr, kRecall, kNdcg };

/// Mean of a per-query metric over all judged queries; a judged query missing
/// from the run scores 0.
double mean_metric(const Run& run, const Qrels& qrels, Metric metric, std::size_t k);

/// Parses names such as "mrr@10", "recall@1000", "ndcg@10", "top20" or "hit@20".
std::pair<Metric, std::size_t> parse_metric(const std::string& name);

/// Spearman rank correlation; ties get their average rank.
double spearman(const std::vector<double>& predicted, const std::vector<double>& gold);
std::vector<double> average_ranks(const std::vector<double>& values);

/// Fraction of triplets with |a - p| < |a - n|.
double pairwise_accuracy(const std::vector<std::vector<double>>& anchors,
                         const std::vector<std::vector<double>>& positives,
                         const std::vector<std::vector<double>>& negatives);
double pairwise_accuracy(const Encoder& encoder, const text::Vocabulary& vocab,
                         const std::vector<Triplet>& triplets, std::size_t max_len);

}  // namespace condenser
