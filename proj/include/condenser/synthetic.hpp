#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "condenser/retrieval.hpp"
#include "condenser/training.hpp"

namespace condenser {

/// Clustered topical text. Every topic owns a private word list; documents mix
/// topic words with words shared by all topics. A query is relevant to every
/// passage of its topic.
struct SyntheticOptions {
  std::size_t topics = 16;
  std::size_t topic_words = 24;
  std::size_t shared_words = 48;
  std::size_t passages_per_topic = 8;
  std::size_t documents_per_topic = 16;  // extra unlabeled pre-training text
  std::size_t min_length = 10;
  std::size_t max_length = 20;
  double topic_word_prob = 0.45;
  std::size_t query_length = 4;
  std::size_t train_pairs = 32;
  std::size_t test_queries_per_topic = 4;
  std::size_t explicit_negatives = 3;
  std::uint64_t seed = 0;
};

struct SyntheticDataset {
  std::vector<std::string> documents;  // pre-training corpus, passages included
  std::vector<Passage> passages;
  std::vector<TrainingPair> train_pairs;
  std::vector<Passage> test_queries;
  Qrels test_qrels;
  Qrels train_qrels;
  std::vector<ScoredPair> scored_pairs;
  std::vector<Triplet> triplets;
};

SyntheticDataset make_synthetic_dataset(const SyntheticOptions& options);

/// corpus.txt, passages.tsv, train_pairs.tsv, train_qrels.tsv, queries.tsv,
/// qrels.tsv, scored_pairs.tsv, triplets.tsv
void write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticDataset& data);

}  // namespace condenser
