#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "condenser/io_util.hpp"
#include "condenser/retrieval.hpp"

using namespace condenser;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "condenser_retrieval_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Brute force: score every row, full sort by (score desc, id asc).
std::vector<SearchHit> brute_force(const std::vector<std::string>& ids, const std::vector<double>& flat,
                                   std::size_t dim, const std::vector<double>& q, std::size_t k) {
  std::vector<SearchHit> all;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) s += flat[i * dim + j] * q[j];
    all.push_back({ids[i], s});
  }
  std::sort(all.begin(), all.end(), [](const SearchHit& a, const SearchHit& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

ModelConfig tiny_config(std::size_t vocab) {
  ModelConfig c;
  c.early_layers = 1;
  c.late_layers = 1;
  c.head_layers = 1;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.vocab_size = vocab;
  c.max_position = 16;
  c.dropout_rate = 0.0;
  return c;
}

}  // namespace

TEST(DenseIndex, QueryEqualToStoredRowComesFirst) {
  DenseIndex index(3, {"a", "b", "c"}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  std::vector<double> q{0, 1, 0};
  auto hits = index.search(q, 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].id, "b");
  EXPECT_EQ(hits[0].score, 1.0);
}

TEST(DenseIndex, ZeroQueryReturnsIdsAscending) {
  DenseIndex index(2, {"z", "m", "a", "q"}, {1, 2, 3, 4, 5, 6, 7, 8});
  std::vector<double> q{0, 0};
  auto hits = index.search(q, 10);
  ASSERT_EQ(hits.size(), 4u);
  EXPECT_EQ(hits[0].id, "a");
  EXPECT_EQ(hits[1].id, "m");
  EXPECT_EQ(hits[2].id, "q");
  EXPECT_EQ(hits[3].id, "z");
  for (const auto& h : hits) EXPECT_EQ(h.score, 0.0);
}

TEST(DenseIndex, MatchesBruteForceOnRandomIndex) {
  std::mt19937_64 gen(11);
  std::normal_distribution<double> normal;
  const std::size_t n = 200, d = 16;
  std::vector<std::string> ids;
  std::vector<double> flat;
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back("p" + std::to_string(i));
    for (std::size_t j = 0; j < d; ++j) flat.push_back(normal(gen));
  }
  DenseIndex index(d, ids, flat);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> q(d);
    for (auto& v : q) v = normal(gen);
    EXPECT_EQ(index.search(q, 25), brute_force(ids, flat, d, q, 25));
  }
}

TEST(DenseIndex, MatchesBruteForceWithManyTies) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + gen() % 300, d = 1 + gen() % 8, k = 1 + gen() % 40;
    std::vector<std::string> ids;
    std::vector<double> flat;
    for (std::size_t i = 0; i < n; ++i) {
      ids.push_back("id" + std::to_string(gen() % 100000) + "_" + std::to_string(i));
      for (std::size_t j = 0; j < d; ++j) flat.push_back(static_cast<double>(gen() % 3) - 1.0);
    }
    std::vector<double> q(d);
    for (auto& v : q) v = static_cast<double>(gen() % 3) - 1.0;
    DenseIndex index(d, ids, flat);
    EXPECT_EQ(index.search(q, k), brute_force(ids, flat, d, q, k)) << "trial " << trial;
  }
}

TEST(DenseIndex, Errors) {
  EXPECT_THROW(DenseIndex(2, {"a", "a"}, {1, 2, 3, 4}), Error);
  EXPECT_THROW(DenseIndex(2, {"a"}, {1, 2, 3}), ShapeError);
  DenseIndex index(2, {"a"}, {1, 2});
  std::vector<double> q3{1, 2, 3}, q2{1, 2};
  EXPECT_THROW(index.search(q3, 1), ShapeError);
  EXPECT_THROW(index.search(q2, 0), Error);
}

TEST(DenseIndex, EmptyIndexReturnsNoHits) {
  DenseIndex index(4, {}, {});
  std::vector<double> q{1, 2, 3, 4};
  EXPECT_TRUE(index.search(q, 5).empty());
}

TEST(DenseIndex, SaveLoadRoundTrip) {
  DenseIndex index(2, {"b", "a"}, {0.1, -2.5, 1e-300, 7});
  auto path = temp_path("index.bin");
  index.save(path);
  EXPECT_EQ(DenseIndex::load(path), index);
}

TEST(DenseIndex, TruncatedFileIsFormatError) {
  DenseIndex index(2, {"b", "a"}, {0.1, -2.5, 3, 7});
  auto path = temp_path("index_trunc.bin");
  index.save(path);
  const auto bytes = io::read_file(path);
  for (std::size_t cut = 0; cut < bytes.size(); ++cut) {
    io::write_atomic(path, std::string_view(bytes).substr(0, cut));
    EXPECT_THROW(DenseIndex::load(path), FormatError) << "cut at " << cut;
  }
  io::write_atomic(path, bytes + "x");
  EXPECT_THROW(DenseIndex::load(path), FormatError);
}

TEST(BuildIndex, OrderIndependentAndDeterministic) {
  std::vector<Passage> passages{{"p1", "red green blue"},
                                {"p2", "green green"},
                                {"p3", "blue red red red yellow"},
                                {"p4", "yellow"}};
  std::vector<std::string> corpus;
  for (const auto& p : passages) corpus.push_back(p.text);
  auto vocab = text::Vocabulary::build(corpus);
  Encoder encoder(tiny_config(vocab.size()), 3);
  auto a = build_index(encoder, vocab, passages, 16, 2);
  std::reverse(passages.begin(), passages.end());
  auto b = build_index(encoder, vocab, passages, 16, 3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 4u);
  EXPECT_EQ(a.dim(), 16u);

  passages.push_back({"p2", "dup"});
  EXPECT_THROW(build_index(encoder, vocab, passages, 16), Error);
  EXPECT_TRUE(build_index(encoder, vocab, {}, 16).empty());
}

TEST(EncodeTexts, BatchSizeDoesNotChangeVectors) {
  std::vector<std::string> texts{"a b c", "a", "c c c c b", "b a"};
  auto vocab = text::Vocabulary::build(texts);
  Encoder encoder(tiny_config(vocab.size()), 9);
  auto one = encode_texts(encoder, vocab, texts, 16, 1);
  auto all = encode_texts(encoder, vocab, texts, 16, 4);
  ASSERT_EQ(one.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < one[i].size(); ++j) EXPECT_NEAR(one[i][j], all[i][j], 1e-12);
}

TEST(TopkHit, Examples) {
  std::vector<std::string> ranking;
  for (int i = 1; i <= 30; ++i) ranking.push_back("d" + std::to_string(i));
  EXPECT_EQ(topk_hit(ranking, {"d1"}, 20), 1.0);
  EXPECT_EQ(topk_hit(ranking, {"d21"}, 20), 0.0);

  condenser::Run run{{"q1", {{"a", 1}}}, {"q2", {{"b", 1}}}, {"q3", {{"c", 1}}}};
  Qrels qrels{{"q1", {"a"}}, {"q2", {"x"}}, {"q3", {"c"}}};
  EXPECT_NEAR(mean_metric(run, qrels, Metric::kTopkHit, 20), 2.0 / 3.0, 1e-12);
}

TEST(MrrAtK, Examples) {
  EXPECT_DOUBLE_EQ(mrr_at_k({"x", "y", "r"}, {"r"}, 10), 1.0 / 3.0);
  EXPECT_EQ(mrr_at_k({"x", "y", "r"}, {"r"}, 2), 0.0);
  condenser::Run run{{"q1", {{"r", 4}, {"x", 3}}}, {"q2", {{"a", 4}, {"b", 3}, {"c", 2}, {"r", 1}}}};
  Qrels qrels{{"q1", {"r"}}, {"q2", {"r"}}};
  EXPECT_NEAR(mean_metric(run, qrels, Metric::kMrr, 10), 0.625, 1e-12);
}

TEST(RecallAtK, Examples) {
  EXPECT_EQ(recall_at_k({"a", "b"}, {"a", "b"}, 10), 1.0);
  EXPECT_EQ(recall_at_k({"a", "x"}, {"a", "b"}, 10), 0.5);
  EXPECT_NEAR(recall_at_k({"a", "x", "c", "y"}, {"a", "b", "c"}, 4), 2.0 / 3.0, 1e-12);
}

TEST(NdcgAtK, Examples) {
  EXPECT_EQ(ndcg_at_k({"r", "x"}, {"r"}, 10), 1.0);
  const long double oracle = std::log2(2.0L) / std::log2(3.0L);
  EXPECT_NEAR(ndcg_at_k({"x", "r"}, {"r"}, 10), static_cast<double>(oracle), 1e-12);
  EXPECT_NEAR(ndcg_at_k({"x", "r"}, {"r"}, 10), 0.6309, 1e-4);
  EXPECT_EQ(ndcg_at_k({"x", "y"}, {"r"}, 10), 0.0);
}

TEST(NdcgAtK, InvariantToRelabeling) {
  std::vector<std::string> ranking{"a", "b", "c", "d", "e"};
  std::vector<std::string> renamed{"v", "w", "x", "y", "z"};
  EXPECT_EQ(ndcg_at_k(ranking, {"b", "e", "q"}, 5), ndcg_at_k(renamed, {"w", "z", "k"}, 5));
}

TEST(Metrics, BoundsAndOrderingProperties) {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> ranking;
    std::set<std::string> relevant;
    for (int i = 0; i < 15; ++i) ranking.push_back("d" + std::to_string(gen() % 30));
    const int n_rel = 1 + static_cast<int>(gen() % 5);
    for (int i = 0; i < n_rel; ++i) relevant.insert("d" + std::to_string(gen() % 30));
    double previous_recall = 0.0;
    for (std::size_t k = 1; k <= 15; ++k) {
      const double hit = topk_hit(ranking, relevant, k), mrr = mrr_at_k(ranking, relevant, k);
      const double recall = recall_at_k(ranking, relevant, k), ndcg = ndcg_at_k(ranking, relevant, k);
      for (double v : {hit, mrr, recall, ndcg}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0 + 1e-12);
      }
      EXPECT_LE(mrr, hit);
      EXPECT_GE(recall, previous_recall);
      previous_recall = recall;
    }
  }
}

TEST(MeanMetric, MissingQueryScoresZero) {
  condenser::Run run{{"q1", {{"a", 1}}}};
  Qrels qrels{{"q1", {"a"}}, {"q2", {"b"}}};
  EXPECT_EQ(mean_metric(run, qrels, Metric::kMrr, 10), 0.5);
  EXPECT_THROW(mean_metric(run, qrels, Metric::kMrr, 0), Error);
}

TEST(ParseMetric, Names) {
  EXPECT_EQ(parse_metric("mrr@10"), std::make_pair(Metric::kMrr, std::size_t{10}));
  EXPECT_EQ(parse_metric("recall@1000"), std::make_pair(Metric::kRecall, std::size_t{1000}));
  EXPECT_EQ(parse_metric("ndcg@10"), std::make_pair(Metric::kNdcg, std::size_t{10}));
  EXPECT_EQ(parse_metric("top20"), std::make_pair(Metric::kTopkHit, std::size_t{20}));
  EXPECT_EQ(parse_metric("hit@100"), std::make_pair(Metric::kTopkHit, std::size_t{100}));
  EXPECT_THROW(parse_metric("map@10"), Error);
  EXPECT_THROW(parse_metric("mrr"), Error);
  EXPECT_THROW(parse_metric("mrr@x"), Error);
}

TEST(Spearman, Examples) {
  EXPECT_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_EQ(spearman({1, 2, 3, 4}, {1, 3, 2, 4}), 0.8);
  // rank-difference formula, no ties: 1 - 6 sum d^2 / (n (n^2 - 1))
  const double d2 = 0 + 1 + 1 + 0;
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {1, 3, 2, 4}), 1.0 - 6.0 * d2 / (4.0 * 15.0), 1e-15);
}

TEST(Spearman, TiesUseAverageRanks) {
  EXPECT_EQ(average_ranks({5, 1, 5, 3}), (std::vector<double>{3.5, 1, 3.5, 2}));
  // Pearson on [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]
  const double r = spearman({1, 2, 2, 3}, {1, 2, 3, 4});
  const double mx = 2.5;
  const std::vector<double> x{1, 2.5, 2.5, 4}, y{1, 2, 3, 4};
  double c = 0, vx = 0, vy = 0;
  for (int i = 0; i < 4; ++i) {
    c += (x[i] - mx) * (y[i] - mx);
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - mx) * (y[i] - mx);
  }
  EXPECT_NEAR(r, c / std::sqrt(vx * vy), 1e-15);
}

TEST(Spearman, Errors) {
  EXPECT_THROW(spearman({1, 2}, {1}), ShapeError);
  EXPECT_THROW(spearman({1}, {1}), Error);
  EXPECT_THROW(spearman({1, 1, 1}, {1, 2, 3}), NumericError);
}

TEST(PairwiseAccuracy, Examples) {
  std::vector<std::vector<double>> a{{0, 0}, {1, 1}}, p{{0, 0}, {1, 1}}, n{{1, 0}, {3, 3}};
  EXPECT_EQ(pairwise_accuracy(a, p, n), 1.0);
  std::vector<std::vector<double>> far{{5, 5}, {9, 9}};
  EXPECT_EQ(pairwise_accuracy(a, far, n), 0.0);
  EXPECT_THROW(pairwise_accuracy(a, p, {{1, 0}}), ShapeError);
}

TEST(PairwiseAccuracy, RandomEncoderOnSymmetricTripletsIsChance) {
  std::vector<std::string> words{"alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"};
  auto vocab = text::Vocabulary::from_tokens(words);
  Encoder encoder(tiny_config(vocab.size()), 21);
  std::mt19937_64 gen(2);
  auto doc = [&] {
    std::string s;
    const int len = 2 + static_cast<int>(gen() % 5);
    for (int i = 0; i < len; ++i) s += (i ? " " : "") + words[gen() % words.size()];
    return s;
  };
  std::vector<Triplet> triplets;
  for (int i = 0; i < 2000; ++i) triplets.push_back({doc(), doc(), doc()});
  const double acc = pairwise_accuracy(encoder, vocab, triplets, 16);
  EXPECT_NEAR(acc, 0.5, 0.05);
}

TEST(QrelsAndRuns, FileRoundTrip) {
  Qrels qrels{{"q1", {"a", "b"}}, {"q2", {"c"}}};
  auto qpath = temp_path("qrels.tsv");
  write_qrels(qpath, qrels);
  EXPECT_EQ(read_qrels(qpath), qrels);

  condenser::Run run{{"q1", {{"b", 2.5}, {"a", 0.125}}}, {"q2", {{"c", -1.0}}}};
  auto rpath = temp_path("run.trec");
  write_run(rpath, run, "test");
  EXPECT_EQ(read_run(rpath), run);
  EXPECT_EQ(io::read_lines(rpath)[0], "q1 Q0 b 1 2.5 test");

  io::write_atomic(qpath, "q1 only\n");
  EXPECT_THROW(read_qrels(qpath), FormatError);
  io::write_atomic(rpath, "q1 Q0 a\n");
  EXPECT_THROW(read_run(rpath), FormatError);
}

TEST(MineHardNegatives, Examples) {
  DenseIndex index(1, {"a", "b", "c"}, {3, 2, 1});
  std::vector<std::pair<std::string, std::vector<double>>> queries{{"q1", {1.0}}, {"q2", {1.0}},
                                                                   {"q3", {1.0}}};
  Qrels qrels{{"q1", {"a", "b"}}, {"q2", {"a"}}};
  auto mined = mine_hard_negatives(index, queries, qrels, 2);
  EXPECT_TRUE(mined.at("q1").empty());
  EXPECT_EQ(mined.at("q2"), std::vector<std::string>{"b"});
  EXPECT_FALSE(mined.count("q3"));
}

TEST(MineHardNegatives, NeverReturnsJudgedPassages) {
  std::mt19937_64 gen(8);
  std::normal_distribution<double> normal;
  std::vector<std::string> ids;
  std::vector<double> flat;
  for (int i = 0; i < 60; ++i) {
    ids.push_back("p" + std::to_string(i));
    for (int j = 0; j < 4; ++j) flat.push_back(normal(gen));
  }
  DenseIndex index(4, ids, flat);
  std::vector<std::pair<std::string, std::vector<double>>> queries;
  Qrels qrels;
  for (int q = 0; q < 30; ++q) {
    std::vector<double> v(4);
    for (auto& x : v) x = normal(gen);
    const auto id = "q" + std::to_string(q);
    queries.push_back({id, v});
    for (int r = 0; r < 3; ++r) qrels[id].insert(ids[gen() % ids.size()]);
  }
  for (const auto& [q, negs] : mine_hard_negatives(index, queries, qrels, 10)) {
    for (const auto& n : negs) EXPECT_FALSE(qrels.at(q).count(n));
    EXPECT_GE(negs.size(), 7u);
  }
}

TEST(AppendNegatives, DeduplicatesAndSkipsPositive) {
  std::vector<TrainingPair> pairs{{"q1", "text", "p", {"n1"}}, {"q2", "text", "p2", {}}};
  auto out = append_negatives(pairs, {{"q1", {"n1", "p", "n2"}}});
  EXPECT_EQ(out[0].negative_ids, (std::vector<std::string>{"n1", "n2"}));
  EXPECT_TRUE(out[1].negative_ids.empty());
}
