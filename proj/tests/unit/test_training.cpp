#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "condenser/checkpoint.hpp"
#include "condenser/io_util.hpp"
#include "condenser/retrieval.hpp"
#include "condenser/synthetic.hpp"
#include "condenser/training.hpp"
#include "support/gradcheck.hpp"

using namespace condenser;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "condenser_training_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Tensor rows(std::size_t n, std::size_t d, const std::vector<double>& v) { return Tensor({n, d}, v); }
Tensor vec(const std::vector<double>& v) { return Tensor({v.size()}, v); }

ModelConfig small_config(std::size_t vocab, double dropout = 0.0) {
  ModelConfig c;
  c.early_layers = 1;
  c.late_layers = 1;
  c.head_layers = 1;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.vocab_size = vocab;
  c.max_position = 24;
  c.dropout_rate = dropout;
  return c;
}

struct SmallCorpus {
  std::vector<std::string> texts;
  text::Vocabulary vocab;
  std::vector<std::vector<int>> docs;

  SmallCorpus() {
    SyntheticOptions so;
    so.topics = 4;
    so.topic_words = 8;
    so.shared_words = 10;
    so.passages_per_topic = 2;
    so.documents_per_topic = 2;
    so.seed = 4;
    texts = make_synthetic_dataset(so).documents;
    vocab = text::Vocabulary::build(texts);
    docs = text::encode_all(texts, vocab, 16);
  }
};

std::vector<std::vector<double>> snapshot(const ParameterList& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

double max_abs_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

}  // namespace

TEST(ContrastiveLoss, EqualScoresGiveLogOnePlusL) {
  for (std::size_t l : {1u, 3u, 7u, 63u}) {
    std::vector<double> negs;
    for (std::size_t i = 0; i < l; ++i) negs.insert(negs.end(), {0.0, 1.0});
    auto loss = contrastive_loss(vec({1, 0}), vec({0, 1}), rows(l, 2, negs));
    EXPECT_NEAR(loss.item(), std::log(1.0 + static_cast<double>(l)), 1e-9);
  }
}

TEST(ContrastiveLoss, ClosedFormExample) {
  auto loss = contrastive_loss(vec({1, 0}), vec({1, 0}), rows(1, 2, {0, 1}));
  const long double e = std::exp(1.0L);
  const long double oracle = -std::log(e / (e + 1.0L));
  EXPECT_NEAR(loss.item(), static_cast<double>(oracle), 1e-12);
  EXPECT_NEAR(loss.item(), 0.3133, 1e-4);
}

TEST(ContrastiveLoss, DominantPositiveGivesZero) {
  auto loss = contrastive_loss(vec({100, 0}), vec({100, 0}), rows(2, 2, {0, 1, 0, -1}));
  EXPECT_NEAR(loss.item(), 0.0, 1e-12);
}

TEST(ContrastiveLoss, InvariantToNegativeOrder) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> normal;
  const std::size_t d = 6, l = 9;
  std::vector<double> q(d), p(d), n(l * d);
  for (auto* v : {&q, &p, &n})
    for (auto& x : *v) x = normal(gen);
  const double base = contrastive_loss(vec(q), vec(p), rows(l, d, n)).item();
  std::vector<std::size_t> order(l);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(order.begin(), order.end(), gen);
    std::vector<double> permuted;
    for (auto i : order) permuted.insert(permuted.end(), n.begin() + i * d, n.begin() + (i + 1) * d);
    EXPECT_NEAR(contrastive_loss(vec(q), vec(p), rows(l, d, permuted)).item(), base, 1e-12);
  }
}

TEST(ContrastiveLoss, NegativeAtMinusInfinityIsNoOp) {
  const double base = contrastive_nll(1.5, {0.2, -0.7});
  EXPECT_NEAR(contrastive_nll(1.5, {0.2, -0.7, -INFINITY}), base, 1e-9);
  EXPECT_NEAR(contrastive_nll(0.0, {0.0, 0.0, 0.0}), std::log(4.0), 1e-12);
  EXPECT_THROW(contrastive_nll(1.0, {NAN}), NumericError);
  EXPECT_THROW(contrastive_nll(INFINITY, {0.0}), NumericError);
  // Same number from the tensor path.
  auto loss = contrastive_loss(vec({1, 2}), vec({0.5, 0.5}), rows(2, 2, {0.1, 0.0, -0.3, 0.2}));
  EXPECT_NEAR(loss.item(), contrastive_nll(1.5, {0.1, 0.1}), 1e-12);
}

TEST(ContrastiveLoss, InBatchPassagesExtendThePool) {
  auto q = vec({1, 0}), p = vec({0, 1});
  auto with = contrastive_loss(q, p, rows(1, 2, {0, 1}), rows(2, 2, {0, 1, 0, 1}));
  EXPECT_NEAR(with.item(), std::log(4.0), 1e-12);
}

TEST(ContrastiveLoss, EmptyPoolIsZeroWithZeroGradient) {
  Tensor q({2}, {1, 2}, true), p({2}, {3, 4}, true);
  auto loss = contrastive_loss(q, p, Tensor());
  EXPECT_EQ(loss.item(), 0.0);
  loss.backward();
  for (double g : q.grad_or_zeros()) EXPECT_EQ(g, 0.0);
}

TEST(ContrastiveLoss, GradientMatchesFiniteDifferences) {
  Tensor q({4}, {0.3, -0.2, 0.5, 0.1}, true), p({4}, {0.2, 0.4, -0.1, 0.3}, true);
  Tensor n({3, 4}, {0.1, 0.0, 0.3, -0.4, 0.5, 0.2, -0.3, 0.1, -0.2, 0.6, 0.0, 0.2}, true);
  Tensor b({2, 4}, {0.3, 0.3, -0.1, 0.0, 0.2, -0.5, 0.4, 0.1}, true);
  auto results = condenser::testing::check_gradients([&] { return contrastive_loss(q, p, n, b); },
                                                     {{"q", q}, {"p", p}, {"n", n}, {"b", b}});
  for (const auto& r : results) EXPECT_LT(r.relative_error, 1e-7) << r.name;
}

TEST(ContrastiveLoss, ShapeErrors) {
  EXPECT_THROW(contrastive_loss(vec({1, 0}), vec({1, 0, 0}), Tensor()), ShapeError);
  EXPECT_THROW(contrastive_loss(vec({1, 0}), vec({1, 0}), rows(1, 3, {0, 0, 0})), ShapeError);
}

TEST(RegressionLoss, Examples) {
  EXPECT_NEAR(regression_loss(vec({1, 2}), vec({1, 2}), {1.0}).item(), 0.0, 1e-15);
  EXPECT_NEAR(regression_loss(vec({1, 0}), vec({0, 3}), {0.0}).item(), 0.0, 1e-15);
  // cos = 0.5
  EXPECT_NEAR(regression_loss(vec({1, 0}), vec({0.5, std::sqrt(0.75)}), {1.0}).item(), 0.25, 1e-12);
  EXPECT_THROW(regression_loss(vec({0, 0}), vec({1, 0}), {1.0}), NumericError);
  EXPECT_THROW(regression_loss(vec({1, 0}), vec({1, 0}), {1.0, 0.0}), ShapeError);
}

TEST(TripletLoss, Examples) {
  EXPECT_NEAR(triplet_loss(vec({0, 0}), vec({1, 1}), vec({1, 1}), 5.0).item(), 5.0, 1e-12);
  EXPECT_EQ(triplet_loss(vec({0, 0}), vec({1, 0}), vec({10, 0}), 5.0).item(), 0.0);
  EXPECT_EQ(triplet_loss(vec({0, 0}), vec({1, 0}), vec({0, 2}), 1.0).item(), 0.0);
  EXPECT_NEAR(triplet_loss(rows(2, 1, {0, 0}), rows(2, 1, {1, 2}), rows(2, 1, {1, 0.5}), 1.0).item(),
              (1.0 + 2.5) / 2.0, 1e-12);
  EXPECT_THROW(triplet_loss(vec({0}), vec({1}), vec({2}), 0.0), Error);
}

TEST(WeightDecayMask, ExemptsBiasesAndGains) {
  Encoder e(small_config(10), 1);
  auto params = e.parameters();
  auto mask = weight_decay_mask(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& n = params[i].name;
    const bool exempt = n.size() > 5 && (n.substr(n.size() - 5) == ".bias" || n.substr(n.size() - 5) == ".gain");
    EXPECT_EQ(mask[i], !exempt) << n;
  }
}

TEST(Pretrain, HeadLossDropsOverTwoHundredSteps) {
  // Fixed: synthetic seed 1, model seed 3, 50 documents, batch 10, lr 4e-3.
  SyntheticOptions so;
  so.seed = 1;
  auto data = make_synthetic_dataset(so);
  auto vocab = text::Vocabulary::build(data.documents);
  std::vector<std::string> corpus(data.documents.begin(), data.documents.begin() + 50);
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  PretrainOptions po;
  po.epochs = 40;
  po.micro_batch_size = 10;
  po.peak_lr = 4e-3;
  po.seed = 3;
  Pretrainer trainer(PretrainModel(mc, ModelKind::kCondenser, 3), text::encode_all(corpus, vocab, 32), po);
  ASSERT_EQ(trainer.total_steps(), 200u);
  auto logs = trainer.run();
  ASSERT_EQ(logs.size(), 200u);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) first += logs[i].head / 10.0;
  for (int i = 190; i < 200; ++i) last += logs[i].head / 10.0;
  std::cout << "head loss: first-10 mean " << first << ", last-10 mean " << last << "\n";
  EXPECT_LE(last, 0.8 * first);
  for (const auto& l : logs) EXPECT_NEAR(l.total, l.head + l.backbone, 1e-9);
}

TEST(Pretrain, AccumulationMatchesOneLargeBatch) {
  SmallCorpus c;
  std::vector<std::vector<int>> docs(c.docs.begin(), c.docs.begin() + 8);
  for (ModelKind kind : {ModelKind::kCondenser, ModelKind::kMlm}) {
    PretrainOptions big;
    big.micro_batch_size = 8;
    big.peak_lr = 1e-2;
    big.warmup_ratio = 0.0;
    big.seed = 6;
    PretrainOptions small = big;
    small.micro_batch_size = 2;
    small.accumulation_steps = 4;
    Pretrainer a(PretrainModel(small_config(c.vocab.size()), kind, 6), docs, big);
    Pretrainer b(PretrainModel(small_config(c.vocab.size()), kind, 6), docs, small);
    const auto la = a.train_step(), lb = b.train_step();
    EXPECT_NEAR(la.total, lb.total, 1e-9);
    EXPECT_EQ(la.masked, lb.masked);
    EXPECT_LT(max_abs_diff(snapshot(a.model().parameters()), snapshot(b.model().parameters())), 1e-6)
        << to_string(kind);
  }
}

TEST(Pretrain, ZeroEpochsLeavesInitialization) {
  SmallCorpus c;
  PretrainOptions po;
  po.epochs = 0;
  po.seed = 2;
  Pretrainer trainer(PretrainModel(small_config(c.vocab.size()), ModelKind::kCondenser, 2), c.docs, po);
  EXPECT_TRUE(trainer.run().empty());
  PretrainModel fresh(small_config(c.vocab.size()), ModelKind::kCondenser, 2);
  EXPECT_EQ(serialize_checkpoint(make_checkpoint(trainer.model())), serialize_checkpoint(make_checkpoint(fresh)));
}

TEST(Pretrain, SameSeedGivesIdenticalCheckpoints) {
  SmallCorpus c;
  PretrainOptions po;
  po.epochs = 2;
  po.micro_batch_size = 4;
  po.seed = 8;
  std::string bytes[2];
  for (auto& b : bytes) {
    Pretrainer t(PretrainModel(small_config(c.vocab.size(), 0.1), ModelKind::kCondenser, 8), c.docs, po);
    t.run();
    b = serialize_checkpoint(make_checkpoint(t.model()));
  }
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(Pretrain, ResumeMatchesUninterruptedRun) {
  SmallCorpus c;
  const auto config = small_config(c.vocab.size(), 0.1);
  PretrainOptions po;
  po.epochs = 3;
  po.micro_batch_size = 3;
  po.accumulation_steps = 2;
  po.peak_lr = 5e-3;
  po.seed = 12;
  Pretrainer full(PretrainModel(config, ModelKind::kCondenser, po.seed), c.docs, po);
  full.run();

  Pretrainer first(PretrainModel(config, ModelKind::kCondenser, po.seed), c.docs, po);
  first.run(full.total_steps() / 2 + 1);
  const auto path = temp_path("resume.state");
  save_train_state(first.state(), path);
  Pretrainer second(load_train_state(path), c.docs, config, ModelKind::kCondenser, po);
  EXPECT_EQ(second.step(), full.total_steps() / 2 + 1);
  second.run();
  EXPECT_TRUE(second.done());
  const auto a = snapshot(full.model().parameters()), b = snapshot(second.model().parameters());
  EXPECT_EQ(a, b);
  EXPECT_EQ(full.state().optimizer.first_moment, second.state().optimizer.first_moment);
}

TEST(Pretrain, ResumeWithDifferentConfigIsAnError) {
  SmallCorpus c;
  const auto config = small_config(c.vocab.size());
  PretrainOptions po;
  po.seed = 1;
  Pretrainer t(PretrainModel(config, ModelKind::kCondenser, 1), c.docs, po);
  t.train_step();
  auto state = t.state();
  PretrainOptions other = po;
  other.peak_lr = 2e-4;
  EXPECT_THROW(Pretrainer(state, c.docs, config, ModelKind::kCondenser, other), Error);
  auto bigger = config;
  bigger.ffn_dim = 64;
  EXPECT_THROW(Pretrainer(state, c.docs, bigger, ModelKind::kCondenser, po), Error);
  EXPECT_THROW(Pretrainer(state, c.docs, config, ModelKind::kMlm, po), Error);
  EXPECT_NO_THROW(Pretrainer(state, c.docs, config, ModelKind::kCondenser, po));
}

TEST(Pretrain, Errors) {
  SmallCorpus c;
  PretrainOptions po;
  EXPECT_THROW(Pretrainer(PretrainModel(small_config(c.vocab.size()), ModelKind::kCondenser, 1), {}, po),
               Error);
  po.micro_batch_size = 0;
  EXPECT_THROW(Pretrainer(PretrainModel(small_config(c.vocab.size()), ModelKind::kCondenser, 1), c.docs, po),
               Error);
}

// ---------------------------------------------------------------------------

TEST(RetrievalBatch, InBatchPoolSize) {
  std::vector<Passage> passages;
  for (int i = 0; i < 40; ++i) passages.push_back({"p" + std::to_string(i), "x"});
  std::vector<TrainingPair> pairs;
  for (int q = 0; q < 4; ++q)
    pairs.push_back({"q" + std::to_string(q), "x", "p" + std::to_string(q), {"p" + std::to_string(10 + q)}});
  FinetuneOptions fo;
  fo.passages_per_query = 8;
  fo.seed = 3;
  const std::size_t B = 4, negs = 7;
  auto rb = make_retrieval_batch(pairs, {0, 1, 2, 3}, passages, fo, 0);
  ASSERT_EQ(rb.passage_ids.size(), B * (1 + negs));
  const std::size_t cols = rb.passage_ids.size();
  for (std::size_t q = 0; q < B; ++q) {
    EXPECT_EQ(rb.passage_ids[rb.targets[q]], pairs[q].positive_id);
    std::size_t pool = 0;
    for (std::size_t c = 0; c < cols; ++c)
      if (rb.allowed[q * cols + c] && c != static_cast<std::size_t>(rb.targets[q])) ++pool;
    // Random fills may repeat another query's positive; that copy is dropped.
    std::size_t own_copies = 0;
    for (std::size_t c = 0; c < cols; ++c)
      if (c != static_cast<std::size_t>(rb.targets[q]) && rb.passage_ids[c] == pairs[q].positive_id) ++own_copies;
    EXPECT_EQ(pool + own_copies, B * (1 + negs) - 1);
  }

  fo.in_batch_negatives = false;
  auto own = make_retrieval_batch(pairs, {0, 1, 2, 3}, passages, fo, 0);
  for (std::size_t q = 0; q < B; ++q)
    EXPECT_EQ(std::count(own.allowed.begin() + q * cols, own.allowed.begin() + (q + 1) * cols, 1), 8);
}

TEST(RetrievalBatch, NegativesAreDeterministicPerEpoch) {
  std::vector<Passage> passages;
  for (int i = 0; i < 30; ++i) passages.push_back({"p" + std::to_string(i), "x"});
  std::vector<TrainingPair> pairs{{"q", "x", "p0", {}}};
  FinetuneOptions fo;
  fo.seed = 9;
  auto a = make_retrieval_batch(pairs, {0}, passages, fo, 1);
  auto b = make_retrieval_batch(pairs, {0}, passages, fo, 1);
  auto c = make_retrieval_batch(pairs, {0}, passages, fo, 2);
  EXPECT_EQ(a.passage_ids, b.passage_ids);
  EXPECT_NE(a.passage_ids, c.passage_ids);
}

TEST(RetrievalBatch, SingleQueryWithoutNegativesIsAnError) {
  std::vector<Passage> passages{{"p0", "x"}, {"p1", "y"}};
  std::vector<TrainingPair> pairs{{"q", "x", "p0", {}}};
  FinetuneOptions fo;
  fo.fill_random_negatives = false;
  EXPECT_THROW(make_retrieval_batch(pairs, {0}, passages, fo, 0), Error);
}

TEST(FinetuneRetriever, FirstLossEqualsContrastiveLossWithSevenNegatives) {
  std::vector<Passage> passages;
  const std::vector<std::string> texts{"red fox", "blue sky", "green tree", "fast car", "slow boat",
                                       "big house", "small cat", "old road"};
  for (std::size_t i = 0; i < texts.size(); ++i) passages.push_back({"p" + std::to_string(i), texts[i]});
  std::vector<TrainingPair> pairs{{"q", "red sky", "p0", {"p1", "p2", "p3", "p4", "p5", "p6", "p7"}}};
  std::vector<std::string> all(texts);
  all.push_back("red sky");
  auto vocab = text::Vocabulary::build(all);
  Encoder encoder(small_config(vocab.size()), 4);
  Encoder reference = encoder.clone();

  FinetuneOptions fo;
  fo.epochs = 1;
  fo.batch_size = 1;
  fo.max_len = 8;
  fo.fill_random_negatives = false;
  Retriever retriever(encoder);
  auto report = finetune_retriever(retriever, vocab, pairs, passages, fo);
  ASSERT_EQ(report.losses.size(), 1u);

  NoGradGuard no_grad;
  Tensor q = encode_cls(reference, vocab, {"red sky"}, 8);
  Tensor d = encode_cls(reference, vocab, texts, 8);
  const std::size_t dim = q.dim(1);
  auto dd = d.data();
  Tensor pos({dim}, {dd.begin(), dd.begin() + dim});
  Tensor negs({7, dim}, {dd.begin() + dim, dd.end()});
  EXPECT_NEAR(report.losses[0], contrastive_loss(ops::reshape(q, {dim}), pos, negs).item(), 1e-10);
}

TEST(FinetuneRetriever, AccumulationMatchesOneLargeBatch) {
  SyntheticOptions so;
  so.topics = 4;
  so.passages_per_topic = 4;
  so.train_pairs = 8;
  so.seed = 2;
  auto data = make_synthetic_dataset(so);
  auto vocab = text::Vocabulary::build(data.documents);
  FinetuneOptions fo;
  fo.epochs = 1;
  fo.batch_size = 8;
  fo.max_len = 24;
  fo.in_batch_negatives = false;
  fo.warmup_ratio = 0.0;
  fo.peak_lr = 1e-2;
  fo.seed = 3;
  Retriever a(Encoder(small_config(vocab.size()), 5));
  Retriever b(Encoder(small_config(vocab.size()), 5));
  auto ra = finetune_retriever(a, vocab, data.train_pairs, data.passages, fo);
  fo.accumulation_steps = 4;
  auto rb = finetune_retriever(b, vocab, data.train_pairs, data.passages, fo);
  EXPECT_NEAR(ra.losses[0], rb.losses[0], 1e-9);
  EXPECT_LT(max_abs_diff(snapshot(a.parameters()), snapshot(b.parameters())), 1e-6);
}

TEST(FinetuneRetriever, UnknownPassageIdIsAnError) {
  std::vector<Passage> passages{{"p0", "x"}};
  std::vector<TrainingPair> pairs{{"q", "x", "p9", {}}};
  auto vocab = text::Vocabulary::build({"x"});
  Retriever r(Encoder(small_config(vocab.size()), 1));
  EXPECT_THROW(finetune_retriever(r, vocab, pairs, passages, FinetuneOptions{}), Error);
}

TEST(FinetuneRetriever, TwoTowerTrainsSeparateEncoders) {
  SyntheticOptions so;
  so.topics = 3;
  so.passages_per_topic = 3;
  so.train_pairs = 4;
  so.seed = 5;
  auto data = make_synthetic_dataset(so);
  auto vocab = text::Vocabulary::build(data.documents);
  Retriever r(Encoder(small_config(vocab.size()), 2), true);
  auto names = r.parameters();
  EXPECT_EQ(names.front().name.rfind("query.", 0), 0u);
  EXPECT_EQ(names.back().name.rfind("passage.", 0), 0u);
  FinetuneOptions fo;
  fo.epochs = 1;
  fo.batch_size = 4;
  fo.max_len = 24;
  fo.peak_lr = 1e-2;
  fo.warmup_ratio = 0.0;
  finetune_retriever(r, vocab, data.train_pairs, data.passages, fo);
  EXPECT_NE(snapshot(r.query_encoder().parameters()), snapshot(r.passage_encoder().parameters()));
}

TEST(FinetuneRetriever, ToyClusteredTaskReachesHighTopOneAccuracy) {
  // Fixed: synthetic seed 1, encoder seed 5, 256 pairs, off-topic negatives only.
  SyntheticOptions so;
  so.topics = 8;
  so.train_pairs = 256;
  so.explicit_negatives = 7;
  so.seed = 1;
  auto data = make_synthetic_dataset(so);
  auto vocab = text::Vocabulary::build(data.documents);
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.hidden_dim = 32;
  mc.ffn_dim = 64;
  mc.early_layers = 1;
  mc.late_layers = 1;
  FinetuneOptions fo;
  fo.epochs = 10;
  fo.peak_lr = 3e-3;
  fo.seed = 5;
  fo.dropout = false;
  fo.in_batch_negatives = false;
  fo.fill_random_negatives = false;
  Retriever r(Encoder(mc, 5));
  finetune_retriever(r, vocab, data.train_pairs, data.passages, fo);

  auto index = build_index(r.passage_encoder(), vocab, data.passages, 32);
  std::vector<std::string> texts;
  for (const auto& q : data.test_queries) texts.push_back(q.text);
  auto vectors = encode_texts(r.query_encoder(), vocab, texts, 32);
  std::vector<std::pair<std::string, std::vector<double>>> queries;
  for (std::size_t i = 0; i < texts.size(); ++i) queries.push_back({data.test_queries[i].id, vectors[i]});
  const double top1 = mean_metric(search_all(index, queries, 1), data.test_qrels, Metric::kTopkHit, 1);
  std::cout << "held-out top-1: " << top1 << "\n";
  EXPECT_GE(top1, 0.9);
}

TEST(FinetuneRegression, LossDecreases) {
  SyntheticOptions so;
  so.topics = 3;
  so.train_pairs = 16;
  so.seed = 7;
  auto data = make_synthetic_dataset(so);
  auto vocab = text::Vocabulary::build(data.documents);
  Encoder e(small_config(vocab.size()), 3);
  FinetuneOptions fo;
  fo.epochs = 15;
  fo.batch_size = 8;
  fo.max_len = 24;
  fo.peak_lr = 3e-3;
  fo.dropout = false;
  auto report = finetune_regression(e, vocab, data.scored_pairs, fo);
  ASSERT_EQ(report.steps, 30u);
  EXPECT_LT(report.losses.back(), report.losses.front());
}

TEST(FinetuneTriplet, LossDecreases) {
  SyntheticOptions so;
  so.topics = 3;
  so.train_pairs = 16;
  so.seed = 8;
  auto data = make_synthetic_dataset(so);
  auto vocab = text::Vocabulary::build(data.documents);
  Encoder e(small_config(vocab.size()), 3);
  FinetuneOptions fo;
  fo.epochs = 15;
  fo.batch_size = 8;
  fo.max_len = 24;
  fo.peak_lr = 3e-3;
  fo.dropout = false;
  auto report = finetune_triplet(e, vocab, data.triplets, fo);
  EXPECT_LT(report.losses.back(), report.losses.front());
}

TEST(TrainingFiles, RoundTripAndErrors) {
  std::vector<TrainingPair> pairs{{"q1", "what is it", "p1", {"p2", "p3"}}, {"q2", "who", "p4", {}}};
  const auto path = temp_path("pairs.tsv");
  write_training_pairs(path, pairs);
  auto back = read_training_pairs(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].negative_ids, pairs[0].negative_ids);
  EXPECT_TRUE(back[1].negative_ids.empty());

  io::write_atomic(path, "q1\ttext\tp1\tp2,p1\n");
  EXPECT_THROW(read_training_pairs(path), FormatError);
  io::write_atomic(path, "q1\ttext\n");
  EXPECT_THROW(read_training_pairs(path), FormatError);

  std::vector<Passage> passages{{"a", "one two"}, {"b", "three"}};
  write_passages(path, passages);
  auto pb = read_passages(path);
  ASSERT_EQ(pb.size(), 2u);
  EXPECT_EQ(pb[1].text, "three");

  io::write_atomic(path, "x\ty\t1.5\n");
  EXPECT_THROW(read_scored_pairs(path), FormatError);
  io::write_atomic(path, "x\ty\t0.25\n");
  EXPECT_EQ(read_scored_pairs(path)[0].score, 0.25);
  io::write_atomic(path, "x\ty\n");
  EXPECT_THROW(read_triplets(path), FormatError);
}

TEST(Synthetic, DatasetIsConsistent) {
  SyntheticOptions so;
  so.seed = 3;
  auto a = make_synthetic_dataset(so), b = make_synthetic_dataset(so);
  EXPECT_EQ(a.documents, b.documents);
  EXPECT_EQ(a.passages.size(), so.topics * so.passages_per_topic);
  EXPECT_EQ(a.train_pairs.size(), so.train_pairs);
  std::set<std::string> ids;
  for (const auto& p : a.passages) ids.insert(p.id);
  for (const auto& pair : a.train_pairs) {
    EXPECT_TRUE(ids.count(pair.positive_id));
    EXPECT_TRUE(a.train_qrels.at(pair.query_id).count(pair.positive_id));
    for (const auto& n : pair.negative_ids) EXPECT_FALSE(a.train_qrels.at(pair.query_id).count(n));
  }
  for (const auto& [q, rel] : a.test_qrels)
    for (const auto& p : rel) EXPECT_TRUE(ids.count(p));
}
