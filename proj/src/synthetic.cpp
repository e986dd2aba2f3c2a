#include "condenser/synthetic.hpp"

#include <algorithm>
#include <numeric>

#include "condenser/io_util.hpp"
#include "condenser/rng.hpp"

namespace condenser {

namespace {

std::string topic_word(std::size_t t, std::size_t w) {
  return "t" + std::to_string(t) + "w" + std::to_string(w);
}

std::string shared_word(std::size_t w) { return "s" + std::to_string(w); }

class Writer {
 public:
  Writer(const SyntheticOptions& o, std::uint64_t purpose) : o_(o), rng_({o.seed, stream::kSynthetic, purpose}) {}

  std::string document(std::size_t topic) {
    const std::size_t len = o_.min_length + rng_.below(o_.max_length - o_.min_length + 1);
    std::string out;
    for (std::size_t i = 0; i < len; ++i) {
      if (i) out += ' ';
      out += rng_.uniform() < o_.topic_word_prob ? topic_word(topic, rng_.below(o_.topic_words))
                                                 : shared_word(rng_.below(o_.shared_words));
    }
    return out;
  }

  /// Topic words, drawn from `source` when it has any.
  std::string query(std::size_t topic, const std::string& source = {}) {
    std::vector<std::string> pool;
    const std::string prefix = "t" + std::to_string(topic) + "w";
    for (auto& w : io::split(source, ' '))
      if (w.rfind(prefix, 0) == 0) pool.push_back(w);
    std::string out;
    for (std::size_t i = 0; i < o_.query_length; ++i) {
      if (i) out += ' ';
      out += pool.empty() ? topic_word(topic, rng_.below(o_.topic_words)) : pool[rng_.below(pool.size())];
    }
    return out;
  }

  Rng& rng() { return rng_; }

 private:
  const SyntheticOptions& o_;
  Rng rng_;
};

std::string passage_id(std::size_t topic, std::size_t i) {
  return "p" + std::to_string(topic) + "_" + std::to_string(i);
}

}  // namespace

SyntheticDataset make_synthetic_dataset(const SyntheticOptions& o) {
  if (o.topics < 2 || o.topic_words == 0 || o.shared_words == 0 || o.passages_per_topic == 0)
    throw Error("synthetic: need at least two topics and nonempty word lists");
  if (o.min_length == 0 || o.max_length < o.min_length) throw Error("synthetic: bad length range");
  if (o.query_length == 0) throw Error("synthetic: query_length must be positive");
  if (o.explicit_negatives > (o.topics - 1) * o.passages_per_topic)
    throw Error("synthetic: more explicit negatives than off-topic passages");
  SyntheticDataset d;

  Writer passages(o, 1);
  for (std::size_t t = 0; t < o.topics; ++t)
    for (std::size_t i = 0; i < o.passages_per_topic; ++i) d.passages.push_back({passage_id(t, i), passages.document(t)});

  Writer docs(o, 2);
  for (const auto& p : d.passages) d.documents.push_back(p.text);
  for (std::size_t t = 0; t < o.topics; ++t)
    for (std::size_t i = 0; i < o.documents_per_topic; ++i) d.documents.push_back(docs.document(t));
  docs.rng().shuffle(d.documents);

  // Positives cycle through a shuffled passage list; query words come from
  // the topic words of the positive passage.
  Writer train(o, 3);
  std::vector<std::size_t> order(d.passages.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  train.rng().shuffle(order);
  for (std::size_t q = 0; q < o.train_pairs; ++q) {
    const std::size_t pi = order[q % order.size()];
    const std::size_t topic = pi / o.passages_per_topic;
    TrainingPair pair;
    pair.query_id = "train" + std::to_string(q);
    pair.query_text = train.query(topic, d.passages[pi].text);
    pair.positive_id = d.passages[pi].id;
    while (pair.negative_ids.size() < o.explicit_negatives) {
      std::size_t other = train.rng().below(o.topics - 1);
      if (other >= topic) ++other;
      auto id = passage_id(other, train.rng().below(o.passages_per_topic));
      if (std::find(pair.negative_ids.begin(), pair.negative_ids.end(), id) == pair.negative_ids.end())
        pair.negative_ids.push_back(std::move(id));
    }
    for (std::size_t i = 0; i < o.passages_per_topic; ++i) d.train_qrels[pair.query_id].insert(passage_id(topic, i));
    d.train_pairs.push_back(std::move(pair));
  }

  Writer test(o, 4);
  for (std::size_t t = 0; t < o.topics; ++t)
    for (std::size_t q = 0; q < o.test_queries_per_topic; ++q) {
      const auto id = "q" + std::to_string(t) + "_" + std::to_string(q);
      const auto& source = d.passages[t * o.passages_per_topic + test.rng().below(o.passages_per_topic)];
      d.test_queries.push_back({id, test.query(t, source.text)});
      for (std::size_t i = 0; i < o.passages_per_topic; ++i) d.test_qrels[id].insert(passage_id(t, i));
    }

  Writer similar(o, 5);
  for (std::size_t i = 0; i < o.train_pairs; ++i) {
    const std::size_t a = similar.rng().below(o.topics);
    const bool same = similar.rng().uniform() < 0.5;
    std::size_t b = a;
    if (!same) {
      b = similar.rng().below(o.topics - 1);
      if (b >= a) ++b;
    }
    d.scored_pairs.push_back({similar.document(a), similar.document(b), same ? 1.0 : 0.0});
    std::size_t n = similar.rng().below(o.topics - 1);
    if (n >= a) ++n;
    d.triplets.push_back({similar.document(a), similar.document(a), similar.document(n)});
  }
  return d;
}

void write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticDataset& d) {
  std::filesystem::create_directories(dir);
  std::string corpus;
  for (const auto& doc : d.documents) corpus += doc + '\n';
  io::write_atomic(dir / "corpus.txt", corpus);
  write_passages(dir / "passages.tsv", d.passages);
  write_training_pairs(dir / "train_pairs.tsv", d.train_pairs);
  write_qrels(dir / "train_qrels.tsv", d.train_qrels);
  write_passages(dir / "queries.tsv", d.test_queries);
  write_qrels(dir / "qrels.tsv", d.test_qrels);
  std::string scored, triplets;
  for (const auto& p : d.scored_pairs)
    scored += p.text_a + '\t' + p.text_b + '\t' + (p.score == 1.0 ? "1" : "0") + '\n';
  for (const auto& t : d.triplets) triplets += t.anchor + '\t' + t.positive + '\t' + t.negative + '\n';
  io::write_atomic(dir / "scored_pairs.tsv", scored);
  io::write_atomic(dir / "triplets.tsv", triplets);
}

}  // namespace condenser
