#include "condenser/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "condenser/io_util.hpp"
#include "condenser/parallel.hpp"

namespace condenser {

namespace {

constexpr std::string_view kIndexMagic = "CDSRINDX";
constexpr std::uint32_t kIndexVersion = 1;

double inner(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

bool hit_before(const SearchHit& a, const SearchHit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

std::size_t parse_count(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw Error("bad " + what + " '" + s + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace

DenseIndex::DenseIndex(std::size_t dim, std::vector<std::string> ids, std::vector<double> vectors)
    : dim_(dim) {
  if (vectors.size() != ids.size() * dim)
    throw ShapeError("index: " + std::to_string(vectors.size()) + " values for " +
                     std::to_string(ids.size()) + " rows of dimension " + std::to_string(dim));
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  ids_.reserve(ids.size());
  vectors_.reserve(vectors.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto r = order[i];
    if (i > 0 && ids[r] == ids_.back()) throw Error("index: duplicate passage id '" + ids[r] + "'");
    ids_.push_back(std::move(ids[r]));
    vectors_.insert(vectors_.end(), vectors.begin() + static_cast<std::ptrdiff_t>(r * dim),
                    vectors.begin() + static_cast<std::ptrdiff_t>((r + 1) * dim));
  }
}

std::span<const double> DenseIndex::row(std::size_t i) const {
  if (i >= ids_.size()) throw Error("index: row out of range");
  return std::span<const double>(vectors_).subspan(i * dim_, dim_);
}

std::vector<SearchHit> DenseIndex::search(std::span<const double> query, std::size_t k) const {
  if (k == 0) throw Error("search: k must be at least 1");
  if (empty()) return {};
  if (query.size() != dim_)
    throw ShapeError("search: query dimension " + std::to_string(query.size()) +
                     " does not match index dimension " + std::to_string(dim_));
  std::vector<double> scores(ids_.size());
  parallel_for(ids_.size(), 256, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) scores[i] = inner(query, row(i));
  });
  std::vector<SearchHit> hits(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) hits[i] = {ids_[i], scores[i]};
  const std::size_t n = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(n), hits.end(), hit_before);
  hits.resize(n);
  return hits;
}

void DenseIndex::save(const std::filesystem::path& path) const {
  io::ByteWriter w;
  w.raw(kIndexMagic);
  w.u32(kIndexVersion);
  w.u64(dim_);
  w.u64(ids_.size());
  for (const auto& id : ids_) w.str(id);
  for (double v : vectors_) w.f64(v);
  io::write_atomic(path, w.bytes());
}

DenseIndex DenseIndex::load(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, path.string());
  if (r.raw(kIndexMagic.size()) != kIndexMagic) r.fail("not an index file");
  if (r.u32() != kIndexVersion) r.fail("unsupported index version");
  const auto dim = r.u64();
  const auto n = r.u64();
  if (n > r.remaining()) r.fail("truncated id table");
  std::vector<std::string> ids(n);
  for (auto& id : ids) id = r.str();
  if (dim != 0 && n > r.remaining() / 8 / dim) r.fail("truncated vectors");
  std::vector<double> vectors(n * dim);
  for (auto& v : vectors) v = r.f64();
  r.expect_end();
  try {
    return DenseIndex(dim, std::move(ids), std::move(vectors));
  } catch (const Error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::vector<double>> encode_texts(const Encoder& encoder, const text::Vocabulary& vocab,
                                              const std::vector<std::string>& texts,
                                              std::size_t max_len, std::size_t batch_size) {
  if (batch_size == 0) throw Error("encode: batch_size must be positive");
  NoGradGuard no_grad;
  std::vector<std::vector<double>> out;
  out.reserve(texts.size());
  const std::size_t d = encoder.config().hidden_dim;
  for (std::size_t start = 0; start < texts.size(); start += batch_size) {
    const std::size_t end = std::min(texts.size(), start + batch_size);
    std::vector<std::string> chunk(texts.begin() + static_cast<std::ptrdiff_t>(start),
                                   texts.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor encoded = encode_cls(encoder, vocab, chunk, max_len);
    auto cls = encoded.data();
    for (std::size_t i = 0; i < chunk.size(); ++i)
      out.emplace_back(cls.begin() + static_cast<std::ptrdiff_t>(i * d),
                       cls.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  }
  return out;
}

DenseIndex build_index(const Encoder& encoder, const text::Vocabulary& vocab,
                       const std::vector<Passage>& passages, std::size_t max_len,
                       std::size_t batch_size) {
  const std::size_t d = encoder.config().hidden_dim;
  std::vector<std::string> ids, texts;
  for (const auto& p : passages) {
    ids.push_back(p.id);
    texts.push_back(p.text);
  }
  std::vector<double> flat;
  flat.reserve(passages.size() * d);
  for (const auto& v : encode_texts(encoder, vocab, texts, max_len, batch_size))
    flat.insert(flat.end(), v.begin(), v.end());
  return DenseIndex(d, std::move(ids), std::move(flat));
}

Qrels read_qrels(const std::filesystem::path& path) {
  Qrels qrels;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = io::split(line, '\t');
    if (f.size() != 2 || f[0].empty() || f[1].empty())
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected query_id<TAB>passage_id");
    qrels[f[0]].insert(f[1]);
  }
  return qrels;
}

void write_qrels(const std::filesystem::path& path, const Qrels& qrels) {
  std::string out;
  for (const auto& [q, rel] : qrels)
    for (const auto& p : rel) out += q + '\t' + p + '\n';
  io::write_atomic(path, out);
}

void write_run(const std::filesystem::path& path, const Run& run, const std::string& tag) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& [q, hits] : run)
    for (std::size_t i = 0; i < hits.size(); ++i)
      out << q << " Q0 " << hits[i].id << ' ' << i + 1 << ' ' << hits[i].score << ' ' << tag << '\n';
  io::write_atomic(path, out.str());
}

Run read_run(const std::filesystem::path& path) {
  std::map<std::string, std::vector<std::pair<std::size_t, SearchHit>>> ranked;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    std::istringstream in(line);
    std::string q, q0, pid, rank, score, tag;
    if (!(in >> q)) continue;
    const auto where = path.string() + ":" + std::to_string(line_no);
    if (!(in >> q0 >> pid >> rank >> score >> tag))
      throw FormatError(where + ": expected 'query_id Q0 passage_id rank score tag'");
    try {
      ranked[q].push_back({parse_count(rank, "rank"), {pid, std::stod(score)}});
    } catch (const std::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  Run run;
  for (auto& [q, hits] : ranked) {
    std::stable_sort(hits.begin(), hits.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    auto& out = run[q];
    for (auto& h : hits) out.push_back(std::move(h.second));
  }
  return run;
}

Run search_all(const DenseIndex& index,
               const std::vector<std::pair<std::string, std::vector<double>>>& queries, std::size_t k) {
  Run run;
  for (const auto& [id, vec] : queries) {
    if (run.count(id)) throw Error("search: duplicate query id '" + id + "'");
    run[id] = index.search(vec, k);
  }
  return run;
}

std::map<std::string, std::vector<std::string>> mine_hard_negatives(
    const DenseIndex& index, const std::vector<std::pair<std::string, std::vector<double>>>& queries,
    const Qrels& qrels, std::size_t depth) {
  std::map<std::string, std::vector<std::string>> mined;
  for (const auto& [id, vec] : queries) {
    auto rel = qrels.find(id);
    if (rel == qrels.end() || rel->second.empty()) {
      spdlog::warn("mine-negatives: query '{}' has no relevant passages, skipped", id);
      continue;
    }
    auto& out = mined[id];
    for (const auto& hit : index.search(vec, depth))
      if (!rel->second.count(hit.id)) out.push_back(hit.id);
  }
  return mined;
}

std::vector<TrainingPair> append_negatives(std::vector<TrainingPair> pairs,
                                           const std::map<std::string, std::vector<std::string>>& mined) {
  for (auto& p : pairs) {
    auto it = mined.find(p.query_id);
    if (it == mined.end()) continue;
    std::set<std::string> seen(p.negative_ids.begin(), p.negative_ids.end());
    seen.insert(p.positive_id);
    for (const auto& n : it->second)
      if (seen.insert(n).second) p.negative_ids.push_back(n);
  }
  return pairs;
}

double topk_hit(const std::vector<std::string>& ranking, const std::set<std::string>& relevant,
                std::size_t k) {
  const std::size_t n = std::min(k, ranking.size());
  for (std::size_t i = 0; i < n; ++i)
    if (relevant.count(ranking[i])) return 1.0;
  return 0.0;
}

double mrr_at_k(const std::vector<std::string>& ranking, const std::set<std::string>& relevant,
                std::size_t k) {
  const std::size_t n = std::min(k, ranking.size());
  for (std::size_t i = 0; i < n; ++i)
    if (relevant.count(ranking[i])) return 1.0 / static_cast<double>(i + 1);
  return 0.0;
}

double recall_at_k(const std::vector<std::string>& ranking, const std::set<std::string>& relevant,
                   std::size_t k) {
  if (relevant.empty()) return 0.0;
  const std::size_t n = std::min(k, ranking.size());
  std::set<std::string> found;
  for (std::size_t i = 0; i < n; ++i)
    if (relevant.count(ranking[i])) found.insert(ranking[i]);
  return static_cast<double>(found.size()) / static_cast<double>(relevant.size());
}

double ndcg_at_k(const std::vector<std::string>& ranking, const std::set<std::string>& relevant,
                 std::size_t k) {
  const std::size_t n = std::min(k, ranking.size());
  double dcg = 0.0;
  std::set<std::string> counted;
  for (std::size_t i = 0; i < n; ++i)
    if (relevant.count(ranking[i]) && counted.insert(ranking[i]).second)
      dcg += 1.0 / std::log2(static_cast<double>(i + 2));
  double ideal = 0.0;
  for (std::size_t i = 0; i < std::min(k, relevant.size()); ++i)
    ideal += 1.0 / std::log2(static_cast<double>(i + 2));
  return ideal > 0.0 ? dcg / ideal : 0.0;
}

double mean_metric(const Run& run, const Qrels& qrels, Metric metric, std::size_t k) {
  if (k == 0) throw Error("metric cutoff must be at least 1");
  if (qrels.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [q, relevant] : qrels) {
    auto it = run.find(q);
    if (it == run.end()) continue;
    std::vector<std::string> ranking;
    for (const auto& h : it->second) ranking.push_back(h.id);
    switch (metric) {
      case Metric::kTopkHit:
        total += topk_hit(ranking, relevant, k);
        break;
      case Metric::kMrr:
        total += mrr_at_k(ranking, relevant, k);
        break;
      case Metric::kRecall:
        total += recall_at_k(ranking, relevant, k);
        break;
      case Metric::kNdcg:
        total += ndcg_at_k(ranking, relevant, k);
        break;
    }
  }
  return total / static_cast<double>(qrels.size());
}

std::pair<Metric, std::size_t> parse_metric(const std::string& name) {
  auto at = name.find('@');
  std::string base = name, cutoff;
  if (at != std::string::npos) {
    base = name.substr(0, at);
    cutoff = name.substr(at + 1);
  } else if (name.rfind("top", 0) == 0) {
    base = "top";
    cutoff = name.substr(3);
  }
  if (cutoff.empty()) throw Error("metric '" + name + "' needs a cutoff, e.g. mrr@10");
  const auto k = parse_count(cutoff, "metric cutoff");
  if (base == "mrr") return {Metric::kMrr, k};
  if (base == "recall") return {Metric::kRecall, k};
  if (base == "ndcg") return {Metric::kNdcg, k};
  if (base == "top" || base == "hit") return {Metric::kTopkHit, k};
  throw Error("unknown metric '" + name + "'");
}

std::vector<double> average_ranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& predicted, const std::vector<double>& gold) {
  if (predicted.size() != gold.size()) throw ShapeError("spearman: length mismatch");
  if (predicted.size() < 2) throw Error("spearman: need at least two values");
  for (double v : predicted)
    if (std::isnan(v)) throw NumericError("spearman: NaN score");
  auto rp = average_ranks(predicted), rg = average_ranks(gold);
  const double n = static_cast<double>(rp.size());
  const double mp = std::accumulate(rp.begin(), rp.end(), 0.0) / n;
  const double mg = std::accumulate(rg.begin(), rg.end(), 0.0) / n;
  double cov = 0.0, vp = 0.0, vg = 0.0;
  for (std::size_t i = 0; i < rp.size(); ++i) {
    cov += (rp[i] - mp) * (rg[i] - mg);
    vp += (rp[i] - mp) * (rp[i] - mp);
    vg += (rg[i] - mg) * (rg[i] - mg);
  }
  if (vp == 0.0 || vg == 0.0) throw NumericError("spearman: constant input has no rank correlation");
  return cov / std::sqrt(vp * vg);
}

double pairwise_accuracy(const std::vector<std::vector<double>>& anchors,
                         const std::vector<std::vector<double>>& positives,
                         const std::vector<std::vector<double>>& negatives) {
  if (anchors.size() != positives.size() || anchors.size() != negatives.size())
    throw ShapeError("pairwise_accuracy: triplet lists differ in length");
  if (anchors.empty()) throw Error("pairwise_accuracy: no triplets");
  auto dist2 = [](const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("pairwise_accuracy: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  };
  std::size_t correct = 0;
  for (std::size_t i = 0; i < anchors.size(); ++i)
    if (dist2(anchors[i], positives[i]) < dist2(anchors[i], negatives[i])) ++correct;
  return static_cast<double>(correct) / static_cast<double>(anchors.size());
}

double pairwise_accuracy(const Encoder& encoder, const text::Vocabulary& vocab,
                         const std::vector<Triplet>& triplets, std::size_t max_len) {
  std::vector<std::string> a, p, n;
  for (const auto& t : triplets) {
    a.push_back(t.anchor);
    p.push_back(t.positive);
    n.push_back(t.negative);
  }
  return pairwise_accuracy(encode_texts(encoder, vocab, a, max_len),
                           encode_texts(encoder, vocab, p, max_len),
                           encode_texts(encoder, vocab, n, max_len));
}

}  // namespace condenser
