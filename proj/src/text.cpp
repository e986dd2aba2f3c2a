#include "condenser/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <numeric>
#include <sstream>

#include "condenser/io_util.hpp"

namespace condenser::text {

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> tokens{"[PAD]", "[UNK]", "[CLS]", "[MASK]"};
  return tokens;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

Vocabulary::Vocabulary() : tokens_(reserved_tokens()) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, std::size_t max_size,
                             std::size_t min_count) {
  if (corpus.empty()) throw Error("build_vocab: empty corpus");
  if (max_size != 0 && max_size < static_cast<std::size_t>(kNumReserved))
    throw Error("build_vocab: max_size must leave room for the reserved ids");
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus)
    for (auto& tok : tokenize(doc)) ++counts[tok];

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, n] : counts)
    if (n >= std::max<std::size_t>(min_count, 1)) ranked.emplace_back(tok, n);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (max_size != 0 && ranked.size() > max_size - kNumReserved) ranked.resize(max_size - kNumReserved);

  std::vector<std::string> tokens;
  tokens.reserve(ranked.size());
  for (auto& [tok, n] : ranked) tokens.push_back(tok);
  return from_tokens(tokens);
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  for (const auto& t : tokens) {
    if (t.empty()) throw Error("vocabulary: empty token");
    if (!v.index_.emplace(t, static_cast<int>(v.tokens_.size())).second)
      throw Error("vocabulary: duplicate token '" + t + "'");
    v.tokens_.push_back(t);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  auto lines = io::read_lines(path);
  const auto& reserved = reserved_tokens();
  if (lines.size() < reserved.size() ||
      !std::equal(reserved.begin(), reserved.end(), lines.begin()))
    throw FormatError(path.string() + ": missing reserved-token header");
  std::vector<std::string> tokens(lines.begin() + kNumReserved, lines.end());
  while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  try {
    return from_tokens(tokens);
  } catch (const Error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  io::write_atomic(path, out);
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw Error("vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text, std::size_t max_len) const {
  if (max_len < 2) throw Error("encode: max_len must be at least 2");
  std::vector<int> ids{kCls};
  for (const auto& tok : tokenize(text)) {
    if (ids.size() >= max_len) break;
    ids.push_back(id(tok));
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kPad || i == kCls) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

TokenBatch TokenBatch::pad(const std::vector<std::vector<int>>& rows) {
  TokenBatch b;
  b.batch = rows.size();
  for (const auto& r : rows) b.seq = std::max(b.seq, r.size());
  b.ids.assign(b.batch * b.seq, kPad);
  b.mask.assign(b.batch * b.seq, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.seq));
    std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(i * b.seq), rows[i].size(), 1);
  }
  return b;
}

std::size_t TokenBatch::length(std::size_t row) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < seq; ++t) n += mask[row * seq + t] ? 1 : 0;
  return n;
}

MaskedRow apply_masking(std::span<const int> ids, std::size_t vocab_size, Rng& rng,
                        const MaskingOptions& options) {
  if (ids.empty() || ids[0] != kCls) throw Error("apply_masking: sequence must start with CLS");
  if (vocab_size <= static_cast<std::size_t>(kNumReserved))
    throw Error("apply_masking: vocabulary has no maskable tokens");
  MaskedRow row;
  row.input_ids.assign(ids.begin(), ids.end());
  row.labels.assign(ids.size(), kIgnoreLabel);
  row.actions.assign(ids.size(), MaskAction::kNone);
  const std::uint64_t random_range = vocab_size - kNumReserved;
  for (std::size_t i = 1; i < ids.size(); ++i) {
    if (ids[i] == kPad || ids[i] == kCls) continue;
    if (rng.uniform() >= options.select_prob) continue;
    row.labels[i] = ids[i];
    const double r = rng.uniform();
    if (r < options.mask_prob) {
      row.input_ids[i] = kMask;
      row.actions[i] = MaskAction::kMask;
    } else if (r < options.mask_prob + options.random_prob) {
      row.input_ids[i] = kNumReserved + static_cast<int>(rng.below(random_range));
      row.actions[i] = MaskAction::kRandom;
    } else {
      row.actions[i] = MaskAction::kKeep;
    }
  }
  return row;
}

std::size_t MaskedBatch::masked_count() const {
  return static_cast<std::size_t>(
      std::count_if(mlm_labels.begin(), mlm_labels.end(), [](int l) { return l >= 0; }));
}

MaskedBatch MaskedBatch::rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > tokens.batch) throw Error("MaskedBatch::rows: range out of bounds");
  MaskedBatch out;
  std::size_t seq = 0;
  for (std::size_t r = begin; r < end; ++r) seq = std::max(seq, tokens.length(r));
  out.tokens.batch = end - begin;
  out.tokens.seq = seq;
  for (std::size_t r = begin; r < end; ++r) {
    for (std::size_t t = 0; t < seq; ++t) {
      out.tokens.ids.push_back(tokens.ids[r * tokens.seq + t]);
      out.tokens.mask.push_back(tokens.mask[r * tokens.seq + t]);
      out.mlm_labels.push_back(mlm_labels[r * tokens.seq + t]);
    }
    out.documents.push_back(documents[r]);
  }
  return out;
}

std::vector<MaskedBatch> make_batches(const std::vector<std::vector<int>>& documents,
                                      std::size_t vocab_size, const BatchOptions& options,
                                      std::uint64_t seed, std::uint64_t epoch) {
  if (options.batch_size == 0) throw Error("make_batches: batch_size must be positive");
  std::vector<std::size_t> order(documents.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng({seed, stream::kShuffle, epoch});
  shuffle_rng.shuffle(order);

  std::vector<MaskedBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
    const std::size_t end = std::min(order.size(), start + options.batch_size);
    std::vector<std::vector<int>> inputs;
    std::vector<std::vector<int>> labels;
    MaskedBatch batch;
    for (std::size_t i = start; i < end; ++i) {
      const std::size_t doc = order[i];
      Rng mask_rng({seed, stream::kMask, options.static_masking ? 0 : epoch + 1, doc});
      auto row = apply_masking(documents[doc], vocab_size, mask_rng, options.masking);
      inputs.push_back(std::move(row.input_ids));
      labels.push_back(std::move(row.labels));
      batch.documents.push_back(doc);
    }
    batch.tokens = TokenBatch::pad(inputs);
    batch.mlm_labels.assign(batch.tokens.batch * batch.tokens.seq, kIgnoreLabel);
    for (std::size_t r = 0; r < labels.size(); ++r)
      std::copy(labels[r].begin(), labels[r].end(),
                batch.mlm_labels.begin() + static_cast<std::ptrdiff_t>(r * batch.tokens.seq));
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<MaskedBatch> make_batches(const std::vector<std::string>& corpus,
                                      const Vocabulary& vocab, std::size_t max_len,
                                      const BatchOptions& options, std::uint64_t seed,
                                      std::uint64_t epoch) {
  return make_batches(encode_all(corpus, vocab, max_len), vocab.size(), options, seed, epoch);
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  auto lines = io::read_lines(path);
  std::vector<std::string> docs;
  for (auto& l : lines)
    if (!tokenize(l).empty()) docs.push_back(std::move(l));
  return docs;
}

std::vector<std::vector<int>> encode_all(const std::vector<std::string>& corpus,
                                         const Vocabulary& vocab, std::size_t max_len) {
  std::vector<std::vector<int>> out;
  out.reserve(corpus.size());
  for (const auto& doc : corpus) out.push_back(vocab.encode(doc, max_len));
  return out;
}

}  // namespace condenser::text
