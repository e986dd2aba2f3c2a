#include "condenser/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "condenser/io_util.hpp"

namespace condenser {

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<Tensor> tensors_of(const ParameterList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

std::vector<std::vector<double>> take_grads(std::vector<Tensor>& params) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    grads.push_back(p.grad_or_zeros());
    p.zero_grad();
  }
  return grads;
}

void clear_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

std::string tsv_field(const std::string& s, const std::string& what) {
  if (s.find('\t') != std::string::npos || s.find('\n') != std::string::npos)
    throw Error(what + " contains a tab or newline: '" + s + "'");
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pre-training

void PretrainOptions::validate() const {
  if (micro_batch_size == 0 || accumulation_steps == 0)
    throw Error("pretrain: batch sizes must be positive");
  if (max_len < 2) throw Error("pretrain: max_len must be at least 2");
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) throw Error("pretrain: warmup_ratio in [0, 1)");
  if (!(peak_lr >= 0.0)) throw Error("pretrain: peak_lr must be nonnegative");
}

std::vector<bool> weight_decay_mask(const ParameterList& params) {
  std::vector<bool> mask;
  mask.reserve(params.size());
  for (const auto& p : params) mask.push_back(!ends_with(p.name, ".bias") && !ends_with(p.name, ".gain"));
  return mask;
}

Pretrainer::Pretrainer(PretrainModel model, std::vector<std::vector<int>> documents,
                       const PretrainOptions& options)
    : model_(std::move(model)), documents_(std::move(documents)), options_(options) {
  options_.validate();
  if (documents_.empty()) throw Error("pretrain: empty corpus");
  const auto params = model_.parameters();
  params_ = tensors_of(params);
  decay_mask_ = weight_decay_mask(params);
}

Pretrainer::Pretrainer(const TrainState& state, std::vector<std::vector<int>> documents,
                       const ModelConfig& config, ModelKind kind, const PretrainOptions& options)
    : Pretrainer(PretrainModel(config, kind, options.seed), std::move(documents), options) {
  if (!(state.config == config) || state.kind != kind || !(state.options == options))
    throw Error("resume: training state was written with a different configuration");
  const auto params = model_.parameters();
  if (state.names.size() != params.size() || state.parameters.size() != params.size())
    throw Error("resume: parameter table does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.names[i] != params[i].name || state.parameters[i].size() != params[i].tensor.numel())
      throw Error("resume: parameter '" + state.names[i] + "' does not match the model");
    Tensor t = params[i].tensor;
    std::copy(state.parameters[i].begin(), state.parameters[i].end(), t.mutable_data().begin());
  }
  optimizer_ = state.optimizer;
  step_ = state.step;
  if (step_ > total_steps()) throw Error("resume: state is past the end of the schedule");
}

std::size_t Pretrainer::steps_per_epoch() const {
  return ceil_div(documents_.size(), options_.batch_size());
}

const text::MaskedBatch& Pretrainer::batch_for_step(std::size_t step) {
  const std::size_t epoch = step / steps_per_epoch();
  if (epoch != cached_epoch_) {
    text::BatchOptions bo;
    bo.batch_size = options_.batch_size();
    bo.masking = options_.masking;
    bo.static_masking = options_.static_masking;
    batches_ = text::make_batches(documents_, model_.config().vocab_size, bo, options_.seed, epoch);
    cached_epoch_ = epoch;
  }
  return batches_[step % steps_per_epoch()];
}

StepLog Pretrainer::train_step() {
  if (done()) throw Error("pretrain: schedule already finished");
  const auto& batch = batch_for_step(step_);
  StepLog log;
  log.masked = batch.masked_count();
  const bool use_dropout = model_.config().dropout_rate > 0.0;

  clear_grads(params_);
  for (std::size_t m = 0; m < options_.accumulation_steps; ++m) {
    const std::size_t begin = std::min(batch.tokens.batch, m * options_.micro_batch_size);
    const std::size_t end = std::min(batch.tokens.batch, begin + options_.micro_batch_size);
    if (begin == end) break;
    const auto micro = options_.accumulation_steps == 1 ? batch : batch.rows(begin, end);
    Rng dropout_rng({options_.seed, stream::kDropout, step_, m});
    LossOptions lo;
    lo.dropout_rng = use_dropout ? &dropout_rng : nullptr;
    lo.normalizer = static_cast<double>(log.masked);
    lo.detach_cls = options_.detach_cls;
    lo.isolate_head_position0 = options_.isolate_head_position0;
    auto loss = model_.total_loss(micro, lo);
    log.total += loss.total.item();
    log.head += loss.head_value();
    log.backbone += loss.backbone_value();
    if (!loss.total.is_leaf()) loss.total.backward();
  }

  log.lr = linear_warmup_schedule(static_cast<std::int64_t>(step_),
                                  static_cast<std::int64_t>(total_steps()), options_.warmup_ratio,
                                  options_.peak_lr);
  adamw_step(params_, take_grads(params_), optimizer_, log.lr, options_.adamw, decay_mask_);
  log.step = ++step_;
  spdlog::debug("pretrain step {} lr {:.3e} loss {:.5f} head {:.5f} backbone {:.5f}", log.step, log.lr,
                log.total, log.head, log.backbone);
  return log;
}

std::vector<StepLog> Pretrainer::run(std::size_t max_steps) {
  std::vector<StepLog> logs;
  while (!done() && logs.size() < max_steps) logs.push_back(train_step());
  return logs;
}

TrainState Pretrainer::state() const {
  TrainState s;
  s.config = model_.config();
  s.kind = model_.kind();
  s.options = options_;
  s.step = step_;
  for (const auto& p : model_.parameters()) {
    s.names.push_back(p.name);
    s.parameters.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  }
  s.optimizer = optimizer_;
  return s;
}

// ---------------------------------------------------------------------------
// Files

std::vector<Passage> read_passages(const std::filesystem::path& path) {
  std::vector<Passage> out;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected id<TAB>text");
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

void write_passages(const std::filesystem::path& path, const std::vector<Passage>& passages) {
  std::string out;
  for (const auto& p : passages)
    out += tsv_field(p.id, "passage id") + '\t' + tsv_field(p.text, "passage text") + '\n';
  io::write_atomic(path, out);
}

std::vector<TrainingPair> read_training_pairs(const std::filesystem::path& path) {
  std::vector<TrainingPair> out;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(line_no);
    auto fields = io::split(line, '\t');
    if (fields.size() < 3 || fields.size() > 4)
      throw FormatError(where + ": expected query_id, query_text, positive_id, negatives");
    TrainingPair p{fields[0], fields[1], fields[2], {}};
    if (fields.size() == 4)
      for (auto& n : io::split(fields[3], ','))
        if (!n.empty()) p.negative_ids.push_back(n);
    if (std::find(p.negative_ids.begin(), p.negative_ids.end(), p.positive_id) != p.negative_ids.end())
      throw FormatError(where + ": positive '" + p.positive_id + "' also listed as a negative");
    out.push_back(std::move(p));
  }
  return out;
}

void write_training_pairs(const std::filesystem::path& path, const std::vector<TrainingPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += tsv_field(p.query_id, "query id") + '\t' + tsv_field(p.query_text, "query text") + '\t' +
           tsv_field(p.positive_id, "passage id") + '\t';
    for (std::size_t i = 0; i < p.negative_ids.size(); ++i) {
      if (p.negative_ids[i].find(',') != std::string::npos)
        throw Error("passage id contains a comma: '" + p.negative_ids[i] + "'");
      out += (i ? "," : "") + p.negative_ids[i];
    }
    out += '\n';
  }
  io::write_atomic(path, out);
}

std::vector<ScoredPair> read_scored_pairs(const std::filesystem::path& path) {
  std::vector<ScoredPair> out;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(line_no);
    auto fields = io::split(line, '\t');
    if (fields.size() != 3) throw FormatError(where + ": expected text_a, text_b, score");
    double score = 0.0;
    try {
      std::size_t used = 0;
      score = std::stod(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw FormatError(where + ": bad score '" + fields[2] + "'");
    }
    if (score < 0.0 || score > 1.0) throw FormatError(where + ": score must lie in [0, 1]");
    out.push_back({fields[0], fields[1], score});
  }
  return out;
}

std::vector<Triplet> read_triplets(const std::filesystem::path& path) {
  std::vector<Triplet> out;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = io::split(line, '\t');
    if (fields.size() != 3)
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected anchor, positive, negative");
    out.push_back({fields[0], fields[1], fields[2]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

Tensor contrastive_loss(const Tensor& query, const Tensor& positive, const Tensor& negatives,
                        const Tensor& in_batch) {
  const std::size_t d = query.numel();
  if (positive.numel() != d) throw ShapeError("contrastive_loss: positive dimension mismatch");
  std::vector<Tensor> candidates{ops::reshape(positive, {1, d})};
  for (const Tensor* pool : {&negatives, &in_batch}) {
    if (!pool->defined() || pool->numel() == 0) continue;
    if (pool->rank() != 2 || pool->dim(1) != d)
      throw ShapeError("contrastive_loss: negatives must be [n, " + std::to_string(d) + "]");
    candidates.push_back(*pool);
  }
  if (candidates.size() == 1) spdlog::warn("contrastive_loss: empty negative pool, loss is 0");
  Tensor scores = ops::matmul_nt(ops::reshape(query, {1, d}), ops::concat_rows(candidates));
  if (candidates.size() == 1) return ops::scale(ops::sum(scores), 0.0);
  const std::vector<int> target{0};
  return ops::masked_cross_entropy(scores, target);
}

double contrastive_nll(double positive_score, const std::vector<double>& negative_scores) {
  if (!std::isfinite(positive_score)) throw NumericError("contrastive_nll: positive score not finite");
  double m = positive_score;
  for (double s : negative_scores) {
    if (std::isnan(s) || s == INFINITY) throw NumericError("contrastive_nll: bad negative score");
    m = std::max(m, s);
  }
  double z = std::exp(positive_score - m);
  for (double s : negative_scores) z += std::exp(s - m);
  return std::log(z) + m - positive_score;
}

Tensor regression_loss(const Tensor& a, const Tensor& b, const std::vector<double>& gold) {
  Tensor a2 = a.rank() == 1 ? ops::reshape(a, {1, a.numel()}) : a;
  Tensor b2 = b.rank() == 1 ? ops::reshape(b, {1, b.numel()}) : b;
  Tensor cos = ops::row_cosine(a2, b2);
  if (gold.size() != cos.numel()) throw ShapeError("regression_loss: gold score count mismatch");
  Tensor diff = ops::sub(cos, Tensor({gold.size()}, gold));
  return ops::mean(ops::mul(diff, diff));
}

Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                    double margin) {
  if (!(margin > 0.0)) throw Error("triplet_loss: margin must be positive");
  auto as_rows = [](const Tensor& t) { return t.rank() == 1 ? ops::reshape(t, {1, t.numel()}) : t; };
  Tensor a = as_rows(anchor), p = as_rows(positive), n = as_rows(negative);
  Tensor gap = ops::sub(ops::row_distance(a, p), ops::row_distance(a, n));
  return ops::mean(ops::relu(ops::add_scalar(gap, margin)));
}

// ---------------------------------------------------------------------------
// Fine-tuning

void FinetuneOptions::validate() const {
  if (batch_size == 0 || accumulation_steps == 0) throw Error("finetune: batch sizes must be positive");
  if (max_len < 2) throw Error("finetune: max_len must be at least 2");
  if (passages_per_query == 0) throw Error("finetune: passages_per_query must be at least 1");
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) throw Error("finetune: warmup_ratio in [0, 1)");
  if (!(margin > 0.0)) throw Error("finetune: margin must be positive");
}

Retriever::Retriever(Encoder encoder, bool two_tower) : query_(std::move(encoder)) {
  if (two_tower) passage_ = query_.clone();
}

Retriever::Retriever(Encoder query, Encoder passage)
    : query_(std::move(query)), passage_(std::move(passage)) {}

ParameterList Retriever::parameters() const {
  if (!passage_) return query_.parameters();
  ParameterList out;
  for (auto& p : query_.parameters()) out.push_back({"query." + p.name, p.tensor});
  for (auto& p : passage_->parameters()) out.push_back({"passage." + p.name, p.tensor});
  return out;
}

namespace {

// Shared optimizer loop: shuffles items per epoch, splits each batch into
// accumulation chunks and calls loss_fn(chunk, epoch, dropout_rng) for each.
template <typename LossFn>
FinetuneReport run_finetune(const ParameterList& named, std::size_t n_items,
                            const FinetuneOptions& options, bool use_dropout, LossFn&& loss_fn) {
  options.validate();
  FinetuneReport report;
  if (n_items == 0) throw Error("finetune: no training examples");
  std::vector<Tensor> params = tensors_of(named);
  const auto decay = weight_decay_mask(named);
  AdamWState state;
  const std::size_t per_epoch = ceil_div(n_items, options.batch_size);
  const std::size_t total = per_epoch * options.epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<std::size_t> order(n_items);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle({options.seed, stream::kShuffle, epoch});
    shuffle.shuffle(order);
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t begin = b * options.batch_size;
      const std::size_t end = std::min(n_items, begin + options.batch_size);
      const std::size_t micro = ceil_div(end - begin, options.accumulation_steps);
      clear_grads(params);
      double loss_value = 0.0;
      for (std::size_t m = 0; m < options.accumulation_steps; ++m) {
        const std::size_t cb = begin + m * micro, ce = std::min(end, cb + micro);
        if (cb >= ce) break;
        std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(cb),
                                       order.begin() + static_cast<std::ptrdiff_t>(ce));
        Rng dropout_rng({options.seed, stream::kDropout, step, m});
        Tensor loss = loss_fn(chunk, epoch, use_dropout ? &dropout_rng : nullptr);
        if (options.accumulation_steps > 1)
          loss = ops::scale(loss, static_cast<double>(ce - cb) / static_cast<double>(end - begin));
        loss_value += loss.item();
        if (!loss.is_leaf()) loss.backward();
      }
      const double lr = linear_warmup_schedule(static_cast<std::int64_t>(step),
                                               static_cast<std::int64_t>(total), options.warmup_ratio,
                                               options.peak_lr);
      adamw_step(params, take_grads(params), state, lr, options.adamw, decay);
      report.losses.push_back(loss_value);
      spdlog::debug("finetune step {} lr {:.3e} loss {:.5f}", step + 1, lr, loss_value);
    }
  }
  report.steps = step;
  return report;
}

}  // namespace

RetrievalBatch make_retrieval_batch(const std::vector<TrainingPair>& pairs,
                                    const std::vector<std::size_t>& pair_indices,
                                    const std::vector<Passage>& passages,
                                    const FinetuneOptions& options, std::uint64_t epoch) {
  RetrievalBatch rb;
  rb.pairs = pair_indices;
  std::vector<std::size_t> group_start;
  for (std::size_t q : pair_indices) {
    const auto& pair = pairs.at(q);
    group_start.push_back(rb.passage_ids.size());
    std::vector<std::string> group{pair.positive_id};
    std::unordered_set<std::string> used{pair.positive_id};
    for (const auto& n : pair.negative_ids) {
      if (group.size() >= options.passages_per_query) break;
      if (used.insert(n).second) group.push_back(n);
    }
    if (options.fill_random_negatives && group.size() < options.passages_per_query) {
      std::vector<std::size_t> candidates(passages.size());
      std::iota(candidates.begin(), candidates.end(), std::size_t{0});
      Rng rng({options.seed, stream::kNegatives, epoch, q});
      rng.shuffle(candidates);
      for (std::size_t c : candidates) {
        if (group.size() >= options.passages_per_query) break;
        if (used.insert(passages[c].id).second) group.push_back(passages[c].id);
      }
    }
    rb.targets.push_back(static_cast<int>(rb.passage_ids.size()));
    rb.passage_ids.insert(rb.passage_ids.end(), group.begin(), group.end());
  }
  group_start.push_back(rb.passage_ids.size());

  const std::size_t cols = rb.passage_ids.size();
  rb.allowed.assign(pair_indices.size() * cols, 0);
  for (std::size_t q = 0; q < pair_indices.size(); ++q) {
    const auto& positive = pairs[pair_indices[q]].positive_id;
    std::size_t pool = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const bool own = c >= group_start[q] && c < group_start[q + 1];
      bool ok = own || options.in_batch_negatives;
      // Another copy of this query's positive is never a negative.
      if (c != static_cast<std::size_t>(rb.targets[q]) && rb.passage_ids[c] == positive) ok = false;
      rb.allowed[q * cols + c] = ok ? 1 : 0;
      if (ok && c != static_cast<std::size_t>(rb.targets[q])) ++pool;
    }
    if (pool == 0)
      throw Error("finetune: query '" + pairs[pair_indices[q]].query_id +
                  "' has no negatives in its batch");
  }
  return rb;
}

FinetuneReport finetune_retriever(Retriever& retriever, const text::Vocabulary& vocab,
                                  const std::vector<TrainingPair>& pairs,
                                  const std::vector<Passage>& passages,
                                  const FinetuneOptions& options) {
  std::unordered_map<std::string, const std::string*> text_of;
  for (const auto& p : passages)
    if (!text_of.emplace(p.id, &p.text).second) throw Error("finetune: duplicate passage id '" + p.id + "'");
  for (const auto& pair : pairs) {
    if (!text_of.count(pair.positive_id))
      throw Error("finetune: unknown passage id '" + pair.positive_id + "'");
    for (const auto& n : pair.negative_ids)
      if (!text_of.count(n)) throw Error("finetune: unknown passage id '" + n + "'");
  }
  const bool use_dropout = options.dropout && retriever.query_encoder().config().dropout_rate > 0.0;
  return run_finetune(
      retriever.parameters(), pairs.size(), options, use_dropout,
      [&](const std::vector<std::size_t>& chunk, std::size_t epoch, Rng* dropout_rng) {
        auto rb = make_retrieval_batch(pairs, chunk, passages, options, epoch);
        std::vector<std::string> queries, docs;
        for (std::size_t q : chunk) queries.push_back(pairs[q].query_text);
        for (const auto& id : rb.passage_ids) docs.push_back(*text_of.at(id));
        ForwardOptions fwd;
        fwd.dropout_rng = dropout_rng;
        Tensor qv = encode_cls(retriever.query_encoder(), vocab, queries, options.max_len, fwd);
        Tensor pv = encode_cls(retriever.passage_encoder(), vocab, docs, options.max_len, fwd);
        return ops::masked_cross_entropy(ops::matmul_nt(qv, pv), rb.targets, 0.0, rb.allowed);
      });
}

FinetuneReport finetune_regression(Encoder& encoder, const text::Vocabulary& vocab,
                                   const std::vector<ScoredPair>& pairs,
                                   const FinetuneOptions& options) {
  const bool use_dropout = options.dropout && encoder.config().dropout_rate > 0.0;
  return run_finetune(encoder.parameters(), pairs.size(), options, use_dropout,
                      [&](const std::vector<std::size_t>& chunk, std::size_t, Rng* dropout_rng) {
                        std::vector<std::string> a, b;
                        std::vector<double> gold;
                        for (std::size_t i : chunk) {
                          a.push_back(pairs[i].text_a);
                          b.push_back(pairs[i].text_b);
                          gold.push_back(pairs[i].score);
                        }
                        ForwardOptions fwd;
                        fwd.dropout_rng = dropout_rng;
                        return regression_loss(encode_cls(encoder, vocab, a, options.max_len, fwd),
                                               encode_cls(encoder, vocab, b, options.max_len, fwd), gold);
                      });
}

FinetuneReport finetune_triplet(Encoder& encoder, const text::Vocabulary& vocab,
                                const std::vector<Triplet>& triplets,
                                const FinetuneOptions& options) {
  const bool use_dropout = options.dropout && encoder.config().dropout_rate > 0.0;
  return run_finetune(encoder.parameters(), triplets.size(), options, use_dropout,
                      [&](const std::vector<std::size_t>& chunk, std::size_t, Rng* dropout_rng) {
                        std::vector<std::string> a, p, n;
                        for (std::size_t i : chunk) {
                          a.push_back(triplets[i].anchor);
                          p.push_back(triplets[i].positive);
                          n.push_back(triplets[i].negative);
                        }
                        ForwardOptions fwd;
                        fwd.dropout_rng = dropout_rng;
                        return triplet_loss(encode_cls(encoder, vocab, a, options.max_len, fwd),
                                            encode_cls(encoder, vocab, p, options.max_len, fwd),
                                            encode_cls(encoder, vocab, n, options.max_len, fwd),
                                            options.margin);
                      });
}

}  // namespace condenser
