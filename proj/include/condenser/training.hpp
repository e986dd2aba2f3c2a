#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "condenser/condenser.hpp"
#include "condenser/optim.hpp"
#include "condenser/text.hpp"

namespace condenser {

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainOptions {
  std::size_t epochs = 1;
  /// Documents per forward/backward pass; one optimizer step consumes
  /// micro_batch_size * accumulation_steps documents.
  std::size_t micro_batch_size = 8;
  std::size_t accumulation_steps = 1;
  std::size_t max_len = 32;
  double peak_lr = 1e-4;
  double warmup_ratio = 0.1;
  AdamWOptions adamw;
  text::MaskingOptions masking;
  bool static_masking = false;
  bool detach_cls = false;
  bool isolate_head_position0 = false;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t batch_size() const { return micro_batch_size * accumulation_steps; }
  bool operator==(const PretrainOptions&) const = default;
};

struct StepLog {
  std::size_t step = 0;  // 1-based index of the completed optimizer step
  double lr = 0.0;
  double total = 0.0;
  double head = 0.0;
  double backbone = 0.0;
  std::size_t masked = 0;
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  ModelConfig config;
  ModelKind kind = ModelKind::kCondenser;
  PretrainOptions options;
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> parameters;
  AdamWState optimizer;
};

class Pretrainer {
 public:
  Pretrainer(PretrainModel model, std::vector<std::vector<int>> documents,
             const PretrainOptions& options);

  /// Continues from `state`; its config, kind and options must match.
  Pretrainer(const TrainState& state, std::vector<std::vector<int>> documents,
             const ModelConfig& config, ModelKind kind, const PretrainOptions& options);

  const PretrainOptions& options() const { return options_; }
  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const { return steps_per_epoch() * options_.epochs; }
  std::size_t step() const { return step_; }
  bool done() const { return step_ >= total_steps(); }

  StepLog train_step();
  /// Runs until done or `max_steps` more steps have been taken.
  std::vector<StepLog> run(std::size_t max_steps = std::numeric_limits<std::size_t>::max());

  const PretrainModel& model() const { return model_; }
  PretrainModel& model() { return model_; }

  TrainState state() const;

 private:
  const text::MaskedBatch& batch_for_step(std::size_t step);

  PretrainModel model_;
  std::vector<std::vector<int>> documents_;
  PretrainOptions options_;
  std::vector<Tensor> params_;
  std::vector<bool> decay_mask_;
  AdamWState optimizer_;
  std::size_t step_ = 0;
  std::size_t cached_epoch_ = std::numeric_limits<std::size_t>::max();
  std::vector<text::MaskedBatch> batches_;
};

/// Parameters named *.bias / *.gain are exempt from weight decay.
std::vector<bool> weight_decay_mask(const ParameterList& params);

// ---------------------------------------------------------------------------
// Fine-tuning data

struct Passage {
  std::string id;
  std::string text;
};

struct TrainingPair {
  std::string query_id;
  std::string query_text;
  std::string positive_id;
  std::vector<std::string> negative_ids;
};

struct ScoredPair {
  std::string text_a;
  std::string text_b;
  double score = 0.0;  // in [0, 1]
};

struct Triplet {
  std::string anchor;
  std::string positive;
  std::string negative;
};

/// "id<TAB>text" lines.
std::vector<Passage> read_passages(const std::filesystem::path& path);
void write_passages(const std::filesystem::path& path, const std::vector<Passage>& passages);
/// "query_id<TAB>query_text<TAB>positive_id<TAB>neg1,neg2,..." lines.
std::vector<TrainingPair> read_training_pairs(const std::filesystem::path& path);
void write_training_pairs(const std::filesystem::path& path, const std::vector<TrainingPair>& pairs);
/// "text_a<TAB>text_b<TAB>score" lines.
std::vector<ScoredPair> read_scored_pairs(const std::filesystem::path& path);
/// "anchor<TAB>positive<TAB>negative" lines.
std::vector<Triplet> read_triplets(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Losses

/// -log softmax over [s(q, d+), s(q, d-_1), ...] at the positive, with raw
/// inner-product scores. `negatives` and `in_batch` are [n, d] and may be
/// undefined. An empty pool gives 0 and logs a warning.
Tensor contrastive_loss(const Tensor& query, const Tensor& positive, const Tensor& negatives,
                        const Tensor& in_batch = Tensor());

/// Same quantity from precomputed scores; -inf negatives are allowed.
double contrastive_nll(double positive_score, const std::vector<double>& negative_scores);

/// Mean over rows of (cos(a, b) - gold)^2. Zero vectors throw NumericError.
Tensor regression_loss(const Tensor& a, const Tensor& b, const std::vector<double>& gold);

/// Mean over rows of max(0, |a - p| - |a - n| + margin). margin must be > 0.
Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                    double margin);

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneOptions {
  std::size_t epochs = 10;
  /// Queries (contrastive) or examples (regression, triplet) per step.
  std::size_t batch_size = 8;
  std::size_t accumulation_steps = 1;
  std::size_t max_len = 32;
  double peak_lr = 1e-4;
  double warmup_ratio = 0.1;
  AdamWOptions adamw;
  std::uint64_t seed = 0;
  bool dropout = true;

  // Contrastive retrieval.
  std::size_t passages_per_query = 8;  // one positive + the rest negatives
  bool in_batch_negatives = true;
  bool fill_random_negatives = true;
  bool two_tower = false;

  // Triplet.
  double margin = 5.0;

  void validate() const;
  bool operator==(const FinetuneOptions&) const = default;
};

/// Query and passage encoders; one shared encoder unless two-tower.
class Retriever {
 public:
  explicit Retriever(Encoder encoder, bool two_tower = false);
  Retriever(Encoder query, Encoder passage);

  bool two_tower() const { return passage_.has_value(); }
  const Encoder& query_encoder() const { return query_; }
  const Encoder& passage_encoder() const { return passage_ ? *passage_ : query_; }
  Encoder& query_encoder() { return query_; }
  Encoder& passage_encoder() { return passage_ ? *passage_ : query_; }

  ParameterList parameters() const;

 private:
  Encoder query_;
  std::optional<Encoder> passage_;
};

struct FinetuneReport {
  std::size_t steps = 0;
  std::vector<double> losses;  // one per optimizer step
};

/// Bi-encoder training with the contrastive loss. Every query's pool holds its
/// own negatives and, when enabled, all other passages in the batch.
FinetuneReport finetune_retriever(Retriever& retriever, const text::Vocabulary& vocab,
                                  const std::vector<TrainingPair>& pairs,
                                  const std::vector<Passage>& passages,
                                  const FinetuneOptions& options);

FinetuneReport finetune_regression(Encoder& encoder, const text::Vocabulary& vocab,
                                   const std::vector<ScoredPair>& pairs,
                                   const FinetuneOptions& options);

FinetuneReport finetune_triplet(Encoder& encoder, const text::Vocabulary& vocab,
                                const std::vector<Triplet>& triplets,
                                const FinetuneOptions& options);

/// Pool of passages for one query inside a retrieval batch, exposed for tests.
struct RetrievalBatch {
  std::vector<std::size_t> pairs;           // indices into the pair list
  std::vector<std::string> passage_ids;     // columns of the score matrix
  std::vector<int> targets;                 // positive column per query
  std::vector<std::uint8_t> allowed;        // [queries, columns]
};

RetrievalBatch make_retrieval_batch(const std::vector<TrainingPair>& pairs,
                                    const std::vector<std::size_t>& pair_indices,
                                    const std::vector<Passage>& passages,
                                    const FinetuneOptions& options, std::uint64_t epoch);

}  // namespace condenser
