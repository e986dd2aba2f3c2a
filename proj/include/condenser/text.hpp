#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "condenser/rng.hpp"

namespace condenser::text {

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kCls = 2;
inline constexpr int kMask = 3;
inline constexpr int kNumReserved = 4;
inline constexpr int kIgnoreLabel = -1;

/// Lowercases ASCII letters and splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  Vocabulary();

  /// Tokens ordered by descending frequency, then lexicographically, after the
  /// four reserved ids. `max_size` bounds the total size including reserved
  /// ids (0 = unbounded); tokens seen fewer than `min_count` times are left out.
  static Vocabulary build(const std::vector<std::string>& corpus, std::size_t max_size = 0,
                          std::size_t min_count = 1);

  /// Non-reserved tokens in id order (first one gets id 4).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;
  const std::string& token(int id) const;

  /// CLS followed by token ids, truncated to `max_len` entries.
  std::vector<int> encode(std::string_view text, std::size_t max_len) const;
  /// Space-joined tokens; PAD and CLS are skipped.
  std::string decode(std::span<const int> ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Padded id matrix. mask = 0 marks padding.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;

  /// Rows padded with PAD to the longest one.
  static TokenBatch pad(const std::vector<std::vector<int>>& rows);
  std::size_t length(std::size_t row) const;
};

struct MaskingOptions {
  double select_prob = 0.15;
  double mask_prob = 0.8;    // of selected: replace with MASK
  double random_prob = 0.1;  // of selected: replace with a random non-reserved id

  bool operator==(const MaskingOptions&) const = default;
};

enum class MaskAction : std::uint8_t { kNone = 0, kMask = 1, kRandom = 2, kKeep = 3 };

struct MaskedRow {
  std::vector<int> input_ids;
  std::vector<int> labels;  // original id where selected, -1 elsewhere
  std::vector<MaskAction> actions;
};

/// Selects each position other than CLS and PAD with probability
/// select_prob, then applies the 80/10/10 replacement.
MaskedRow apply_masking(std::span<const int> ids, std::size_t vocab_size, Rng& rng,
                        const MaskingOptions& options = {});

struct MaskedBatch {
  TokenBatch tokens;
  std::vector<int> mlm_labels;
  std::vector<std::size_t> documents;  // corpus index of each row

  std::size_t masked_count() const;
  /// Rows [begin, end), re-padded to their own longest row.
  MaskedBatch rows(std::size_t begin, std::size_t end) const;
};

struct BatchOptions {
  std::size_t batch_size = 8;
  MaskingOptions masking;
  bool static_masking = false;  // same mask for a document in every epoch
};

/// One epoch of masked batches over pre-encoded documents. Document order is
/// shuffled per epoch and masking is drawn per document, both from streams
/// derived from (seed, epoch, document), so batches can be regenerated.
std::vector<MaskedBatch> make_batches(const std::vector<std::vector<int>>& documents,
                                      std::size_t vocab_size, const BatchOptions& options,
                                      std::uint64_t seed, std::uint64_t epoch);

std::vector<MaskedBatch> make_batches(const std::vector<std::string>& corpus,
                                      const Vocabulary& vocab, std::size_t max_len,
                                      const BatchOptions& options, std::uint64_t seed,
                                      std::uint64_t epoch);

/// One document per line, UTF-8.
std::vector<std::string> read_corpus(const std::filesystem::path& path);

std::vector<std::vector<int>> encode_all(const std::vector<std::string>& corpus,
                                         const Vocabulary& vocab, std::size_t max_len);

}  // namespace condenser::text
