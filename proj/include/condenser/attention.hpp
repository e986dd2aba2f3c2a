#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "condenser/encoder.hpp"
#include "condenser/tensor.hpp"
#include "condenser/text.hpp"

namespace condenser {

/// Per-layer CLS attention entropy in nats, early layers first.
struct EntropyProfile {
  std::vector<double> mean;
  std::vector<double> stddev;  // sample standard deviation over documents
  std::size_t samples = 0;
  std::string tag;

  std::size_t layers() const { return mean.size(); }
  bool operator==(const EntropyProfile&) const = default;
};

/// -sum p ln p, with 0 ln 0 = 0.
double entropy(std::span<const double> probs);

/// Head-averaged entropy of the attention row leaving position 0 of sample
/// `row`, restricted to its first `length` positions. One value per layer;
/// each map is [B, H, T, T].
std::vector<double> cls_entropy_by_layer(const std::vector<Tensor>& attentions, std::size_t row,
                                         std::size_t length);

/// Mean and sample std per layer of per-document values.
EntropyProfile summarize_entropies(const std::vector<std::vector<double>>& per_document,
                                   std::string tag);

/// Documents with fewer than two tokens (CLS excluded) are skipped; the first
/// `max_samples` remaining documents are measured.
EntropyProfile cls_attention_entropy(const Encoder& encoder, const text::Vocabulary& vocab,
                                     const std::vector<std::string>& documents, std::size_t max_len,
                                     std::size_t max_samples, std::string tag = {});

struct LayerDelta {
  std::size_t layer = 0;
  double a = 0.0;
  double b = 0.0;
  double delta = 0.0;     // b - a
  double relative = 0.0;  // (b - a) / a; NaN when a is 0
};

struct ProfileComparison {
  std::string tag_a;
  std::string tag_b;
  std::vector<LayerDelta> layers;
  double mean_abs_delta = 0.0;
  double max_abs_delta = 0.0;
};

ProfileComparison compare_profiles(const EntropyProfile& a, const EntropyProfile& b);

/// "layer,mean_entropy_nats,std,n_samples,model_tag"
void write_profile_csv(const std::filesystem::path& path, const EntropyProfile& profile);
EntropyProfile read_profile_csv(const std::filesystem::path& path);
/// "layer,entropy_a,entropy_b,delta,relative_delta,tag_a,tag_b"
void write_comparison_csv(const std::filesystem::path& path, const ProfileComparison& comparison);

}  // namespace condenser
