#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "condenser/encoder.hpp"
#include "condenser/text.hpp"

namespace condenser {

enum class ModelKind : std::uint32_t {
  kCondenser = 0,    // backbone + head + projection
  kEncoderOnly = 1,  // backbone only
  kMlm = 2,          // backbone + projection, plain masked-LM baseline
};

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

struct LossOptions {
  Rng* dropout_rng = nullptr;
  /// Divisor for both MLM sums; <= 0 uses the batch's own masked count.
  double normalizer = 0.0;
  /// Head tokens may not attend to head position 0 (skip-path ablation).
  bool isolate_head_position0 = false;
  /// Cut the gradient path through the late CLS into the backbone.
  bool detach_cls = false;
};

struct LossBreakdown {
  Tensor total;
  Tensor head;      // undefined for kMlm
  Tensor backbone;

  double head_value() const { return head.defined() ? head.item() : 0.0; }
  double backbone_value() const { return backbone.item(); }
};

/// Pre-training model: the encoder backbone, optionally the Condenser head,
/// and the single output projection W[V, d] (plus bias) shared by both MLM
/// losses.
class PretrainModel {
 public:
  PretrainModel(const ModelConfig& config, ModelKind kind, std::uint64_t seed);

  /// Starts from an existing backbone: backbone weights copied, head drawn
  /// fresh, W initialized from the token-embedding matrix.
  static PretrainModel from_encoder(const Encoder& encoder, ModelKind kind, std::uint64_t seed);

  ModelKind kind() const { return kind_; }
  const ModelConfig& config() const { return backbone.config(); }

  /// Head over [cls_late, h_early[1:]]: the late CLS replaces position 0.
  Tensor head_forward(const Tensor& cls_late, const Tensor& h_early, const text::TokenBatch& batch,
                      const ForwardOptions& options = {}) const;

  /// Sum over masked positions of CE(W h_i + b, x_i), divided by `normalizer`
  /// (<= 0: number of masked positions).
  Tensor mlm_loss(const Tensor& hidden, const std::vector<int>& labels, double normalizer = 0.0) const;
  Tensor mlm_head_loss(const Tensor& head_output, const std::vector<int>& labels,
                       double normalizer = 0.0) const {
    return mlm_loss(head_output, labels, normalizer);
  }
  Tensor mlm_backbone_loss(const Tensor& h_late, const std::vector<int>& labels,
                           double normalizer = 0.0) const {
    return mlm_loss(h_late, labels, normalizer);
  }

  LossBreakdown total_loss(const text::MaskedBatch& batch, const LossOptions& options = {}) const;

  /// Backbone only, deep-copied. Its cls_late equals this model's exactly.
  Encoder reduce_to_encoder() const { return backbone.clone(); }

  ParameterList parameters() const;
  std::size_t parameter_count() const { return count_parameters(parameters()); }
  ParameterList head_parameters() const;
  PretrainModel clone() const;

  template <typename Fn>
  void visit(Fn&& fn) {
    backbone.visit(fn);
    for (std::size_t i = 0; i < head.size(); ++i) head[i].visit("head." + std::to_string(i) + ".", fn);
    fn(std::string("mlm.projection.weight"), projection);
    fn(std::string("mlm.projection.bias"), projection_bias);
  }

  Encoder backbone;
  std::vector<TransformerBlock> head;
  Tensor projection;       // [V, d]
  Tensor projection_bias;  // [V]

 private:
  ModelKind kind_;
};

}  // namespace condenser
