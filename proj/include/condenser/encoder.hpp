#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "condenser/ops.hpp"
#include "condenser/rng.hpp"
#include "condenser/tensor.hpp"
#include "condenser/text.hpp"

namespace condenser {

/// Architectural hyperparameters shared by the backbone and the head.
struct ModelConfig {
  std::size_t early_layers = 2;
  std::size_t late_layers = 2;
  std::size_t head_layers = 1;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 0;
  std::size_t max_position = 64;
  double dropout_rate = 0.1;
  double layer_norm_eps = 1e-12;
  double init_std = 0.02;
  /// Weight of the backbone MLM constraint in the Condenser total loss.
  double backbone_loss_weight = 1.0;

  void validate() const;
  std::size_t backbone_layers() const { return early_layers + late_layers; }
  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedTensor>;

std::size_t count_parameters(const ParameterList& params);

struct LinearLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
};

struct LayerNormLayer {
  Tensor gain;
  Tensor bias;
};

struct ForwardOptions {
  Rng* dropout_rng = nullptr;  // null = inference, no dropout
  bool capture_attention = false;
  bool isolate_position0 = false;  // block attention from t > 0 to position 0
};

/// Post-norm Transformer block: self-attention and GELU feed-forward, each
/// followed by a residual add and layer norm.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  /// Allocates zero-filled parameters; see init_parameters.
  explicit TransformerBlock(const ModelConfig& config);

  Tensor forward(const Tensor& x, const ops::AttentionMask& mask, const ForwardOptions& options,
                 std::vector<double>* attention_probs) const;

  /// Calls fn(name, tensor) for every parameter, names prefixed by `prefix`.
  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "attention.query.weight", query.weight);
    fn(prefix + "attention.query.bias", query.bias);
    fn(prefix + "attention.key.weight", key.weight);
    fn(prefix + "attention.key.bias", key.bias);
    fn(prefix + "attention.value.weight", value.weight);
    fn(prefix + "attention.value.bias", value.bias);
    fn(prefix + "attention.output.weight", attention_output.weight);
    fn(prefix + "attention.output.bias", attention_output.bias);
    fn(prefix + "attention.norm.gain", attention_norm.gain);
    fn(prefix + "attention.norm.bias", attention_norm.bias);
    fn(prefix + "ffn.in.weight", ffn_in.weight);
    fn(prefix + "ffn.in.bias", ffn_in.bias);
    fn(prefix + "ffn.out.weight", ffn_out.weight);
    fn(prefix + "ffn.out.bias", ffn_out.bias);
    fn(prefix + "ffn.norm.gain", ffn_norm.gain);
    fn(prefix + "ffn.norm.bias", ffn_norm.bias);
  }

  LinearLayer query, key, value, attention_output;
  LayerNormLayer attention_norm;
  LinearLayer ffn_in, ffn_out;
  LayerNormLayer ffn_norm;

 private:
  std::size_t heads_ = 1;
  double dropout_ = 0.0;
  double eps_ = 1e-12;
};

/// Everything the backbone computes for one batch.
struct EncoderOutput {
  std::size_t batch = 0;
  std::size_t seq = 0;
  Tensor h_early;   // [B, T, d], early CLS at position 0
  Tensor h_late;    // [B, T, d]
  Tensor cls_late;  // [B, d]
  /// Per backbone layer (early first) [B, H, T, T] attention probabilities;
  /// filled only when capture_attention is set.
  std::vector<Tensor> attentions;
};

ops::AttentionMask make_attention_mask(const text::TokenBatch& batch, bool isolate_position0 = false);

/// Token + learned position embeddings followed by early and late groups of
/// Transformer blocks.
class Encoder {
 public:
  Encoder(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  Tensor embed(const text::TokenBatch& batch, Rng* dropout_rng = nullptr) const;
  EncoderOutput encode(const text::TokenBatch& batch, const ForwardOptions& options = {}) const;

  /// Names are prefixed "encoder.".
  ParameterList parameters() const;
  std::size_t parameter_count() const { return count_parameters(parameters()); }

  /// Independent deep copy.
  Encoder clone() const;

  template <typename Fn>
  void visit(Fn&& fn) {
    fn(std::string("encoder.embedding.token"), token_embedding);
    fn(std::string("encoder.embedding.position"), position_embedding);
    fn(std::string("encoder.embedding.norm.gain"), embedding_norm.gain);
    fn(std::string("encoder.embedding.norm.bias"), embedding_norm.bias);
    for (std::size_t i = 0; i < early.size(); ++i)
      early[i].visit("encoder.early." + std::to_string(i) + ".", fn);
    for (std::size_t i = 0; i < late.size(); ++i)
      late[i].visit("encoder.late." + std::to_string(i) + ".", fn);
  }

  Tensor token_embedding;     // [V, d]
  Tensor position_embedding;  // [max_position, d]
  LayerNormLayer embedding_norm;
  std::vector<TransformerBlock> early;
  std::vector<TransformerBlock> late;

 private:
  ModelConfig config_;
};

/// CLS vectors [N, d] for raw texts, encoded as one padded batch.
Tensor encode_cls(const Encoder& encoder, const text::Vocabulary& vocab,
                  const std::vector<std::string>& texts, std::size_t max_len,
                  const ForwardOptions& options = {});

/// BERT-style initialization in visiting order: weights and embeddings from a
/// truncated normal, biases 0, layer-norm gains 1.
void init_parameter(const std::string& name, Tensor& tensor, Rng& rng, double stddev);

/// Copies parameter values by name from `source` into `target`; both lists
/// must hold the same names and shapes.
void copy_parameter_values(const ParameterList& source, const ParameterList& target);

}  // namespace condenser
