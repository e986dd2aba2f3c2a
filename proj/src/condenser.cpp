#include "condenser/condenser.hpp"

namespace condenser {

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kCondenser:
      return "condenser-full";
    case ModelKind::kEncoderOnly:
      return "encoder-only";
    case ModelKind::kMlm:
      return "mlm-full";
  }
  throw Error("unknown model kind");
}

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "condenser-full" || name == "condenser") return ModelKind::kCondenser;
  if (name == "encoder-only" || name == "encoder") return ModelKind::kEncoderOnly;
  if (name == "mlm-full" || name == "mlm") return ModelKind::kMlm;
  throw Error("unknown model kind '" + name + "'");
}

PretrainModel::PretrainModel(const ModelConfig& config, ModelKind kind, std::uint64_t seed)
    : backbone(config, seed), kind_(kind) {
  if (kind == ModelKind::kEncoderOnly)
    throw Error("PretrainModel: encoder-only models have no pre-training head");
  if (kind == ModelKind::kCondenser)
    for (std::size_t i = 0; i < config.head_layers; ++i) head.emplace_back(config);
  projection = Tensor::zeros({config.vocab_size, config.hidden_dim}, true);
  projection_bias = Tensor::zeros({config.vocab_size}, true);

  Rng rng({seed, stream::kInit, 1});
  for (std::size_t i = 0; i < head.size(); ++i)
    head[i].visit("head." + std::to_string(i) + ".", [&](const std::string& name, Tensor& t) {
      init_parameter(name, t, rng, config.init_std);
    });
  init_parameter("mlm.projection.weight", projection, rng, config.init_std);
}

PretrainModel PretrainModel::from_encoder(const Encoder& encoder, ModelKind kind, std::uint64_t seed) {
  PretrainModel model(encoder.config(), kind, seed);
  copy_parameter_values(encoder.parameters(), model.backbone.parameters());
  auto src = encoder.token_embedding.data();
  std::copy(src.begin(), src.end(), model.projection.mutable_data().begin());
  return model;
}

Tensor PretrainModel::head_forward(const Tensor& cls_late, const Tensor& h_early,
                                   const text::TokenBatch& batch,
                                   const ForwardOptions& options) const {
  if (head.empty()) throw Error("head_forward: model has no Condenser head");
  if (cls_late.rank() != 2 || h_early.rank() != 3 || cls_late.dim(0) != h_early.dim(0) ||
      cls_late.dim(1) != h_early.dim(2))
    throw ShapeError("head_forward: cls_late " + shape_str(cls_late.shape()) +
                     " does not match h_early " + shape_str(h_early.shape()));
  if (h_early.dim(0) != batch.batch || h_early.dim(1) != batch.seq)
    throw ShapeError("head_forward: hidden states do not match the token batch");
  const auto mask = make_attention_mask(batch, options.isolate_position0);
  Tensor h = ops::replace_position(h_early, cls_late, 0);
  for (const auto& block : head) h = block.forward(h, mask, options, nullptr);
  return h;
}

Tensor PretrainModel::mlm_loss(const Tensor& hidden, const std::vector<int>& labels,
                               double normalizer) const {
  const std::size_t d = config().hidden_dim;
  if (hidden.numel() != labels.size() * d)
    throw ShapeError("mlm_loss: " + std::to_string(labels.size()) + " labels for hidden " +
                     shape_str(hidden.shape()));
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    rows.push_back(i);
    targets.push_back(labels[i]);
  }
  Tensor selected = ops::gather_rows(hidden, rows);
  Tensor logits = ops::add_bias(ops::matmul_nt(selected, projection), projection_bias);
  return ops::masked_cross_entropy(logits, targets, normalizer);
}

LossBreakdown PretrainModel::total_loss(const text::MaskedBatch& batch,
                                        const LossOptions& options) const {
  ForwardOptions fwd;
  fwd.dropout_rng = options.dropout_rng;
  auto enc = backbone.encode(batch.tokens, fwd);

  LossBreakdown out;
  out.backbone = mlm_backbone_loss(enc.h_late, batch.mlm_labels, options.normalizer);
  if (kind_ == ModelKind::kMlm) {
    out.total = out.backbone;
    return out;
  }
  ForwardOptions head_fwd = fwd;
  head_fwd.isolate_position0 = options.isolate_head_position0;
  Tensor cls = options.detach_cls ? enc.cls_late.detach() : enc.cls_late;
  Tensor head_out = head_forward(cls, enc.h_early, batch.tokens, head_fwd);
  out.head = mlm_head_loss(head_out, batch.mlm_labels, options.normalizer);
  const double w = config().backbone_loss_weight;
  out.total = w == 1.0 ? ops::add(out.head, out.backbone)
                       : ops::add(out.head, ops::scale(out.backbone, w));
  return out;
}

ParameterList PretrainModel::parameters() const {
  ParameterList out;
  const_cast<PretrainModel*>(this)->visit(
      [&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
  return out;
}

ParameterList PretrainModel::head_parameters() const {
  ParameterList out;
  for (std::size_t i = 0; i < head.size(); ++i)
    const_cast<TransformerBlock&>(head[i]).visit(
        "head." + std::to_string(i) + ".",
        [&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
  return out;
}

PretrainModel PretrainModel::clone() const {
  PretrainModel copy = *this;
  copy.visit([](const std::string&, Tensor& t) { t = t.clone(); });
  return copy;
}

}  // namespace condenser
