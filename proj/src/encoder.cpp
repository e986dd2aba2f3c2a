#include "condenser/encoder.hpp"

#include <map>

namespace condenser {

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

LinearLayer make_linear(std::size_t in, std::size_t out) {
  return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
}

LayerNormLayer make_norm(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

}  // namespace

void ModelConfig::validate() const {
  if (early_layers < 1 || late_layers < 1 || head_layers < 1)
    throw Error("model config: every layer group needs at least one layer");
  if (num_heads == 0 || hidden_dim == 0 || hidden_dim % num_heads != 0)
    throw Error("model config: hidden_dim must be a positive multiple of num_heads");
  if (ffn_dim == 0) throw Error("model config: ffn_dim must be positive");
  if (vocab_size <= static_cast<std::size_t>(text::kNumReserved))
    throw Error("model config: vocab_size must exceed the reserved ids");
  if (max_position < 1) throw Error("model config: max_position must be positive");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw Error("model config: dropout_rate in [0, 1)");
  if (!(layer_norm_eps > 0.0)) throw Error("model config: layer_norm_eps must be positive");
}

std::size_t count_parameters(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

void init_parameter(const std::string& name, Tensor& tensor, Rng& rng, double stddev) {
  auto data = tensor.mutable_data();
  if (ends_with(name, ".gain")) {
    std::fill(data.begin(), data.end(), 1.0);
  } else if (ends_with(name, ".bias")) {
    std::fill(data.begin(), data.end(), 0.0);
  } else {
    for (auto& v : data) v = rng.truncated_normal(stddev);
  }
}

void copy_parameter_values(const ParameterList& source, const ParameterList& target) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& p : source) by_name.emplace(p.name, &p.tensor);
  if (by_name.size() != target.size()) throw Error("copy_parameter_values: parameter sets differ");
  for (const auto& p : target) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw Error("copy_parameter_values: missing " + p.name);
    if (it->second->shape() != p.tensor.shape())
      throw ShapeError("copy_parameter_values: shape mismatch for " + p.name);
    Tensor dst = p.tensor;
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

TransformerBlock::TransformerBlock(const ModelConfig& config)
    : query(make_linear(config.hidden_dim, config.hidden_dim)),
      key(make_linear(config.hidden_dim, config.hidden_dim)),
      value(make_linear(config.hidden_dim, config.hidden_dim)),
      attention_output(make_linear(config.hidden_dim, config.hidden_dim)),
      attention_norm(make_norm(config.hidden_dim)),
      ffn_in(make_linear(config.hidden_dim, config.ffn_dim)),
      ffn_out(make_linear(config.ffn_dim, config.hidden_dim)),
      ffn_norm(make_norm(config.hidden_dim)),
      heads_(config.num_heads),
      dropout_(config.dropout_rate),
      eps_(config.layer_norm_eps) {}

Tensor TransformerBlock::forward(const Tensor& x, const ops::AttentionMask& mask,
                                 const ForwardOptions& options,
                                 std::vector<double>* attention_probs) const {
  Tensor context = ops::multi_head_attention(query(x), key(x), value(x), heads_, mask, attention_probs);
  Tensor attended = attention_output(context);
  if (options.dropout_rng) attended = ops::dropout(attended, dropout_, *options.dropout_rng);
  Tensor h = ops::layer_norm(ops::add(x, attended), attention_norm.gain, attention_norm.bias, eps_);
  Tensor ffn = ffn_out(ops::gelu(ffn_in(h)));
  if (options.dropout_rng) ffn = ops::dropout(ffn, dropout_, *options.dropout_rng);
  return ops::layer_norm(ops::add(h, ffn), ffn_norm.gain, ffn_norm.bias, eps_);
}

ops::AttentionMask make_attention_mask(const text::TokenBatch& batch, bool isolate_position0) {
  ops::AttentionMask mask;
  mask.batch = batch.batch;
  mask.seq = batch.seq;
  mask.key_valid = batch.mask;
  mask.isolate_position0 = isolate_position0;
  return mask;
}

Encoder::Encoder(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t d = config_.hidden_dim;
  token_embedding = Tensor::zeros({config_.vocab_size, d}, true);
  position_embedding = Tensor::zeros({config_.max_position, d}, true);
  embedding_norm = make_norm(d);
  for (std::size_t i = 0; i < config_.early_layers; ++i) early.emplace_back(config_);
  for (std::size_t i = 0; i < config_.late_layers; ++i) late.emplace_back(config_);
  Rng rng({seed, stream::kInit});
  visit([&](const std::string& name, Tensor& t) { init_parameter(name, t, rng, config_.init_std); });
}

Tensor Encoder::embed(const text::TokenBatch& batch, Rng* dropout_rng) const {
  if (batch.seq > config_.max_position)
    throw Error("embed: sequence length " + std::to_string(batch.seq) + " exceeds max_position " +
                std::to_string(config_.max_position));
  if (batch.ids.size() != batch.batch * batch.seq || batch.mask.size() != batch.ids.size())
    throw ShapeError("embed: malformed token batch");
  std::vector<int> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % batch.seq);
  Tensor tokens = ops::embedding(token_embedding, batch.ids, {batch.batch, batch.seq});
  Tensor pos = ops::embedding(position_embedding, positions, {batch.batch, batch.seq});
  Tensor h = ops::layer_norm(ops::add(tokens, pos), embedding_norm.gain, embedding_norm.bias,
                             config_.layer_norm_eps);
  if (dropout_rng) h = ops::dropout(h, config_.dropout_rate, *dropout_rng);
  return h;
}

EncoderOutput Encoder::encode(const text::TokenBatch& batch, const ForwardOptions& options) const {
  EncoderOutput out;
  out.batch = batch.batch;
  out.seq = batch.seq;
  const auto mask = make_attention_mask(batch);
  const Shape attention_shape{batch.batch, config_.num_heads, batch.seq, batch.seq};

  auto run = [&](const std::vector<TransformerBlock>& blocks, Tensor h) {
    for (const auto& block : blocks) {
      if (options.capture_attention) {
        std::vector<double> probs;
        h = block.forward(h, mask, options, &probs);
        out.attentions.emplace_back(attention_shape, std::move(probs));
      } else {
        h = block.forward(h, mask, options, nullptr);
      }
    }
    return h;
  };

  out.h_early = run(early, embed(batch, options.dropout_rng));
  out.h_late = run(late, out.h_early);
  out.cls_late = ops::select_position(out.h_late, 0);
  return out;
}

Tensor encode_cls(const Encoder& encoder, const text::Vocabulary& vocab,
                  const std::vector<std::string>& texts, std::size_t max_len,
                  const ForwardOptions& options) {
  if (texts.empty()) return Tensor::zeros({0, encoder.config().hidden_dim});
  std::vector<std::vector<int>> rows;
  rows.reserve(texts.size());
  for (const auto& t : texts) rows.push_back(vocab.encode(t, max_len));
  return encoder.encode(text::TokenBatch::pad(rows), options).cls_late;
}

ParameterList Encoder::parameters() const {
  ParameterList out;
  const_cast<Encoder*>(this)->visit(
      [&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
  return out;
}

Encoder Encoder::clone() const {
  Encoder copy = *this;
  copy.visit([](const std::string&, Tensor& t) { t = t.clone(); });
  return copy;
}

}  // namespace condenser
