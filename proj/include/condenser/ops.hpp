#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "condenser/rng.hpp"
#include "condenser/tensor.hpp"

// Differentiable primitives. Every function records itself when grad mode is
// on and an input requires grad. Tensors are row-major; "rows" of a tensor are
// all leading axes flattened against the last one.
namespace condenser::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
/// x[..., n] + bias[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);

/// [n, k] x [k, m] -> [n, m]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [n, k] x [m, k]^T -> [n, m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x[..., in] * weight[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
/// Exact form x * Phi(x).
Tensor gelu(const Tensor& x);

/// Softmax along `axis`; rejects NaN and infinities.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-12);

/// Inverted dropout. Identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

/// Rows of table[V, d] selected by ids; output shape is `leading` + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, Shape leading);

/// Rows of x (as [rows, last]) selected by index.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Stacks [n_i, d] tensors along the first axis.
Tensor concat_rows(const std::vector<Tensor>& parts);

/// seq[B, T, d] -> [B, d] at position `pos`.
Tensor select_position(const Tensor& seq, std::size_t pos);
/// Copy of seq[B, T, d] with position `pos` replaced by rows[B, d].
Tensor replace_position(const Tensor& seq, const Tensor& rows, std::size_t pos);

struct AttentionMask {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::uint8_t> key_valid;  // batch * seq; 0 keys are never attended
  bool isolate_position0 = false;       // queries at t > 0 may not attend key 0
};

/// Scaled dot-product attention over q, k, v of shape [B, T, d] split into
/// `heads` heads. When `probs_out` is given it receives the [B, H, T, T]
/// attention probabilities.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const AttentionMask& mask, std::vector<double>* probs_out = nullptr);

/// -log softmax(logits)[target] for a 1-D logits vector.
Tensor cross_entropy(const Tensor& logits, std::size_t target);

/// Sum over rows with target >= 0 of -log softmax(row)[target], divided by
/// `normalizer` (<= 0 means: number of such rows). `allowed`, when non-empty,
/// is a [rows, classes] 0/1 mask; disallowed classes are left out of the
/// partition function. Logits of -inf are allowed and contribute nothing.
/// Zero selected rows give 0 with a zero gradient.
Tensor masked_cross_entropy(const Tensor& logits, std::span<const int> targets,
                            double normalizer = 0.0, std::span<const std::uint8_t> allowed = {});

/// Row-wise cosine similarity of a[N, d], b[N, d] -> [N]. Zero rows throw.
Tensor row_cosine(const Tensor& a, const Tensor& b);
/// Row-wise Euclidean distance -> [N].
Tensor row_distance(const Tensor& a, const Tensor& b);

}  // namespace condenser::ops
