#pragma once

#include "rm/autodiff.hpp"
#include "rm/params.hpp"

#include <string>
#include <vector>

namespace rm {

/// Standalone softmax over a vector, max-subtracted. Throws NumericError for
/// non-finite input.
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, 1> softmax(const Eigen::Matrix<S, Eigen::Dynamic, 1>& x);

/// Fixed sinusoidal position table (len x d):
/// pe[p, 2i] = sin(p / 10000^(2i/d)), pe[p, 2i+1] = cos(p / 10000^(2i/d)).
template <typename S>
Matrix<S> sinusoidal_positions(Index len, Index d);

struct TransformerShape {
  Index width = 64;
  Index heads = 4;
  Index layers = 3;
  Index ffn_width() const { return 4 * width; }
};

// Parameter registration. Weights are stored (in x out) so a linear map is x * W + b.
void add_linear(ParameterStore& store, const std::string& prefix, Index in, Index out, Rng& rng);
void add_layer_norm(ParameterStore& store, const std::string& prefix, Index width);
void add_gru(ParameterStore& store, const std::string& prefix, Index input, Index hidden, Rng& rng);
void add_attention(ParameterStore& store, const std::string& prefix, Index width, Rng& rng);
void add_encoder(ParameterStore& store, const std::string& prefix, const TransformerShape& shape, Rng& rng);
void add_decoder(ParameterStore& store, const std::string& prefix, const TransformerShape& shape, Rng& rng);

template <typename S>
Var<S> linear(const Binder<S>& p, const std::string& prefix, Var<S> x);

/// z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
/// n = tanh(x Wh + (r * h) Uh + bh), h' = (1 - z) * h + z * n.
/// Rows of h and x are independent cells sharing one parameter set.
template <typename S>
Var<S> gru_cell(const Binder<S>& p, const std::string& prefix, Var<S> h, Var<S> x);

/// Projects queries/keys/values, runs grouped scaled dot-product attention
/// and applies the output projection.
template <typename S>
Var<S> multi_head_attention(const Binder<S>& p, const std::string& prefix, Var<S> queries, Var<S> keys, Var<S> values,
                            const AttentionLayout& layout, std::vector<Matrix<S>>* weights = nullptr);

/// Post-norm encoder over groups of `seq_len` rows. Sinusoidal positions are
/// added at the input; `key_mask` (one byte per row, may be empty) hides pad
/// positions from self-attention.
template <typename S>
Var<S> transformer_encoder(const Binder<S>& p, const std::string& prefix, const TransformerShape& shape, Var<S> x,
                           Index seq_len, const std::vector<unsigned char>& key_mask = {});

/// Bidirectional decoder (no future mask): self-attention over the fragment,
/// cross-attention with memory slots as keys and values, feed-forward.
/// `memory` holds groups of `slots` rows; fragment group g reads memory group
/// `memory_group[g]` (identity when empty). If `cross_weights` is given it
/// receives the cross-attention matrices of every layer.
template <typename S>
Var<S> transformer_decoder(const Binder<S>& p, const std::string& prefix, const TransformerShape& shape, Var<S> x,
                           Index seq_len, Var<S> memory, Index slots, const std::vector<Index>& memory_group = {},
                           const std::vector<unsigned char>& key_mask = {},
                           std::vector<Matrix<S>>* cross_weights = nullptr);

}  // namespace rm
