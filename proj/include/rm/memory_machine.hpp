#pragma once

#include "rm/model.hpp"

#include <vector>

namespace rm {

/// Fixed-size rehearsal memory of one stream: K slot rows plus the index t of
/// the next segment to be written (starts at 1).
struct MemoryState {
  Matrix<float> slots;
  int step = 1;
};

/// Encodes a batch of segments. `tokens` holds `segments * seq_len` ids in
/// segment-major order, kPadToken marking padding. Returns one feature row
/// per token; pad rows are zero and pads are hidden from self-attention.
/// Throws DataError for ids outside the vocabulary.
template <typename S>
Var<S> encode_segments(const Binder<S>& p, const ModelConfig& cfg, const std::vector<int>& tokens, Index seq_len);

/// Slot-to-item alignment for G streams at once. `memory` is (G*K x d),
/// `features` is (G*N x d), `item_mask` marks valid items (empty = all).
/// alpha[k, n] = w . tanh(W1 m_k + W2 f_n + b), normalized over slots for
/// each item; returns L with l_k = sum_n alpha_hat[k, n] f_n, shape (G*K x d).
/// `weights` receives alpha_hat laid out (G*N x K). When `require_items`
/// is set, a stream with no valid item is an error.
template <typename S>
Var<S> slot_item_align(const Binder<S>& p, Var<S> memory, Var<S> features, Index slots, Index items,
                       const std::vector<unsigned char>& item_mask = {}, Matrix<S>* weights = nullptr,
                       bool require_items = true);

/// m_k <- GRU(m_k, l_k) for every slot row, one shared cell.
template <typename S>
Var<S> update_memory(const Binder<S>& p, Var<S> memory, Var<S> aligned);

/// Initial memory tiled for `streams` streams: (streams*K x d).
template <typename S>
Var<S> initial_memory(const Binder<S>& p, const ModelConfig& cfg, Index streams);

/// Writes every stream segment by segment and returns the final memories,
/// (G*K x d), stream-major. Streams may differ in length; a stream that has
/// run out of segments keeps its memory unchanged. `updates` (if given)
/// receives the number of segment writes applied to each stream.
template <typename S>
Var<S> write_streams(const Binder<S>& p, const ModelConfig& cfg, const std::vector<const std::vector<int>*>& streams,
                     std::vector<int>* updates = nullptr);

/// Single-stream conveniences on float parameters.
MemoryState init_memory(const ParameterStore& params, const ModelConfig& cfg);
MemoryState write_stream(const ParameterStore& params, const ModelConfig& cfg, const std::vector<int>& stream);

/// Memory snapshot in the checkpoint format: tensors "memory.final" (K x d)
/// and "memory.step" (1 x 1).
std::vector<char> serialize_memory(const MemoryState& m);
MemoryState deserialize_memory(const std::vector<char>& bytes);

}  // namespace rm
