#include "rm/memory_machine.hpp"

#include <algorithm>
#include <cmath>

namespace rm {

template <typename S>
Var<S> encode_segments(const Binder<S>& p, const ModelConfig& cfg, const std::vector<int>& tokens, Index seq_len) {
  if (tokens.empty() || static_cast<Index>(tokens.size()) % seq_len != 0)
    throw ShapeError("encode_segments: token count is not a multiple of the segment length");
  std::vector<Index> rows(tokens.size());
  std::vector<unsigned char> valid(tokens.size());
  Matrix<S> keep(static_cast<Index>(tokens.size()), 1);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t == kPadToken) {
      rows[i] = -1;
      valid[i] = 0;
    } else if (t < 0 || t >= cfg.items) {
      throw DataError("encode_segments: item id " + std::to_string(t) + " outside vocabulary of " +
                      std::to_string(cfg.items));
    } else {
      rows[i] = t;
      valid[i] = 1;
    }
    keep(static_cast<Index>(i), 0) = valid[i] ? S(1) : S(0);
  }
  // Scaled by sqrt(d) so item identity is not swamped by the position code.
  auto x = std::sqrt(static_cast<S>(cfg.width)) * gather_rows(p("embed.items"), rows);
  auto h = transformer_encoder(p, "encoder", cfg.encoder_shape(), x, seq_len, valid);
  return mul(h, p.graph().constant(std::move(keep)));
}

template <typename S>
Var<S> slot_item_align(const Binder<S>& p, Var<S> memory, Var<S> features, Index slots, Index items,
                       const std::vector<unsigned char>& item_mask, Matrix<S>* weights, bool require_items) {
  if (memory.rows() % slots != 0 || features.rows() % items != 0 ||
      memory.rows() / slots != features.rows() / items)
    throw ShapeError("slot_item_align: memory " + shape_string(memory.value()) + " and features " +
                     shape_string(features.value()) + " do not describe the same streams");
  if (memory.cols() != features.cols()) throw ShapeError("slot_item_align: width mismatch");
  const Index groups = memory.rows() / slots;
  if (require_items && !item_mask.empty()) {
    for (Index g = 0; g < groups; ++g) {
      bool any = false;
      for (Index n = 0; n < items; ++n) any = any || item_mask[static_cast<std::size_t>(g * items + n)];
      if (!any) throw ShapeError("slot_item_align: segment without valid items");
    }
  }
  auto proj_mem = memory * p("align.w1");
  auto proj_items = features * p("align.w2") + p("align.b");
  auto scores = additive_scores(proj_mem, proj_items, p("align.w"), slots, items);
  auto alpha = softmax_rows(scores);
  if (!item_mask.empty()) {
    Matrix<S> keep(features.rows(), 1);
    for (Index i = 0; i < keep.rows(); ++i) keep(i, 0) = item_mask[static_cast<std::size_t>(i)] ? S(1) : S(0);
    alpha = mul(alpha, p.graph().constant(std::move(keep)));
  }
  if (weights) *weights = alpha.value();
  return grouped_weighted_sum(alpha, features, items);
}

template <typename S>
Var<S> update_memory(const Binder<S>& p, Var<S> memory, Var<S> aligned) {
  if (memory.rows() != aligned.rows() || memory.cols() != aligned.cols())
    throw ShapeError("update_memory: memory " + shape_string(memory.value()) + " vs aligned " +
                     shape_string(aligned.value()));
  return gru_cell(p, "gru", memory, aligned);
}

template <typename S>
Var<S> initial_memory(const Binder<S>& p, const ModelConfig& cfg, Index streams) {
  (void)cfg;
  return tile_rows(p("memory.init"), streams);
}

template <typename S>
Var<S> write_streams(const Binder<S>& p, const ModelConfig& cfg, const std::vector<const std::vector<int>*>& streams,
                     std::vector<int>* updates) {
  if (streams.empty()) throw ShapeError("write_streams: no streams");
  const Index n = cfg.segment;
  const auto G = static_cast<Index>(streams.size());
  Index T = 0;
  for (const auto* s : streams) {
    if (s->empty()) throw ShapeError("write_streams: empty stream");
    T = std::max<Index>(T, (static_cast<Index>(s->size()) + n - 1) / n);
  }
  // Step-major layout: segment t of stream g occupies rows (t*G + g)*n ...
  std::vector<int> tokens(static_cast<std::size_t>(T * G * n), kPadToken);
  for (Index g = 0; g < G; ++g) {
    const auto& s = *streams[static_cast<std::size_t>(g)];
    for (std::size_t i = 0; i < s.size(); ++i) {
      const Index t = static_cast<Index>(i) / n, j = static_cast<Index>(i) % n;
      tokens[static_cast<std::size_t>((t * G + g) * n + j)] = s[i];
    }
  }
  auto features = encode_segments(p, cfg, tokens, n);
  auto memory = initial_memory(p, cfg, G);
  if (updates) updates->assign(streams.size(), 0);

  for (Index t = 0; t < T; ++t) {
    std::vector<Index> rows(static_cast<std::size_t>(G * n));
    std::vector<unsigned char> mask(rows.size());
    std::vector<unsigned char> live(static_cast<std::size_t>(G), 0);
    for (Index r = 0; r < G * n; ++r) {
      rows[static_cast<std::size_t>(r)] = t * G * n + r;
      mask[static_cast<std::size_t>(r)] = tokens[static_cast<std::size_t>(t * G * n + r)] != kPadToken;
      if (mask[static_cast<std::size_t>(r)]) live[static_cast<std::size_t>(r / n)] = 1;
    }
    const bool all_live = std::all_of(live.begin(), live.end(), [](unsigned char v) { return v != 0; });
    auto f = gather_rows(features, rows);
    auto aligned = slot_item_align(p, memory, f, cfg.slots, n, mask, static_cast<Matrix<S>*>(nullptr), false);
    auto next = update_memory(p, memory, aligned);
    if (all_live) {
      memory = next;
    } else {
      Matrix<S> keep(G * cfg.slots, 1);
      for (Index r = 0; r < keep.rows(); ++r) keep(r, 0) = live[static_cast<std::size_t>(r / cfg.slots)] ? S(1) : S(0);
      auto k = p.graph().constant(keep);
      auto drop = p.graph().constant((S(1) - keep.array()).matrix());
      memory = mul(next, k) + mul(memory, drop);
    }
    if (updates)
      for (Index g = 0; g < G; ++g) (*updates)[static_cast<std::size_t>(g)] += live[static_cast<std::size_t>(g)];
  }
  return memory;
}

MemoryState init_memory(const ParameterStore& params, const ModelConfig& cfg) {
  const auto& init = params.at("memory.init");
  if (init.rows() != cfg.slots || init.cols() != cfg.width)
    throw ShapeError("init_memory: parameter shape " + shape_string(init) + " does not match K x d = " +
                     shape_string(cfg.slots, cfg.width));
  return MemoryState{init, 1};
}

MemoryState write_stream(const ParameterStore& params, const ModelConfig& cfg, const std::vector<int>& stream) {
  if (stream.empty()) throw ShapeError("write_stream: empty stream");
  Graph<float> g;
  Binder<float> p(g, params.values());
  std::vector<int> updates;
  auto m = write_streams(p, cfg, {&stream}, &updates);
  return MemoryState{m.value(), 1 + updates.front()};
}

std::vector<char> serialize_memory(const MemoryState& m) {
  NamedTensors t;
  t.tensors.emplace_back("memory.final", Tensor(m.slots));
  t.tensors.emplace_back("memory.step", Tensor(Matrix<float>::Constant(1, 1, static_cast<float>(m.step))));
  return encode_checkpoint(t);
}

MemoryState deserialize_memory(const std::vector<char>& bytes) {
  const auto t = decode_checkpoint(bytes);
  MemoryState m;
  bool have_slots = false, have_step = false;
  for (const auto& [name, tensor] : t.tensors) {
    if (name == "memory.final") {
      m.slots = tensor.data;
      have_slots = true;
    } else if (name == "memory.step") {
      m.step = static_cast<int>(tensor.data(0, 0));
      have_step = true;
    }
  }
  if (!have_slots || !have_step) throw DataError("memory snapshot lacks memory.final or memory.step");
  return m;
}

#define RM_INSTANTIATE(S)                                                                                       \
  template Var<S> encode_segments(const Binder<S>&, const ModelConfig&, const std::vector<int>&, Index);        \
  template Var<S> slot_item_align(const Binder<S>&, Var<S>, Var<S>, Index, Index,                               \
                                  const std::vector<unsigned char>&, Matrix<S>*, bool);                         \
  template Var<S> update_memory(const Binder<S>&, Var<S>, Var<S>);                                              \
  template Var<S> initial_memory(const Binder<S>&, const ModelConfig&, Index);                                  \
  template Var<S> write_streams(const Binder<S>&, const ModelConfig&, const std::vector<const std::vector<int>*>&, \
                                std::vector<int>*);

RM_INSTANTIATE(float)
RM_INSTANTIATE(double)

#undef RM_INSTANTIATE

}  // namespace rm
