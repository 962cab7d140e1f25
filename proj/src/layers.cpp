#include "rm/layers.hpp"

#include <cmath>

namespace rm {

template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, 1> softmax(const Eigen::Matrix<S, Eigen::Dynamic, 1>& x) {
  if (x.size() == 0) throw ShapeError("softmax: empty input");
  if (!x.allFinite()) throw NumericError("softmax: invalid activation (non-finite input)");
  Eigen::Matrix<S, Eigen::Dynamic, 1> e = (x.array() - x.maxCoeff()).exp();
  return e / e.sum();
}

template <typename S>
Matrix<S> sinusoidal_positions(Index len, Index d) {
  Matrix<S> pe(len, d);
  for (Index pos = 0; pos < len; ++pos)
    for (Index i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) / rate;
      pe(pos, i) = static_cast<S>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

// ---------------------------------------------------------------------------
// Registration

void add_linear(ParameterStore& store, const std::string& prefix, Index in, Index out, Rng& rng) {
  store.add(prefix + ".w", in, out, Init::Glorot, rng);
  store.add(prefix + ".b", 1, out, Init::Zeros, rng);
}

void add_layer_norm(ParameterStore& store, const std::string& prefix, Index width) {
  Rng unused;
  store.add(prefix + ".gain", 1, width, Init::Ones, unused);
  store.add(prefix + ".bias", 1, width, Init::Zeros, unused);
}

void add_gru(ParameterStore& store, const std::string& prefix, Index input, Index hidden, Rng& rng) {
  for (const char* gate : {"z", "r", "h"}) {
    store.add(prefix + ".w" + gate, input, hidden, Init::Glorot, rng);
    store.add(prefix + ".u" + gate, hidden, hidden, Init::Glorot, rng);
    store.add(prefix + ".b" + gate, 1, hidden, Init::Zeros, rng);
  }
}

void add_attention(ParameterStore& store, const std::string& prefix, Index width, Rng& rng) {
  for (const char* proj : {"q", "k", "v", "o"}) add_linear(store, prefix + "." + proj, width, width, rng);
}

namespace {

std::string layer_prefix(const std::string& prefix, Index i) { return prefix + ".layer" + std::to_string(i); }

void add_ffn(ParameterStore& store, const std::string& prefix, const TransformerShape& s, Rng& rng) {
  add_linear(store, prefix + ".ffn1", s.width, s.ffn_width(), rng);
  add_linear(store, prefix + ".ffn2", s.ffn_width(), s.width, rng);
}

}  // namespace

void add_encoder(ParameterStore& store, const std::string& prefix, const TransformerShape& s, Rng& rng) {
  if (s.heads <= 0 || s.width % s.heads != 0) throw ConfigError("head count must divide the model width");
  for (Index i = 0; i < s.layers; ++i) {
    const auto lp = layer_prefix(prefix, i);
    add_attention(store, lp + ".self", s.width, rng);
    add_layer_norm(store, lp + ".norm1", s.width);
    add_ffn(store, lp, s, rng);
    add_layer_norm(store, lp + ".norm2", s.width);
  }
}

void add_decoder(ParameterStore& store, const std::string& prefix, const TransformerShape& s, Rng& rng) {
  if (s.heads <= 0 || s.width % s.heads != 0) throw ConfigError("head count must divide the model width");
  for (Index i = 0; i < s.layers; ++i) {
    const auto lp = layer_prefix(prefix, i);
    add_attention(store, lp + ".self", s.width, rng);
    add_layer_norm(store, lp + ".norm1", s.width);
    add_attention(store, lp + ".cross", s.width, rng);
    add_layer_norm(store, lp + ".norm2", s.width);
    add_ffn(store, lp, s, rng);
    add_layer_norm(store, lp + ".norm3", s.width);
  }
}

// ---------------------------------------------------------------------------
// Forward

template <typename S>
Var<S> linear(const Binder<S>& p, const std::string& prefix, Var<S> x) {
  return x * p(prefix + ".w") + p(prefix + ".b");
}

template <typename S>
Var<S> gru_cell(const Binder<S>& p, const std::string& prefix, Var<S> h, Var<S> x) {
  if (h.rows() != x.rows()) throw ShapeError("gru_cell: state has " + std::to_string(h.rows()) + " rows, input " +
                                             std::to_string(x.rows()));
  const auto& pre = prefix;
  if (x.cols() != p.table().at(pre + ".wz").rows() || h.cols() != p.table().at(pre + ".uz").rows())
    throw ShapeError("gru_cell: dimension mismatch, state " + shape_string(h.value()) + ", input " +
                     shape_string(x.value()));
  auto z = sigmoid(x * p(pre + ".wz") + h * p(pre + ".uz") + p(pre + ".bz"));
  auto r = sigmoid(x * p(pre + ".wr") + h * p(pre + ".ur") + p(pre + ".br"));
  auto n = tanh(x * p(pre + ".wh") + mul(r, h) * p(pre + ".uh") + p(pre + ".bh"));
  return mul(one_minus(z), h) + mul(z, n);
}

template <typename S>
Var<S> multi_head_attention(const Binder<S>& p, const std::string& prefix, Var<S> queries, Var<S> keys, Var<S> values,
                            const AttentionLayout& layout, std::vector<Matrix<S>>* weights) {
  auto q = linear(p, prefix + ".q", queries);
  auto k = linear(p, prefix + ".k", keys);
  auto v = linear(p, prefix + ".v", values);
  return linear(p, prefix + ".o", attention(q, k, v, layout, weights));
}

namespace {

template <typename S>
Var<S> add_positions(Var<S> x, Index seq_len) {
  if (x.rows() == 0 || seq_len <= 0 || x.rows() % seq_len != 0)
    throw ShapeError("transformer: input of " + std::to_string(x.rows()) + " rows is not a whole number of length-" +
                     std::to_string(seq_len) + " sequences");
  auto pe = sinusoidal_positions<S>(seq_len, x.cols());
  return x + x.graph->constant(pe.replicate(x.rows() / seq_len, 1));
}

template <typename S>
Var<S> feed_forward(const Binder<S>& p, const std::string& lp, Var<S> x) {
  return linear(p, lp + ".ffn2", relu(linear(p, lp + ".ffn1", x)));
}

template <typename S>
Var<S> norm(const Binder<S>& p, const std::string& prefix, Var<S> x) {
  return layer_norm(x, p(prefix + ".gain"), p(prefix + ".bias"));
}

}  // namespace

template <typename S>
Var<S> transformer_encoder(const Binder<S>& p, const std::string& prefix, const TransformerShape& shape, Var<S> x,
                           Index seq_len, const std::vector<unsigned char>& key_mask) {
  if (x.rows() == 0) throw ShapeError("transformer_encoder: empty sequence");
  auto h = add_positions(x, seq_len);
  AttentionLayout self{shape.heads, seq_len, seq_len, {}, key_mask};
  for (Index i = 0; i < shape.layers; ++i) {
    const auto lp = layer_prefix(prefix, i);
    h = norm(p, lp + ".norm1", h + multi_head_attention(p, lp + ".self", h, h, h, self));
    h = norm(p, lp + ".norm2", h + feed_forward(p, lp, h));
  }
  return h;
}

template <typename S>
Var<S> transformer_decoder(const Binder<S>& p, const std::string& prefix, const TransformerShape& shape, Var<S> x,
                           Index seq_len, Var<S> memory, Index slots, const std::vector<Index>& memory_group,
                           const std::vector<unsigned char>& key_mask, std::vector<Matrix<S>>* cross_weights) {
  if (slots <= 0 || memory.rows() == 0) throw ShapeError("transformer_decoder: memory with at least one slot required");
  if (x.rows() == 0) throw ShapeError("transformer_decoder: empty fragment");
  auto h = add_positions(x, seq_len);
  AttentionLayout self{shape.heads, seq_len, seq_len, {}, key_mask};
  AttentionLayout cross{shape.heads, seq_len, slots, memory_group, {}};
  if (cross_weights) cross_weights->clear();
  for (Index i = 0; i < shape.layers; ++i) {
    const auto lp = layer_prefix(prefix, i);
    h = norm(p, lp + ".norm1", h + multi_head_attention(p, lp + ".self", h, h, h, self));
    std::vector<Matrix<S>> w;
    h = norm(p, lp + ".norm2",
             h + multi_head_attention(p, lp + ".cross", h, memory, memory, cross, cross_weights ? &w : nullptr));
    if (cross_weights) cross_weights->insert(cross_weights->end(), w.begin(), w.end());
    h = norm(p, lp + ".norm3", h + feed_forward(p, lp, h));
  }
  return h;
}

#define RM_INSTANTIATE(S)                                                                                           \
  template Eigen::Matrix<S, Eigen::Dynamic, 1> softmax(const Eigen::Matrix<S, Eigen::Dynamic, 1>&);                \
  template Matrix<S> sinusoidal_positions<S>(Index, Index);                                                         \
  template Var<S> linear(const Binder<S>&, const std::string&, Var<S>);                                             \
  template Var<S> gru_cell(const Binder<S>&, const std::string&, Var<S>, Var<S>);                                   \
  template Var<S> multi_head_attention(const Binder<S>&, const std::string&, Var<S>, Var<S>, Var<S>,                \
                                       const AttentionLayout&, std::vector<Matrix<S>>*);                            \
  template Var<S> transformer_encoder(const Binder<S>&, const std::string&, const TransformerShape&, Var<S>, Index, \
                                      const std::vector<unsigned char>&);                                           \
  template Var<S> transformer_decoder(const Binder<S>&, const std::string&, const TransformerShape&, Var<S>, Index, \
                                      Var<S>, Index, const std::vector<Index>&, const std::vector<unsigned char>&,  \
                                      std::vector<Matrix<S>>*);

RM_INSTANTIATE(float)
RM_INSTANTIATE(double)

#undef RM_INSTANTIATE

}  // namespace rm
