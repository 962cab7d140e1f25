#include "rm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rm {

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "(" << rows << ", " << cols << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Graph

template <typename S>
Var<S> Graph<S>::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Graph<S>::variable(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Graph<S>::param(const std::string& name, const Mat& value) {
  if (auto it = params_.find(name); it != params_.end()) return {this, it->second};
  auto v = variable(value);
  params_.emplace(name, v.id);
  return v;
}

template <typename S>
Var<S> Graph<S>::push(Mat value, const std::vector<int>& parents, BackwardFn fn) {
  bool needs = false;
  for (int p : parents) needs = needs || nodes_[p].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, needs});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Graph<S>::push(Mat value, std::initializer_list<int> parents, BackwardFn fn) {
  return push(std::move(value), std::vector<int>(parents), std::move(fn));
}

template <typename S>
typename Graph<S>::Mat Graph<S>::grad(Var<S> v) const {
  const auto& n = nodes_.at(v.id);
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

template <typename S>
void Graph<S>::backward(Var<S> loss) {
  const auto& l = nodes_.at(loss.id).value;
  if (l.rows() != 1 || l.cols() != 1)
    throw ShapeError("backward: loss must be a scalar, got " + shape_string(l));
  if (!std::isfinite(static_cast<double>(l(0, 0)))) throw NumericError("backward: loss is not finite");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Mat::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

template <typename S>
ParamTable<S> Graph<S>::param_grads(const ParamTable<S>& table) const {
  ParamTable<S> out;
  for (const auto& [name, value] : table) {
    auto it = params_.find(name);
    if (it == params_.end() || nodes_[it->second].grad.size() == 0)
      out.emplace(name, Mat::Zero(value.rows(), value.cols()));
    else
      out.emplace(name, nodes_[it->second].grad);
  }
  return out;
}

template <typename S>
Var<S> Binder<S>::operator()(const std::string& name) const {
  auto it = table_->find(name);
  if (it == table_->end()) throw ConfigError("unknown parameter '" + name + "'");
  return graph_->param(name, it->second);
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

namespace {

template <typename S>
Matrix<S> expand(const Matrix<S>& m, Index r, Index c) {
  if (m.rows() == r && m.cols() == c) return m;
  if (m.rows() == 1 && m.cols() == c) return m.replicate(r, 1);
  if (m.cols() == 1 && m.rows() == r) return m.replicate(1, c);
  if (m.size() == 1) return Matrix<S>::Constant(r, c, m(0, 0));
  throw ShapeError("cannot broadcast " + shape_string(m) + " to " + shape_string(r, c));
}

template <typename S>
Matrix<S> reduce_to(const Matrix<S>& g, Index r, Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  if (r == 1 && c == 1) return Matrix<S>::Constant(1, 1, g.sum());
  if (r == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

std::pair<Index, Index> broadcast_shape(Index ar, Index ac, Index br, Index bc) {
  auto dim = [&](Index x, Index y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError("incompatible shapes " + shape_string(ar, ac) + " and " + shape_string(br, bc));
  };
  return {dim(ar, br), dim(ac, bc)};
}

template <typename S>
void check_same_graph(Var<S> a, Var<S> b) {
  if (a.graph != b.graph) throw std::logic_error("operands belong to different graphs");
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
  check_same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  auto [r, c] = broadcast_shape(av.rows(), av.cols(), bv.rows(), bv.cols());
  Matrix<S> out = expand(av, r, c) + expand(bv, r, c);
  const Index ar = av.rows(), ac = av.cols(), br = bv.rows(), bc = bv.cols();
  return a.graph->push(std::move(out), {a.id, b.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    g.accumulate(a.id, reduce_to(go, ar, ac));
    g.accumulate(b.id, reduce_to(go, br, bc));
  });
}

template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) {
  check_same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  auto [r, c] = broadcast_shape(av.rows(), av.cols(), bv.rows(), bv.cols());
  Matrix<S> out = expand(av, r, c) - expand(bv, r, c);
  const Index ar = av.rows(), ac = av.cols(), br = bv.rows(), bc = bv.cols();
  return a.graph->push(std::move(out), {a.id, b.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    g.accumulate(a.id, reduce_to(go, ar, ac));
    g.accumulate(b.id, reduce_to(Matrix<S>(-go), br, bc));
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  check_same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  auto [r, c] = broadcast_shape(av.rows(), av.cols(), bv.rows(), bv.cols());
  Matrix<S> out = expand(av, r, c).cwiseProduct(expand(bv, r, c));
  const Index ar = av.rows(), ac = av.cols(), br = bv.rows(), bc = bv.cols();
  return a.graph->push(std::move(out), {a.id, b.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    const auto& av = g.value(a.id);
    const auto& bv = g.value(b.id);
    if (g.requires_grad(a.id)) g.accumulate(a.id, reduce_to(Matrix<S>(go.cwiseProduct(expand(bv, r, c))), ar, ac));
    if (g.requires_grad(b.id)) g.accumulate(b.id, reduce_to(Matrix<S>(go.cwiseProduct(expand(av, r, c))), br, bc));
  });
}

template <typename S>
Var<S> operator*(S s, Var<S> a) {
  return a.graph->push(s * a.value(), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) { g.accumulate(a.id, s * go); });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S s) {
  Matrix<S> out = a.value().array() + s;
  return a.graph->push(std::move(out), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) { g.accumulate(a.id, go); });
}

template <typename S>
Var<S> one_minus(Var<S> a) {
  Matrix<S> out = (S(1) - a.value().array()).matrix();
  return a.graph->push(std::move(out), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) { g.accumulate(a.id, -go); });
}

// ---------------------------------------------------------------------------
// Products

template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) {
  check_same_graph(a, b);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_string(a.value()) + " x " + shape_string(b.value()));
  Matrix<S> out = a.value() * b.value();
  return a.graph->push(std::move(out), {a.id, b.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    if (g.requires_grad(a.id)) g.accumulate(a.id, go * g.value(b.id).transpose());
    if (g.requires_grad(b.id)) g.accumulate(b.id, g.value(a.id).transpose() * go);
  });
}

template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  check_same_graph(a, b);
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: " + shape_string(a.value()) + " x " + shape_string(b.value()) + "^T");
  Matrix<S> out = a.value() * b.value().transpose();
  return a.graph->push(std::move(out), {a.id, b.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    if (g.requires_grad(a.id)) g.accumulate(a.id, go * g.value(b.id));
    if (g.requires_grad(b.id)) g.accumulate(b.id, go.transpose() * g.value(a.id));
  });
}

// ---------------------------------------------------------------------------
// Activations

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Matrix<S> out = a.value().unaryExpr([](S x) { return S(1) / (S(1) + std::exp(-x)); });
  const int self = static_cast<int>(a.graph->size());
  return a.graph->push(std::move(out), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    const auto& y = g.value(self);
    g.accumulate(a.id, go.cwiseProduct(y.cwiseProduct((S(1) - y.array()).matrix())));
  });
}

template <typename S>
Var<S> tanh(Var<S> a) {
  Matrix<S> out = a.value().array().tanh().matrix();
  const int self = static_cast<int>(a.graph->size());
  return a.graph->push(std::move(out), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    const auto& y = g.value(self);
    g.accumulate(a.id, go.cwiseProduct((S(1) - y.array().square()).matrix()));
  });
}

template <typename S>
Var<S> relu(Var<S> a) {
  Matrix<S> out = a.value().cwiseMax(S(0));
  return a.graph->push(std::move(out), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    const auto& x = g.value(a.id);
    g.accumulate(a.id, (x.array() > S(0)).select(go, S(0)).matrix());
  });
}

// ---------------------------------------------------------------------------
// Structure

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  std::vector<int> ids;
  std::vector<Index> widths;
  for (auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Matrix<S> out(rows, cols);
  Index off = 0;
  for (auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts.front().graph->push(std::move(out), ids, [ids, widths](Graph<S>& g, const Matrix<S>& go) {
    Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      g.accumulate(ids[i], go.middleCols(off, widths[i]));
      off += widths[i];
    }
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  std::vector<int> ids;
  std::vector<Index> heights;
  for (auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
    ids.push_back(p.id);
    heights.push_back(p.rows());
  }
  Matrix<S> out(rows, cols);
  Index off = 0;
  for (auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return parts.front().graph->push(std::move(out), ids, [ids, heights](Graph<S>& g, const Matrix<S>& go) {
    Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      g.accumulate(ids[i], go.middleRows(off, heights[i]));
      off += heights[i];
    }
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Matrix<S> out = a.value().middleCols(start, count);
  const Index rows = a.rows(), cols = a.cols();
  return a.graph->push(std::move(out), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    Matrix<S> full = Matrix<S>::Zero(rows, cols);
    full.middleCols(start, count) = go;
    g.accumulate(a.id, full);
  });
}

template <typename S>
Var<S> gather_rows(Var<S> a, const std::vector<Index>& idx) {
  const auto& av = a.value();
  Matrix<S> out(static_cast<Index>(idx.size()), av.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= av.rows()) throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range");
    if (idx[i] < 0)
      out.row(static_cast<Index>(i)).setZero();
    else
      out.row(static_cast<Index>(i)) = av.row(idx[i]);
  }
  const Index rows = av.rows(), cols = av.cols();
  return a.graph->push(std::move(out), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    Matrix<S> full = Matrix<S>::Zero(rows, cols);
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (idx[i] >= 0) full.row(idx[i]) += go.row(static_cast<Index>(i));
    g.accumulate(a.id, full);
  });
}

template <typename S>
Var<S> reshape(Var<S> a, Index rows, Index cols) {
  if (rows * cols != a.value().size())
    throw ShapeError("reshape: " + shape_string(a.value()) + " -> " + shape_string(rows, cols));
  Matrix<S> out = Eigen::Map<const Matrix<S>>(a.value().data(), rows, cols);
  const Index r0 = a.rows(), c0 = a.cols();
  return a.graph->push(std::move(out), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    g.accumulate(a.id, Eigen::Map<const Matrix<S>>(go.data(), r0, c0));
  });
}

template <typename S>
Var<S> tile_rows(Var<S> a, Index times) {
  Matrix<S> out = a.value().replicate(times, 1);
  const Index r0 = a.rows(), c0 = a.cols();
  return a.graph->push(std::move(out), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    Matrix<S> acc = Matrix<S>::Zero(r0, c0);
    for (Index t = 0; t < times; ++t) acc += go.middleRows(t * r0, r0);
    g.accumulate(a.id, acc);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Var<S> sum(Var<S> a) {
  Matrix<S> out = Matrix<S>::Constant(1, 1, a.value().sum());
  const Index r = a.rows(), c = a.cols();
  return a.graph->push(std::move(out), {a.id},
                       [=](Graph<S>& g, const Matrix<S>& go) { g.accumulate(a.id, Matrix<S>::Constant(r, c, go(0, 0))); });
}

template <typename S>
Var<S> mean(Var<S> a) {
  const S n = static_cast<S>(a.value().size());
  return (S(1) / n) * sum(a);
}

template <typename S>
Var<S> softmax_rows(Var<S> a, const Matrix<S>& mask) {
  const auto& x = a.value();
  if (!x.allFinite()) throw NumericError("softmax: invalid activation (non-finite input)");
  const bool masked = mask.size() != 0;
  if (masked && (mask.rows() != x.rows() || mask.cols() != x.cols())) throw ShapeError("softmax_rows: mask shape");
  Matrix<S> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Index c = 0; c < x.cols(); ++c)
      if (!masked || mask(r, c) != S(0)) mx = std::max(mx, x(r, c));
    if (mx == -std::numeric_limits<S>::infinity()) {
      out.row(r).setZero();
      continue;
    }
    S z = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      const S e = (!masked || mask(r, c) != S(0)) ? std::exp(x(r, c) - mx) : S(0);
      out(r, c) = e;
      z += e;
    }
    out.row(r) /= z;
  }
  const int self = static_cast<int>(a.graph->size());
  return a.graph->push(std::move(out), {a.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    const auto& y = g.value(self);
    Matrix<S> dot = go.cwiseProduct(y).rowwise().sum();
    g.accumulate(a.id, y.cwiseProduct(go - dot.replicate(1, y.cols())));
  });
}

template <typename S>
Var<S> layer_norm(Var<S> a, Var<S> gain, Var<S> bias, S eps) {
  const auto& x = a.value();
  const Index n = x.rows(), d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(d));
  Matrix<S> xhat(n, d);
  Matrix<S> inv_std(n, 1);
  for (Index r = 0; r < n; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    inv_std(r, 0) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r, 0);
  }
  Matrix<S> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return a.graph->push(std::move(out), {a.id, gain.id, bias.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    if (g.requires_grad(gain.id)) g.accumulate(gain.id, go.cwiseProduct(xhat).colwise().sum());
    if (g.requires_grad(bias.id)) g.accumulate(bias.id, go.colwise().sum());
    if (g.requires_grad(a.id)) {
      Matrix<S> dxhat = go.array().rowwise() * g.value(gain.id).row(0).array();
      Matrix<S> dx(n, d);
      for (Index r = 0; r < n; ++r) {
        const S m1 = dxhat.row(r).mean();
        const S m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
        dx.row(r) = inv_std(r, 0) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
      }
      g.accumulate(a.id, dx);
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, const AttentionLayout& L, std::vector<Matrix<S>>* weights) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d) throw ShapeError("attention: q/k/v widths differ");
  if (L.heads <= 0 || d % L.heads != 0)
    throw ConfigError("attention: head count " + std::to_string(L.heads) + " does not divide width " +
                      std::to_string(d));
  if (k.rows() != v.rows()) throw ShapeError("attention: key/value lengths differ");
  if (q.rows() % L.query_len != 0 || k.rows() % L.key_len != 0) throw ShapeError("attention: ragged groups");
  const Index groups = q.rows() / L.query_len;
  const Index kv_groups = k.rows() / L.key_len;
  if (!L.key_group.empty() && static_cast<Index>(L.key_group.size()) != groups)
    throw ShapeError("attention: key_group size");
  if (L.key_group.empty() && kv_groups != groups) throw ShapeError("attention: group count mismatch");
  if (!L.key_mask.empty() && static_cast<Index>(L.key_mask.size()) != k.rows())
    throw ShapeError("attention: key_mask size");
  const Index dh = d / L.heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  auto kv_of = [&L](Index g) { return L.key_group.empty() ? g : L.key_group[g]; };

  // probs[g * heads + h] is (query_len x key_len).
  std::vector<Matrix<S>> probs(static_cast<std::size_t>(groups * L.heads));
  Matrix<S> out(Q.rows(), d);
  for (Index g = 0; g < groups; ++g) {
    const Index kg = kv_of(g);
    if (kg < 0 || kg >= kv_groups) throw ShapeError("attention: key group out of range");
    for (Index h = 0; h < L.heads; ++h) {
      Matrix<S> s = scale * Q.block(g * L.query_len, h * dh, L.query_len, dh) *
                    K.block(kg * L.key_len, h * dh, L.key_len, dh).transpose();
      for (Index i = 0; i < L.query_len; ++i) {
        S mx = -std::numeric_limits<S>::infinity();
        for (Index j = 0; j < L.key_len; ++j)
          if (L.key_mask.empty() || L.key_mask[kg * L.key_len + j]) mx = std::max(mx, s(i, j));
        S z = 0;
        for (Index j = 0; j < L.key_len; ++j) {
          const bool ok = L.key_mask.empty() || L.key_mask[kg * L.key_len + j];
          s(i, j) = ok ? std::exp(s(i, j) - mx) : S(0);
          z += s(i, j);
        }
        if (z > S(0)) s.row(i) /= z;
      }
      out.block(g * L.query_len, h * dh, L.query_len, dh) = s * V.block(kg * L.key_len, h * dh, L.key_len, dh);
      probs[static_cast<std::size_t>(g * L.heads + h)] = std::move(s);
    }
  }
  if (weights) *weights = probs;

  const AttentionLayout layout = L;
  return q.graph->push(
      std::move(out), {q.id, k.id, v.id},
      [=, probs = std::move(probs)](Graph<S>& gr, const Matrix<S>& go) {
        const auto& Q = gr.value(q.id);
        const auto& K = gr.value(k.id);
        const auto& V = gr.value(v.id);
        Matrix<S> dQ = Matrix<S>::Zero(Q.rows(), d);
        Matrix<S> dK = Matrix<S>::Zero(K.rows(), d);
        Matrix<S> dV = Matrix<S>::Zero(V.rows(), d);
        for (Index g = 0; g < groups; ++g) {
          const Index kg = layout.key_group.empty() ? g : layout.key_group[g];
          for (Index h = 0; h < layout.heads; ++h) {
            const auto& P = probs[static_cast<std::size_t>(g * layout.heads + h)];
            auto gO = go.block(g * layout.query_len, h * dh, layout.query_len, dh);
            auto Vb = V.block(kg * layout.key_len, h * dh, layout.key_len, dh);
            auto Kb = K.block(kg * layout.key_len, h * dh, layout.key_len, dh);
            auto Qb = Q.block(g * layout.query_len, h * dh, layout.query_len, dh);
            dV.block(kg * layout.key_len, h * dh, layout.key_len, dh).noalias() += P.transpose() * gO;
            Matrix<S> dP = gO * Vb.transpose();
            Matrix<S> rs = dP.cwiseProduct(P).rowwise().sum();
            Matrix<S> dS = P.cwiseProduct(dP - rs.replicate(1, P.cols()));
            dQ.block(g * layout.query_len, h * dh, layout.query_len, dh).noalias() += scale * dS * Kb;
            dK.block(kg * layout.key_len, h * dh, layout.key_len, dh).noalias() += scale * dS.transpose() * Qb;
          }
        }
        gr.accumulate(q.id, dQ);
        gr.accumulate(k.id, dK);
        gr.accumulate(v.id, dV);
      });
}

template <typename S>
Var<S> additive_scores(Var<S> p, Var<S> x, Var<S> w, Index p_len, Index x_len) {
  const Index d = p.cols();
  if (x.cols() != d || w.rows() != 1 || w.cols() != d) throw ShapeError("additive_scores: width mismatch");
  if (p.rows() % p_len != 0 || x.rows() % x_len != 0) throw ShapeError("additive_scores: ragged groups");
  const Index groups = p.rows() / p_len;
  if (x.rows() / x_len != groups) throw ShapeError("additive_scores: group count mismatch");
  const auto& P = p.value();
  const auto& X = x.value();
  const auto wv = w.value().row(0);
  Matrix<S> out(X.rows(), p_len);
  for (Index g = 0; g < groups; ++g)
    for (Index i = 0; i < x_len; ++i)
      for (Index j = 0; j < p_len; ++j)
        out(g * x_len + i, j) = ((P.row(g * p_len + j) + X.row(g * x_len + i)).array().tanh() * wv.array()).sum();
  return p.graph->push(std::move(out), {p.id, x.id, w.id}, [=](Graph<S>& gr, const Matrix<S>& go) {
    const auto& P = gr.value(p.id);
    const auto& X = gr.value(x.id);
    const auto wv = gr.value(w.id).row(0);
    Matrix<S> dP = Matrix<S>::Zero(P.rows(), d);
    Matrix<S> dX = Matrix<S>::Zero(X.rows(), d);
    Matrix<S> dw = Matrix<S>::Zero(1, d);
    Eigen::Array<S, 1, Eigen::Dynamic> t(d);
    for (Index g = 0; g < groups; ++g)
      for (Index i = 0; i < x_len; ++i)
        for (Index j = 0; j < p_len; ++j) {
          const S gij = go(g * x_len + i, j);
          if (gij == S(0)) continue;
          t = (P.row(g * p_len + j) + X.row(g * x_len + i)).array().tanh();
          dw.row(0).array() += gij * t;
          const auto dt = (gij * wv.array() * (S(1) - t.square())).matrix();
          dP.row(g * p_len + j) += dt;
          dX.row(g * x_len + i) += dt;
        }
    gr.accumulate(p.id, dP);
    gr.accumulate(x.id, dX);
    gr.accumulate(w.id, dw);
  });
}

template <typename S>
Var<S> grouped_weighted_sum(Var<S> weights, Var<S> values, Index n) {
  const auto& W = weights.value();
  const auto& X = values.value();
  if (W.rows() != X.rows() || W.rows() % n != 0) throw ShapeError("grouped_weighted_sum: row mismatch");
  const Index groups = W.rows() / n;
  const Index m = W.cols();
  const Index d = X.cols();
  Matrix<S> out(groups * m, d);
  for (Index g = 0; g < groups; ++g)
    out.middleRows(g * m, m).noalias() = W.middleRows(g * n, n).transpose() * X.middleRows(g * n, n);
  return weights.graph->push(std::move(out), {weights.id, values.id}, [=](Graph<S>& gr, const Matrix<S>& go) {
    const auto& W = gr.value(weights.id);
    const auto& X = gr.value(values.id);
    Matrix<S> dW(W.rows(), m);
    Matrix<S> dX(X.rows(), d);
    for (Index g = 0; g < groups; ++g) {
      dW.middleRows(g * n, n).noalias() = X.middleRows(g * n, n) * go.middleRows(g * m, m).transpose();
      dX.middleRows(g * n, n).noalias() = W.middleRows(g * n, n) * go.middleRows(g * m, m);
    }
    gr.accumulate(weights.id, dW);
    gr.accumulate(values.id, dX);
  });
}

// ---------------------------------------------------------------------------
// Losses

template <typename S>
Var<S> cross_entropy(Var<S> logits, const std::vector<Index>& targets, const std::vector<S>& weights,
                     const std::vector<std::vector<Index>>* candidates) {
  const auto& X = logits.value();
  const Index rows = X.rows();
  if (static_cast<Index>(targets.size()) != rows || static_cast<Index>(weights.size()) != rows)
    throw ShapeError("cross_entropy: targets/weights length");
  if (candidates && static_cast<Index>(candidates->size()) != rows) throw ShapeError("cross_entropy: candidates");
  if (!X.allFinite()) throw NumericError("cross_entropy: non-finite logits");
  Matrix<S> probs = Matrix<S>::Zero(rows, X.cols());  // softmax over each row's candidate set
  S loss = 0;
  for (Index r = 0; r < rows; ++r) {
    const Index t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= X.cols()) throw ShapeError("cross_entropy: target index " + std::to_string(t) + " out of range");
    auto for_each = [&](auto&& f) {
      if (candidates) {
        for (Index c : (*candidates)[static_cast<std::size_t>(r)]) f(c);
      } else {
        for (Index c = 0; c < X.cols(); ++c) f(c);
      }
    };
    S mx = -std::numeric_limits<S>::infinity();
    for_each([&](Index c) { mx = std::max(mx, X(r, c)); });
    S z = 0;
    for_each([&](Index c) { z += std::exp(X(r, c) - mx); });
    for_each([&](Index c) { probs(r, c) = std::exp(X(r, c) - mx) / z; });
    loss += weights[static_cast<std::size_t>(r)] * (std::log(z) + mx - X(r, t));
  }
  Matrix<S> out = Matrix<S>::Constant(1, 1, loss);
  return logits.graph->push(std::move(out), {logits.id}, [=, probs = std::move(probs)](Graph<S>& g, const Matrix<S>& go) {
    Matrix<S> d = probs;
    for (Index r = 0; r < rows; ++r) {
      d(r, targets[static_cast<std::size_t>(r)]) -= S(1);
      d.row(r) *= weights[static_cast<std::size_t>(r)] * go(0, 0);
    }
    g.accumulate(logits.id, d);
  });
}

template <typename S>
Var<S> binary_cross_entropy(Var<S> probs, const std::vector<S>& labels, const std::vector<S>& weights, S clamp) {
  const auto& P = probs.value();
  if (P.cols() != 1 || static_cast<Index>(labels.size()) != P.rows() || static_cast<Index>(weights.size()) != P.rows())
    throw ShapeError("binary_cross_entropy: expects an Rx1 column with matching labels/weights");
  S loss = 0;
  for (Index r = 0; r < P.rows(); ++r) {
    const S p = std::clamp(P(r, 0), clamp, S(1) - clamp);
    const S y = labels[static_cast<std::size_t>(r)];
    loss -= weights[static_cast<std::size_t>(r)] * (y * std::log(p) + (S(1) - y) * std::log(S(1) - p));
  }
  Matrix<S> out = Matrix<S>::Constant(1, 1, loss);
  return probs.graph->push(std::move(out), {probs.id}, [=](Graph<S>& g, const Matrix<S>& go) {
    const auto& P = g.value(probs.id);
    Matrix<S> d = Matrix<S>::Zero(P.rows(), 1);
    for (Index r = 0; r < P.rows(); ++r) {
      const S p = P(r, 0);
      if (p < clamp || p > S(1) - clamp) continue;
      const S y = labels[static_cast<std::size_t>(r)];
      d(r, 0) = -weights[static_cast<std::size_t>(r)] * (y / p - (S(1) - y) / (S(1) - p)) * go(0, 0);
    }
    g.accumulate(probs.id, d);
  });
}

// ---------------------------------------------------------------------------

#define RM_INSTANTIATE(S)                                                                                        \
  template class Graph<S>;                                                                                       \
  template class Binder<S>;                                                                                      \
  template Var<S> operator+(Var<S>, Var<S>);                                                                     \
  template Var<S> operator-(Var<S>, Var<S>);                                                                     \
  template Var<S> mul(Var<S>, Var<S>);                                                                           \
  template Var<S> operator*(S, Var<S>);                                                                          \
  template Var<S> add_scalar(Var<S>, S);                                                                         \
  template Var<S> one_minus(Var<S>);                                                                             \
  template Var<S> operator*(Var<S>, Var<S>);                                                                     \
  template Var<S> matmul_nt(Var<S>, Var<S>);                                                                     \
  template Var<S> sigmoid(Var<S>);                                                                               \
  template Var<S> tanh(Var<S>);                                                                                  \
  template Var<S> relu(Var<S>);                                                                                  \
  template Var<S> concat_cols(const std::vector<Var<S>>&);                                                       \
  template Var<S> concat_rows(const std::vector<Var<S>>&);                                                       \
  template Var<S> slice_cols(Var<S>, Index, Index);                                                              \
  template Var<S> gather_rows(Var<S>, const std::vector<Index>&);                                                \
  template Var<S> reshape(Var<S>, Index, Index);                                                                 \
  template Var<S> tile_rows(Var<S>, Index);                                                                      \
  template Var<S> sum(Var<S>);                                                                                   \
  template Var<S> mean(Var<S>);                                                                                  \
  template Var<S> softmax_rows(Var<S>, const Matrix<S>&);                                                        \
  template Var<S> layer_norm(Var<S>, Var<S>, Var<S>, S);                                                         \
  template Var<S> attention(Var<S>, Var<S>, Var<S>, const AttentionLayout&, std::vector<Matrix<S>>*);            \
  template Var<S> additive_scores(Var<S>, Var<S>, Var<S>, Index, Index);                                         \
  template Var<S> grouped_weighted_sum(Var<S>, Var<S>, Index);                                                   \
  template Var<S> cross_entropy(Var<S>, const std::vector<Index>&, const std::vector<S>&,                        \
                                const std::vector<std::vector<Index>>*);                                         \
  template Var<S> binary_cross_entropy(Var<S>, const std::vector<S>&, const std::vector<S>&, S);

RM_INSTANTIATE(float)
RM_INSTANTIATE(double)

#undef RM_INSTANTIATE

}  // namespace rm
