#pragma once

#include "rm/tensor.hpp"

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace rm {

template <typename Scalar>
class Graph;

/// Handle to a recorded value. Cheap to copy; only valid while its graph lives.
template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  int id = -1;

  const Matrix<Scalar>& value() const { return graph->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

/// Parameter values in a working precision, keyed by dotted path.
template <typename Scalar>
using ParamTable = std::map<std::string, Matrix<Scalar>>;

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep visits every node after all of its consumers.
template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Graph&, const Mat& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> constant(Mat value);
  Var<Scalar> variable(Mat value);

  /// Leaf for a named parameter. Repeated calls with the same name return the
  /// same node, so a parameter used many times has a single gradient.
  Var<Scalar> param(const std::string& name, const Mat& value);

  /// Records an op result. If no parent needs a gradient, `fn` is discarded.
  Var<Scalar> push(Mat value, std::initializer_list<int> parents, BackwardFn fn);
  Var<Scalar> push(Mat value, const std::vector<int>& parents, BackwardFn fn);

  const Mat& value(Var<Scalar> v) const { return nodes_.at(v.id).value; }
  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Gradient of the last backward pass; zeros if the node was not reached.
  Mat grad(Var<Scalar> v) const;

  /// Adds `g` into the gradient buffer of node `id` (no-op for constants).
  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad += g;
  }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape. The loss must be 1x1.
  void backward(Var<Scalar> loss);

  /// Gradient for every entry of `table`; parameters that never entered the
  /// graph, or that the loss does not reach, get zeros.
  ParamTable<Scalar> param_grads(const ParamTable<Scalar>& table) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> params_;
};

/// Binds parameter names to graph leaves for one forward pass.
template <typename Scalar>
class Binder {
 public:
  Binder(Graph<Scalar>& g, const ParamTable<Scalar>& table) : graph_(&g), table_(&table) {}
  Var<Scalar> operator()(const std::string& name) const;
  Graph<Scalar>& graph() const { return *graph_; }
  const ParamTable<Scalar>& table() const { return *table_; }
  bool has(const std::string& name) const { return table_->count(name) != 0; }

 private:
  Graph<Scalar>* graph_;
  const ParamTable<Scalar>* table_;
};

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops broadcast operands of shape 1xC, Rx1 or
// 1x1 against the other operand's full shape.

template <typename S> Var<S> operator+(Var<S> a, Var<S> b);
template <typename S> Var<S> operator-(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);
template <typename S> Var<S> operator*(S s, Var<S> a);
template <typename S> Var<S> add_scalar(Var<S> a, S s);
template <typename S> Var<S> one_minus(Var<S> a);

// Matrix products.
template <typename S> Var<S> operator*(Var<S> a, Var<S> b);
/// a * b^T
template <typename S> Var<S> matmul_nt(Var<S> a, Var<S> b);

template <typename S> Var<S> sigmoid(Var<S> a);
template <typename S> Var<S> tanh(Var<S> a);
template <typename S> Var<S> relu(Var<S> a);

// Structure.
template <typename S> Var<S> concat_cols(const std::vector<Var<S>>& parts);
template <typename S> Var<S> concat_rows(const std::vector<Var<S>>& parts);
template <typename S> Var<S> slice_cols(Var<S> a, Index start, Index count);
/// Row `i` of the result is row `idx[i]` of `a`; a negative index yields zeros.
template <typename S> Var<S> gather_rows(Var<S> a, const std::vector<Index>& idx);
template <typename S> Var<S> reshape(Var<S> a, Index rows, Index cols);
/// Stacks `times` copies of `a` vertically.
template <typename S> Var<S> tile_rows(Var<S> a, Index times);

// Reductions.
template <typename S> Var<S> sum(Var<S> a);
template <typename S> Var<S> mean(Var<S> a);

/// Row-wise softmax with max subtraction. When `mask` is non-empty, zero
/// entries are excluded (probability exactly 0); a fully masked row yields
/// zeros. Throws NumericError on non-finite input.
template <typename S> Var<S> softmax_rows(Var<S> a, const Matrix<S>& mask = {});

/// Normalizes each row to zero mean and unit variance, then applies a
/// per-column gain and bias (both 1xC).
template <typename S> Var<S> layer_norm(Var<S> a, Var<S> gain, Var<S> bias, S eps = S(1e-5));

// ---------------------------------------------------------------------------
// Grouped attention primitives. Row blocks of equal length form groups; one
// op call processes every group of a batch at once.

struct AttentionLayout {
  Index heads = 1;
  Index query_len = 1;  ///< rows per query group
  Index key_len = 1;    ///< rows per key/value group
  /// Key/value group read by each query group; empty means group g reads g.
  std::vector<Index> key_group;
  /// Per key row, nonzero = attendable. Empty means every key is valid.
  std::vector<unsigned char> key_mask;
};

/// Scaled dot-product attention split over `heads` column blocks. Returns
/// the concatenated per-head contexts (no output projection). If `weights`
/// is given it receives one (query_len x key_len) matrix per (group, head),
/// group-major.
template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, const AttentionLayout& layout,
                 std::vector<Matrix<S>>* weights = nullptr);

/// Additive attention logits. `p` holds groups of `p_len` rows, `x` holds
/// groups of `x_len` rows (same group count), `w` is 1xD. The result has
/// one row per row of `x` and one column per row of the matching `p` group:
///   out[g*x_len + i, j] = w . tanh(p[g*p_len + j] + x[g*x_len + i]).
template <typename S>
Var<S> additive_scores(Var<S> p, Var<S> x, Var<S> w, Index p_len, Index x_len);

/// Per-group weighted sums: `weights` is (G*n x m), `values` is (G*n x D),
/// the result is (G*m x D) with out[g*m + j] = sum_i weights[g*n+i, j] values[g*n+i].
template <typename S>
Var<S> grouped_weighted_sum(Var<S> weights, Var<S> values, Index n);

// ---------------------------------------------------------------------------
// Losses. Both return a 1x1 weighted sum over rows.

/// sum_r weight[r] * -log softmax(logits[r, C_r])[target[r]], where C_r is
/// `candidates[r]` when given (it must contain the target) and all columns
/// otherwise.
template <typename S>
Var<S> cross_entropy(Var<S> logits, const std::vector<Index>& targets, const std::vector<S>& weights,
                     const std::vector<std::vector<Index>>* candidates = nullptr);

/// sum_r weight[r] * -(y log p + (1-y) log(1-p)) on an Rx1 column of
/// probabilities, with p clamped to [clamp, 1-clamp] (no gradient while clamped).
template <typename S>
Var<S> binary_cross_entropy(Var<S> probs, const std::vector<S>& labels, const std::vector<S>& weights,
                            S clamp = S(1e-7));

}  // namespace rm
