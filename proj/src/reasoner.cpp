#include "rm/reasoner.hpp"

#include <cmath>

namespace rm {

void LossWeights::validate() const {
  for (double v : {recollection, familiarity, reason})
    if (!std::isfinite(v) || v < 0) throw ConfigError("loss_weights: weights must be finite and nonnegative");
}

template <typename S>
Var<S> encode_query(const Binder<S>& p, const ModelConfig& cfg, const std::vector<int>& queries) {
  std::vector<Index> rows(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (queries[i] < 0 || queries[i] >= cfg.queries)
      throw DataError("encode_query: query id " + std::to_string(queries[i]) + " outside [0, " +
                      std::to_string(cfg.queries) + ")");
    rows[i] = queries[i];
  }
  return gather_rows(p("reason.query"), rows);
}

template <typename S>
std::pair<Var<S>, Var<S>> hop(const Binder<S>& p, Var<S> query, Var<S> memory, Index slots, Matrix<S>* weights) {
  const Index groups = query.rows();
  if (memory.rows() != groups * slots)
    throw ShapeError("hop: " + std::to_string(groups) + " queries need " + std::to_string(groups * slots) +
                     " memory rows, got " + std::to_string(memory.rows()));
  auto proj_q = query * p("reason.hop.w1");
  auto proj_m = memory * p("reason.hop.w2") + p("reason.hop.b");
  auto scores = reshape(additive_scores(proj_q, proj_m, p("reason.hop.w"), 1, slots), groups, slots);
  auto gamma = softmax_rows(scores);
  if (weights) *weights = gamma.value();
  auto e = grouped_weighted_sum(reshape(gamma, groups * slots, 1), memory, slots);
  auto next = concat_cols<S>({e, query}) * p("reason.hop.wq");
  return {e, next};
}

template <typename S>
Var<S> reason(const Binder<S>& p, const ModelConfig& cfg, Var<S> memory, const std::vector<int>& queries) {
  auto q = encode_query(p, cfg, queries);
  for (Index c = 0; c < cfg.hops; ++c) q = hop(p, q, memory, cfg.slots).second;
  return linear(p, "reason.head", q);
}

template <typename S>
Var<S> reason_loss(Var<S> logits, const std::vector<int>& answers) {
  if (static_cast<Index>(answers.size()) != logits.rows())
    throw ShapeError("reason_loss: " + std::to_string(answers.size()) + " answers for " +
                     std::to_string(logits.rows()) + " rows");
  std::vector<Index> targets(answers.size());
  for (std::size_t i = 0; i < answers.size(); ++i) {
    if (answers[i] < 0 || answers[i] >= logits.cols())
      throw DataError("reason_loss: answer " + std::to_string(answers[i]) + " outside [0, " +
                      std::to_string(logits.cols()) + ")");
    targets[i] = answers[i];
  }
  std::vector<S> weights(answers.size(), S(1) / static_cast<S>(answers.size()));
  return cross_entropy(logits, targets, weights);
}

template <typename S>
Var<S> combined_loss(Var<S> recollection, Var<S> familiarity, Var<S> reason, const LossWeights& w) {
  return static_cast<S>(w.recollection) * recollection + static_cast<S>(w.familiarity) * familiarity +
         static_cast<S>(w.reason) * reason;
}

double combined_loss(double recollection, double familiarity, double reason, const LossWeights& w) {
  return w.recollection * recollection + w.familiarity * familiarity + w.reason * reason;
}

std::vector<int> argmax_rows(const Matrix<float>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < logits.cols(); ++c)
      if (logits(r, c) > logits(r, best)) best = c;
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

#define RM_INSTANTIATE(S)                                                                                      \
  template Var<S> encode_query(const Binder<S>&, const ModelConfig&, const std::vector<int>&);                 \
  template std::pair<Var<S>, Var<S>> hop(const Binder<S>&, Var<S>, Var<S>, Index, Matrix<S>*);                \
  template Var<S> reason(const Binder<S>&, const ModelConfig&, Var<S>, const std::vector<int>&);               \
  template Var<S> reason_loss(Var<S>, const std::vector<int>&);                                                \
  template Var<S> combined_loss(Var<S>, Var<S>, Var<S>, const LossWeights&);

RM_INSTANTIATE(float)
RM_INSTANTIATE(double)

#undef RM_INSTANTIATE

}  // namespace rm
