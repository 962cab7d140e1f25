#pragma once

#include "rm/model.hpp"

#include <utility>
#include <vector>

namespace rm {

struct LossWeights {
  double recollection = 1.0;  ///< lambda_1
  double familiarity = 0.5;   ///< lambda_2
  double reason = 1.0;        ///< lambda_3

  void validate() const;
};

/// Query rows q^0 from reason.query. Throws DataError for ids outside [0, R_q).
template <typename S>
Var<S> encode_query(const Binder<S>& p, const ModelConfig& cfg, const std::vector<int>& queries);

/// One reasoning hop for G queries over their memories (G*K x d):
/// gamma_k = w . tanh(W1 q + W2 m_k + b), normalized over slots,
/// e = sum_k gamma_hat_k m_k and q_next = [e; q] Wq.
/// `weights` receives gamma_hat as (G x K).
template <typename S>
std::pair<Var<S>, Var<S>> hop(const Binder<S>& p, Var<S> query, Var<S> memory, Index slots,
                              Matrix<S>* weights = nullptr);

/// Runs cfg.hops hops with shared parameters and applies the answer head.
/// Returns (G x R_a) logits.
template <typename S>
Var<S> reason(const Binder<S>& p, const ModelConfig& cfg, Var<S> memory, const std::vector<int>& queries);

/// Mean softmax cross-entropy. Throws DataError for answers outside the head.
template <typename S>
Var<S> reason_loss(Var<S> logits, const std::vector<int>& answers);

template <typename S>
Var<S> combined_loss(Var<S> recollection, Var<S> familiarity, Var<S> reason, const LossWeights& w);
double combined_loss(double recollection, double familiarity, double reason, const LossWeights& w);

/// Index of the largest logit per row, lowest index on ties.
std::vector<int> argmax_rows(const Matrix<float>& logits);

}  // namespace rm
