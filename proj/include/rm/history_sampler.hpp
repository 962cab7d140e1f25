#pragma once

#include "rm/model.hpp"
#include "rm/synthetic.hpp"

#include <functional>
#include <string>
#include <vector>

namespace rm {

/// Fragment indices chosen for rehearsal plus the teacher's weights over all
/// C_f fragments of the stream.
struct SelectionResult {
  std::int64_t sample_index = 0;
  std::vector<int> fragments;  ///< B/2 from the first half, then B/2 from the second
  std::vector<float> weights;  ///< beta_hat, length C_f
};

/// Mean teacher embedding of each length-N fragment, pads excluded.
/// Every stream must have `fragments` fragments; returns (G*C_f x d).
template <typename S>
Var<S> fragment_features(const Binder<S>& p, const ModelConfig& cfg, const std::vector<const std::vector<int>*>& streams,
                         int fragments);

/// beta_c = w . tanh(W1 q + W2 h_c + b), beta_hat = softmax over c and
/// e = sum_c beta_hat_c h_c, for G queries (G x d) at once. `weights`
/// receives beta_hat as (G x C_f).
template <typename S>
Var<S> teacher_attend(const Binder<S>& p, Var<S> query, Var<S> fragments, int count, Matrix<S>* weights = nullptr);

/// Answer logits (G x R_a) from the head applied to [e; q].
template <typename S>
Var<S> teacher_forward(const Binder<S>& p, const ModelConfig& cfg, const std::vector<const std::vector<int>*>& streams,
                       const std::vector<int>& queries, Matrix<S>* weights = nullptr);

/// Top B/2 weights inside each half of the fragments, ties to the lower index.
SelectionResult select_fragments(const std::vector<float>& weights, int fragments_to_pick);

struct TeacherTrainConfig {
  int epochs = 20;
  int batch_size = 32;
  std::uint64_t seed = 0;
  AdamConfig adam;
  bool keep_best = true;  ///< return the epoch with the best validation accuracy
};

struct TeacherEpoch {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double evidence_top1 = 0.0;  ///< share of val samples whose top fragment holds evidence
};

struct TeacherEval {
  double loss = 0.0;
  double accuracy = 0.0;
  double evidence_top1 = 0.0;
  std::vector<std::vector<float>> weights;  ///< beta_hat per sample
};

/// Evaluates without recording gradients; batches of `batch_size` samples.
TeacherEval evaluate_teacher(const ParameterStore& teacher, const ModelConfig& cfg, const std::vector<Sample>& samples,
                             int evidence_length, int batch_size = 64);

/// Trains a fresh teacher with cross-entropy and Adam. Throws NumericError
/// if the loss stops being finite. With keep_best, the parameters of the
/// epoch with the highest validation accuracy are returned.
ParameterStore train_teacher(const Dataset& data, const ModelConfig& cfg, const TeacherTrainConfig& tc,
                             const std::function<void(const TeacherEpoch&)>& on_epoch = {});

/// True when fragment c overlaps the evidence of `s`.
bool fragment_holds_evidence(const Sample& s, int fragment, Index segment, int evidence_length);

/// Selections for every sample, computed with frozen teacher parameters.
std::vector<SelectionResult> compute_selections(const ParameterStore& teacher, const ModelConfig& cfg,
                                                const std::vector<Sample>& samples, int fragments_to_pick);

/// JSON Lines: {"sample_index", "fragments", "weights"} per sample.
void write_selection_cache(const std::vector<SelectionResult>& rows, const std::string& path);
std::vector<SelectionResult> read_selection_cache(const std::string& path);

}  // namespace rm
