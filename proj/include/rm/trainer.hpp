#pragma once

#include "rm/history_sampler.hpp"
#include "rm/memory_machine.hpp"
#include "rm/reasoner.hpp"
#include "rm/rehearsal.hpp"
#include "rm/synthetic.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rm {

enum class Ablation { Full, NoRehearsal, OnlyRec, OnlyFam, RandomSampler };

const char* to_string(Ablation a);
/// Accepts full, no-rehearsal, only-rec, only-fam and random-sampler.
Ablation ablation_from_string(const std::string& s);

struct TrainingConfig {
  int batch_size = 32;
  int epochs = 10;
  int teacher_epochs = 20;
  double teacher_lr = 1e-3;
  std::uint64_t seed = 0;
  int probe_samples = 256;  ///< training samples used for the epoch-0 loss probe
};

struct RunConfig {
  SyntheticConfig synthetic;
  ModelConfig model;
  RehearsalConfig rehearsal;
  LossWeights loss_weights;
  AdamConfig optimizer;
  TrainingConfig training;

  /// Cross-field checks: vocabularies agree with the synthetic task and every
  /// stream has at least B fragments.
  void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& c);
/// Fields not given keep their defaults; model.items/queries/answers follow
/// the synthetic section unless set explicitly.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

/// Teacher schedule: shares batch size, seed and Adam moments with the
/// student but has its own epoch count and learning rate.
TeacherTrainConfig teacher_config(const RunConfig& c);

/// Loss weights actually used by an ablation.
LossWeights ablation_weights(Ablation a, const LossWeights& base);

template <typename S>
struct StudentLosses {
  Var<S> total;
  Var<S> reason;
  std::optional<Var<S>> recollection;
  std::optional<Var<S>> familiarity;
  Matrix<float> logits;
};

/// Full student objective for one batch: write every stream, reason over the
/// memories and, when `plan` is given, decode its fragments for the rehearsal
/// losses (only the terms with nonzero weight are built).
template <typename S>
StudentLosses<S> student_forward(const Binder<S>& p, const ModelConfig& cfg,
                                 const std::vector<const std::vector<int>*>& streams, const std::vector<int>& queries,
                                 const std::vector<int>& answers, const FragmentBatch* plan, const LossWeights& w);

struct BucketAccuracy {
  double overall = 0.0;
  double early = 0.0;
  double later = 0.0;
  std::size_t count = 0;
  std::size_t early_count = 0;
  std::size_t later_count = 0;
};

/// Accuracy split by evidence bucket from per-sample predictions.
BucketAccuracy bucket_accuracy(const std::vector<Sample>& samples, const std::vector<int>& predictions);

struct EvalResult {
  BucketAccuracy accuracy;
  double reason_loss = 0.0;
  std::vector<int> predictions;
  std::size_t memory_bytes = 0;  ///< serialized size of one stream's memory, the same for every stream
};

/// Builds each stream's memory once, answers its query and checks that every
/// serialized memory has the same size.
EvalResult evaluate_student(const ParameterStore& params, const ModelConfig& cfg, const std::vector<Sample>& samples,
                            int batch_size = 64);

struct LossTotals {
  std::optional<double> recollection;
  std::optional<double> familiarity;
  double reason = 0.0;
  double total = 0.0;
};

struct EpochMetrics {
  int epoch = 0;  ///< 0 is the probe before any update
  LossTotals train;
  BucketAccuracy val;
  BucketAccuracy test;
};

nlohmann::ordered_json to_json(const EpochMetrics& m, Ablation a, const LossWeights& w);

/// Fixed per-sample random choice of B/2 fragments in each half.
std::vector<int> random_selection(std::int64_t sample_index, int fragment_count, int fragments_to_pick,
                                  std::uint64_t seed);

struct StudentRun {
  ParameterStore params;
  std::vector<EpochMetrics> metrics;
};

/// Trains the student. `selections` (one row per training sample) is only
/// read by the full, only-rec and only-fam variants. When `out_dir` is set,
/// per-epoch checkpoints and metrics.jsonl are written there.
StudentRun train_student(const Dataset& data, const RunConfig& cfg, Ablation ablation,
                         const std::vector<SelectionResult>* selections, const std::string& out_dir = "",
                         const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Checkpoint metadata for a student: model config, ablation and epoch.
std::string student_meta(const RunConfig& cfg, Ablation a, int epoch);

}  // namespace rm
