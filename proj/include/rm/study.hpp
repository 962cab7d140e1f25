#pragma once

#include "rm/trainer.hpp"

#include <functional>
#include <string>
#include <vector>

namespace rm {

struct TeacherStage {
  ParameterStore params;
  std::vector<TeacherEpoch> epochs;
  TeacherEval val;  ///< evaluation of the returned parameters
  std::vector<SelectionResult> selections;  ///< one row per training sample
};

nlohmann::ordered_json to_json(const TeacherEpoch& e);

/// Teacher training followed by selection caching. With `out_dir`, writes
/// teacher.ckpt, teacher_metrics.jsonl and selections.jsonl there.
TeacherStage run_teacher_stage(const Dataset& data, const RunConfig& cfg, const std::string& out_dir = "",
                               const std::function<void(const std::string&)>& log = {});

struct StudyRun {
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::Full;
  std::vector<EpochMetrics> metrics;  ///< epoch 0 probe first
};

struct StudySeed {
  std::uint64_t seed = 0;
  double teacher_val_accuracy = 0.0;
  double teacher_evidence_top1 = 0.0;  ///< share of val samples whose top fragment holds evidence
};

struct StudyResult {
  std::vector<StudySeed> teachers;
  std::vector<StudyRun> runs;

  /// Mean over seeds of the final-epoch test accuracy of one ablation.
  BucketAccuracy mean_final_test(Ablation a) const;
};

/// Trains one teacher per seed (only if some ablation reads selections) and
/// then every requested ablation on the same dataset. With `out_dir`, each
/// run writes into out_dir/seed{s}/{ablation}/ and the teacher outputs into
/// out_dir/seed{s}/.
StudyResult run_study(const Dataset& data, const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                      const std::vector<Ablation>& ablations, const std::string& out_dir = "",
                      const std::function<void(const std::string&)>& log = {});

nlohmann::ordered_json to_json(const StudyResult& r);

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Line chart as a standalone SVG document; y is drawn on [0, 1].
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::vector<PlotSeries>& series);

}  // namespace rm
