#include "rm/study.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace rm {

using ojson = nlohmann::ordered_json;

ojson to_json(const TeacherEpoch& e) {
  return ojson{{"epoch", e.epoch},
               {"loss", e.loss},
               {"train_accuracy", e.train_accuracy},
               {"val_accuracy", e.val_accuracy},
               {"evidence_top1", e.evidence_top1}};
}

TeacherStage run_teacher_stage(const Dataset& data, const RunConfig& cfg, const std::string& out_dir,
                               const std::function<void(const std::string&)>& log) {
  cfg.validate();
  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metrics.open(out_dir + "/teacher_metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics) throw DataError("cannot write " + out_dir + "/teacher_metrics.jsonl");
  }
  TeacherStage stage;
  stage.params = train_teacher(data, cfg.model, teacher_config(cfg), [&](const TeacherEpoch& e) {
    stage.epochs.push_back(e);
    const auto line = to_json(e).dump();
    if (metrics.is_open()) metrics << line << '\n';
    if (log) log("teacher " + line);
  });
  stage.val = evaluate_teacher(stage.params, cfg.model, data.val, data.config.evidence_length);
  stage.selections = compute_selections(stage.params, cfg.model, data.train, cfg.rehearsal.fragments);
  if (!out_dir.empty()) {
    const ojson meta{{"kind", "teacher"}, {"config", to_json(cfg)}};
    write_checkpoint(out_dir + "/teacher.ckpt", to_named(stage.params, meta.dump()));
    write_selection_cache(stage.selections, out_dir + "/selections.jsonl");
  }
  return stage;
}

BucketAccuracy StudyResult::mean_final_test(Ablation a) const {
  BucketAccuracy mean;
  std::size_t n = 0;
  for (const auto& r : runs) {
    if (r.ablation != a || r.metrics.empty()) continue;
    const auto& t = r.metrics.back().test;
    mean.overall += t.overall;
    mean.early += t.early;
    mean.later += t.later;
    mean.count += t.count;
    mean.early_count += t.early_count;
    mean.later_count += t.later_count;
    ++n;
  }
  if (n > 0) {
    mean.overall /= static_cast<double>(n);
    mean.early /= static_cast<double>(n);
    mean.later /= static_cast<double>(n);
  }
  return mean;
}

StudyResult run_study(const Dataset& data, const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                      const std::vector<Ablation>& ablations, const std::string& out_dir,
                      const std::function<void(const std::string&)>& log) {
  if (seeds.empty() || ablations.empty()) throw ConfigError("ablate: at least one seed and one ablation required");
  const bool needs_teacher = std::any_of(ablations.begin(), ablations.end(), [](Ablation a) {
    return a == Ablation::Full || a == Ablation::OnlyRec || a == Ablation::OnlyFam;
  });
  StudyResult result;
  for (const auto seed : seeds) {
    RunConfig c = cfg;
    c.training.seed = seed;
    const std::string seed_dir = out_dir.empty() ? "" : out_dir + "/seed" + std::to_string(seed);
    std::vector<SelectionResult> selections;
    if (needs_teacher) {
      auto stage = run_teacher_stage(data, c, seed_dir, log);
      result.teachers.push_back({seed, stage.val.accuracy, stage.val.evidence_top1});
      selections = std::move(stage.selections);
    }
    for (const auto a : ablations) {
      StudyRun run;
      run.seed = seed;
      run.ablation = a;
      const std::string dir = seed_dir.empty() ? "" : seed_dir + "/" + to_string(a);
      const auto lw = ablation_weights(a, c.loss_weights);
      train_student(data, c, a, needs_teacher ? &selections : nullptr, dir, [&](const EpochMetrics& m) {
        run.metrics.push_back(m);
        if (log) log("seed " + std::to_string(seed) + " " + to_json(m, a, lw).dump());
      });
      result.runs.push_back(std::move(run));
    }
  }
  return result;
}

ojson to_json(const StudyResult& r) {
  ojson teachers = ojson::array();
  for (const auto& t : r.teachers)
    teachers.push_back({{"seed", t.seed},
                        {"val_accuracy", t.teacher_val_accuracy},
                        {"evidence_top1", t.teacher_evidence_top1}});
  ojson runs = ojson::array();
  std::vector<Ablation> seen;
  for (const auto& run : r.runs) {
    if (std::find(seen.begin(), seen.end(), run.ablation) == seen.end()) seen.push_back(run.ablation);
    if (run.metrics.empty()) continue;
    const auto& last = run.metrics.back();
    runs.push_back({{"seed", run.seed},
                    {"ablation", to_string(run.ablation)},
                    {"epochs", last.epoch},
                    {"test", {{"overall", last.test.overall}, {"early", last.test.early}, {"later", last.test.later}}},
                    {"val", {{"overall", last.val.overall}, {"early", last.val.early}, {"later", last.val.later}}}});
  }
  ojson mean = ojson::object();
  for (const auto a : seen) {
    const auto m = r.mean_final_test(a);
    mean[to_string(a)] = {{"overall", m.overall}, {"early", m.early}, {"later", m.later}};
  }
  return ojson{{"teachers", teachers}, {"runs", runs}, {"mean_test", mean}};
}

namespace {

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::vector<PlotSeries>& series) {
  constexpr double W = 640, H = 400, left = 60, right = 160, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  double x_min = 0, x_max = 1;
  bool any = false;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw ShapeError("plot: series '" + s.label + "' has unequal x and y lengths");
    for (double x : s.x) {
      x_min = any ? std::min(x_min, x) : x;
      x_max = any ? std::max(x_max, x) : x;
      any = true;
    }
  }
  if (x_max <= x_min) x_max = x_min + 1;
  auto px = [&](double x) { return left + (x - x_min) / (x_max - x_min) * pw; };
  auto py = [&](double y) { return top + (1.0 - std::clamp(y, 0.0, 1.0)) * ph; };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ostringstream svg;
  svg << std::fixed << std::setprecision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">" << escape_xml(title)
      << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = i / 4.0;
    svg << "<line x1=\"" << left << "\" y1=\"" << py(y) << "\" x2=\"" << left + pw << "\" y2=\"" << py(y)
        << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << left - 8 << "\" y=\"" << py(y) + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << y << "</text>\n";
  }
  svg << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"" << H - 14 << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << std::setprecision(0) << x_min << "</text>\n";
  svg << "<text x=\"" << left + pw << "\" y=\"" << H - 14
      << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << x_max << "</text>\n"
      << std::setprecision(2);
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 14
      << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">" << escape_xml(x_label)
      << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = colors[i % (sizeof(colors) / sizeof(colors[0]))];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) svg << (k ? " " : "") << px(s.x[k]) << ',' << py(s.y[k]);
    svg << "\"/>\n";
    const double ly = top + 16.0 * static_cast<double>(i);
    svg << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
        << escape_xml(s.label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace rm
