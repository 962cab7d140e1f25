#include "rm/babi.hpp"
#include "rm/study.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>

namespace fs = std::filesystem;
using namespace rm;
using ojson = nlohmann::ordered_json;

namespace {

// Exit codes shared by every subcommand.
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

// Configurations above this many samples need --full.
constexpr std::size_t kLargeDataset = 100000;

struct Common {
  std::string config;
  std::string out = "out";
  std::int64_t seed = -1;
};

RunConfig load_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.config.empty()) cfg.validate();
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed for " + path);
}

void print_bucket(const std::string& label, const BucketAccuracy& a) {
  std::printf("%-12s overall %.4f  early %.4f (%zu)  later %.4f (%zu)\n", label.c_str(), a.overall, a.early,
              a.early_count, a.later, a.later_count);
}

ojson bucket_json(const BucketAccuracy& a) {
  return ojson{{"overall", a.overall}, {"early", a.early},         {"later", a.later},
               {"count", a.count},     {"early_count", a.early_count}, {"later_count", a.later_count}};
}

int cmd_gen(const Common& c, bool full) {
  RunConfig cfg = load_config(c);
  if (c.seed >= 0) cfg.synthetic.seed = static_cast<std::uint64_t>(c.seed);
  const std::size_t total = cfg.synthetic.chain_count() * static_cast<std::size_t>(cfg.synthetic.samples_per_chain);
  if (total > kLargeDataset && !full)
    throw ConfigError("synthetic: " + std::to_string(total) + " samples requested; pass --full to generate more than " +
                      std::to_string(kLargeDataset));
  const auto data = generate_dataset(cfg.synthetic);
  write_dataset(data, c.out);
  write_text(c.out + "/config.json", to_json(cfg).dump(2) + "\n");
  std::printf("chains %zu  samples %zu  (train %zu, val %zu, test %zu)\n", data.chains.size(), data.total(),
              data.train.size(), data.val.size(), data.test.size());
  return 0;
}

RunConfig training_config(const Common& c) {
  RunConfig cfg = load_config(c);
  if (c.seed >= 0) cfg.training.seed = static_cast<std::uint64_t>(c.seed);
  return cfg;
}

void check_dataset_matches(const Dataset& data, const RunConfig& cfg) {
  const auto& a = data.config;
  const auto& b = cfg.synthetic;
  if (a.facts != b.facts || a.stream_length != b.stream_length || a.queries != b.queries || a.answers != b.answers ||
      a.evidence_length != b.evidence_length)
    throw ConfigError("dataset manifest does not match the synthetic section of the config");
}

int cmd_train_teacher(const Common& c, const std::string& data_dir) {
  const RunConfig cfg = training_config(c);
  const auto data = read_dataset(data_dir);
  check_dataset_matches(data, cfg);
  const auto stage = run_teacher_stage(data, cfg, c.out, [](const std::string& line) { std::cout << line << '\n'; });
  std::printf("teacher val accuracy %.4f  evidence top-1 %.4f  selections %zu -> %s\n", stage.val.accuracy,
              stage.val.evidence_top1, stage.selections.size(), (c.out + "/selections.jsonl").c_str());
  return 0;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& selections_path,
              const std::string& ablation_name) {
  const RunConfig cfg = training_config(c);
  const Ablation ablation = ablation_from_string(ablation_name);
  const auto data = read_dataset(data_dir);
  check_dataset_matches(data, cfg);
  std::vector<SelectionResult> selections;
  const bool uses_cache = ablation == Ablation::Full || ablation == Ablation::OnlyRec || ablation == Ablation::OnlyFam;
  if (uses_cache) {
    if (selections_path.empty()) throw ConfigError("--selections is required for the " + ablation_name + " variant");
    selections = read_selection_cache(selections_path);
  }
  const auto w = ablation_weights(ablation, cfg.loss_weights);
  const auto run = train_student(data, cfg, ablation, uses_cache ? &selections : nullptr, c.out,
                                 [&](const EpochMetrics& m) { std::cout << to_json(m, ablation, w).dump() << '\n'; });
  print_bucket("test", run.metrics.back().test);
  return 0;
}

std::vector<fs::path> checkpoint_files(const std::string& path) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    const std::regex pattern(R"(student_epoch(\d+)\.ckpt)");
    std::vector<std::pair<int, fs::path>> found;
    for (const auto& entry : fs::directory_iterator(path)) {
      std::smatch m;
      const auto name = entry.path().filename().string();
      if (std::regex_match(name, m, pattern)) found.emplace_back(std::stoi(m[1]), entry.path());
    }
    std::sort(found.begin(), found.end());
    for (auto& [e, p] : found) files.push_back(p);
    if (files.empty() && fs::exists(fs::path(path) / "student.ckpt")) files.push_back(fs::path(path) / "student.ckpt");
    if (files.empty()) throw DataError("no student checkpoints in " + path);
  } else {
    files.emplace_back(path);
  }
  return files;
}

int cmd_eval(const Common& c, const std::string& data_dir, const std::string& checkpoint, const std::string& split,
             const std::string& plot) {
  const auto data = read_dataset(data_dir);
  const std::vector<Sample>* samples = nullptr;
  if (split == "train") samples = &data.train;
  else if (split == "val") samples = &data.val;
  else if (split == "test") samples = &data.test;
  else throw ConfigError("--split must be train, val or test");

  PlotSeries early{"early", {}, {}}, later{"later", {}, {}};
  ojson results = ojson::array();
  for (const auto& file : checkpoint_files(checkpoint)) {
    const auto named = read_checkpoint(file.string());
    const auto meta = nlohmann::json::parse(named.meta_json);
    if (!meta.contains("config")) throw DataError(file.string() + ": checkpoint metadata lacks the run config");
    RunConfig cfg = run_config_from_json(meta.at("config"));
    if (!c.config.empty()) {
      const RunConfig given = load_run_config(c.config);
      cfg.model = given.model;
    }
    ParameterStore params = make_student_params(cfg.model, 0);
    load_into(params, named);
    const auto res = evaluate_student(params, cfg.model, *samples);
    const int epoch = meta.value("epoch", 0);
    print_bucket(file.filename().string(), res.accuracy);
    early.x.push_back(epoch);
    early.y.push_back(res.accuracy.early);
    later.x.push_back(epoch);
    later.y.push_back(res.accuracy.later);
    results.push_back({{"checkpoint", file.string()},
                       {"epoch", epoch},
                       {"ablation", meta.value("ablation", "")},
                       {"split", split},
                       {"reason_loss", res.reason_loss},
                       {"memory_bytes", res.memory_bytes},
                       {"accuracy", bucket_json(res.accuracy)}});
  }
  fs::create_directories(c.out);
  write_text(c.out + "/eval_" + split + ".json", results.dump(2) + "\n");
  if (!plot.empty())
    write_text(plot, line_chart_svg("Accuracy by evidence position (" + split + ")", "epoch", {early, later}));
  return 0;
}

int cmd_ablate(const Common& c, const std::string& data_dir, int seeds, const std::vector<std::string>& names) {
  RunConfig cfg = training_config(c);
  const Dataset data = data_dir.empty() ? generate_dataset(cfg.synthetic) : read_dataset(data_dir);
  if (!data_dir.empty()) check_dataset_matches(data, cfg);
  if (seeds <= 0) throw ConfigError("--seeds must be positive");
  std::vector<std::uint64_t> seed_list;
  for (int i = 0; i < seeds; ++i) seed_list.push_back(cfg.training.seed + static_cast<std::uint64_t>(i));
  std::vector<Ablation> ablations;
  for (const auto& n : names) ablations.push_back(ablation_from_string(n));
  const auto result =
      run_study(data, cfg, seed_list, ablations, c.out, [](const std::string& line) { std::cout << line << '\n'; });
  fs::create_directories(c.out);
  write_text(c.out + "/ablation_summary.json", to_json(result).dump(2) + "\n");
  std::printf("\n%-16s %8s %8s %8s   (test, mean of %d seeds)\n", "variant", "overall", "early", "later", seeds);
  for (const auto a : ablations) {
    const auto m = result.mean_final_test(a);
    std::printf("%-16s %8.4f %8.4f %8.4f\n", to_string(a), m.overall, m.early, m.later);
  }
  return 0;
}

std::vector<fs::path> babi_inputs(const std::string& input, const std::string& task) {
  if (!fs::is_directory(input)) return {fs::path(input)};
  std::vector<fs::path> files;
  const std::regex pattern(task == "all" ? std::string(R"(qa\d+_.*\.txt)") : "qa" + task + R"(_.*\.txt)");
  for (const auto& entry : fs::directory_iterator(input))
    if (std::regex_match(entry.path().filename().string(), pattern)) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no bAbI task files matching task " + task + " in " + input);
  return files;
}

int cmd_babi(const Common& c, const std::string& input, const std::string& task, int max_segment) {
  if (max_segment <= 0) throw ConfigError("--max-segment must be positive");
  fs::create_directories(c.out);
  std::ofstream records(c.out + "/records.jsonl", std::ios::binary | std::ios::trunc);
  if (!records) throw DataError("cannot write " + c.out + "/records.jsonl");
  std::vector<BabiStory> all;
  for (const auto& file : babi_inputs(input, task)) {
    auto stories = parse_babi_file(file.string());
    const auto recs = babi_records(stories, static_cast<std::size_t>(max_segment));
    for (const auto& r : recs) {
      records << ojson{{"source", file.filename().string()},
                       {"story", r.story},
                       {"segments", r.segments},
                       {"question", r.question},
                       {"answer", r.answer},
                       {"support_segments", r.support_segments}}
                     .dump()
              << '\n';
    }
    std::printf("%s: %zu stories, %zu questions\n", file.filename().string().c_str(), stories.size(), recs.size());
    all.insert(all.end(), std::make_move_iterator(stories.begin()), std::make_move_iterator(stories.end()));
  }
  const auto vocab = babi_vocabulary(all);
  write_text(c.out + "/vocab.json", ojson(vocab).dump(2) + "\n");
  std::printf("vocabulary %zu words\n", vocab.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rehearsal memory: synthetic logic-chain data, teacher and student training, evaluation"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "run configuration (JSON)");
    sub->add_option("--out", common.out, "output directory")->capture_default_str();
    sub->add_option("--seed", common.seed, "override the seed (synthetic seed for gen, training seed otherwise)");
  };

  bool full = false;
  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  add_common(gen);
  gen->add_flag("--full", full, "allow configurations above 100k samples");

  std::string data_dir;
  auto* teacher = app.add_subcommand("train-teacher", "train the history sampler and cache selections");
  add_common(teacher);
  teacher->add_option("--data", data_dir, "dataset directory")->required();

  std::string selections, ablation = "full";
  auto* train = app.add_subcommand("train", "train the student");
  add_common(train);
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--selections", selections, "selection cache from train-teacher");
  train->add_option("--ablation", ablation, "full, no-rehearsal, only-rec, only-fam or random-sampler")
      ->capture_default_str();

  std::string checkpoint, split = "test", plot;
  auto* eval = app.add_subcommand("eval", "evaluate student checkpoints");
  add_common(eval);
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint file, or a run directory for every epoch")->required();
  eval->add_option("--split", split, "train, val or test")->capture_default_str();
  eval->add_option("--plot", plot, "write an SVG of early/later accuracy per checkpoint");

  int seeds = 3;
  std::vector<std::string> ablations{"full", "no-rehearsal"};
  auto* ablate = app.add_subcommand("ablate", "train several variants over several seeds");
  add_common(ablate);
  ablate->add_option("--data", data_dir, "dataset directory (generated from the config when omitted)");
  ablate->add_option("--seeds", seeds, "number of consecutive training seeds")->capture_default_str();
  ablate->add_option("--ablations", ablations, "variants to train")->capture_default_str();

  std::string babi_input, task = "all";
  int max_segment = 15;
  auto* babi = app.add_subcommand("babi", "parse bAbI task files into segmented records");
  add_common(babi);
  babi->add_option("--input", babi_input, "task file, or a directory of qa*_*.txt files")->required();
  babi->add_option("--task", task, "task number or 'all' when --input is a directory")->capture_default_str();
  babi->add_option("--max-segment", max_segment, "maximum tokens per segment")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen(common, full);
    if (*teacher) return cmd_train_teacher(common, data_dir);
    if (*train) return cmd_train(common, data_dir, selections, ablation);
    if (*eval) return cmd_eval(common, data_dir, checkpoint, split, plot);
    if (*ablate) return cmd_ablate(common, data_dir, seeds, ablations);
    if (*babi) return cmd_babi(common, babi_input, task, max_segment);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return 0;
}
