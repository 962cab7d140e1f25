// Acceptance runner: prints one PASS/FAIL line per criterion and exits
// nonzero if any selected criterion fails.
//
//   rm_acceptance [--criteria 1,2,...] [--fixture scaled.json] [--work dir] [--babi file]

#include "gradcheck.hpp"

#include "rm/babi.hpp"
#include "rm/study.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

using namespace rm;
using rm::testing::gradcheck;
using rm::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.width = 16;
  m.slots = 4;
  m.segment = 4;
  m.heads = 2;
  m.encoder_layers = 1;
  m.decoder_layers = 1;
  m.items = 20;
  m.queries = 3;
  m.answers = 4;
  return m;
}

SyntheticConfig small_task() {
  SyntheticConfig s;
  s.facts = 40;
  s.stream_length = 30;
  s.queries = 4;
  s.answers = 3;
  s.evidence_length = 2;
  return s;
}

// Projects a matrix-valued op onto a fixed random direction.
Var<double> probe(Var<double> out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, out.graph->constant(random_matrix(out.rows(), out.cols(), rng))));
}

Outcome gradient_integrity() {
  const auto m = tiny_model();
  auto params = make_student_params(m, 5);
  Rng rng(9);
  // A nonzero head lets the loss reach every reasoner parameter.
  params.set("reason.head.w", random_matrix(m.width, m.answers, rng).cast<float>());
  auto table = params.cast<double>();
  auto teacher = make_teacher_params(m, 6).cast<double>();

  std::vector<int> s1{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, s2{13, 14, 15, 16, 17, 18, 19, 0, 1, 2, 3, 4};
  const std::vector<const std::vector<int>*> streams{&s1, &s2};
  RehearsalConfig rc;
  rc.fragments = 2;
  Rng plan_rng(4);
  const auto plan = build_fragment_batch(streams, {{0, 2}, {1, 2}}, m.segment, rc, m.items, plan_rng);
  Rng data(11);
  const Matrix<double> x = random_matrix(2 * m.segment, m.width, data);
  const Matrix<double> mem = random_matrix(2 * m.slots, m.width, data);

  using Loss = std::function<Var<double>(const Binder<double>&)>;
  struct Case {
    const char* name;
    const ParamTable<double>* table;
    Loss loss;
  };
  const std::vector<Case> cases{
      {"gru_cell", &table,
       [&](const Binder<double>& p) {
         auto& g = p.graph();
         return probe(gru_cell(p, "gru", g.constant(mem), g.constant(mem.reverse())), 1);
       }},
      {"multi_head_attention", &table,
       [&](const Binder<double>& p) {
         auto& g = p.graph();
         AttentionLayout l{m.heads, m.segment, m.slots, {}, {}};
         return probe(multi_head_attention(p, "decoder.layer0.cross", g.constant(x), g.constant(mem), g.constant(mem), l), 2);
       }},
      {"transformer_encoder", &table,
       [&](const Binder<double>& p) {
         return probe(transformer_encoder(p, "encoder", m.encoder_shape(), p.graph().constant(x), m.segment), 3);
       }},
      {"transformer_decoder", &table,
       [&](const Binder<double>& p) {
         auto& g = p.graph();
         return probe(transformer_decoder(p, "decoder", m.decoder_shape(), g.constant(x), m.segment, g.constant(mem),
                                          m.slots),
                      4);
       }},
      {"slot_item_align", &table,
       [&](const Binder<double>& p) {
         auto& g = p.graph();
         return probe(slot_item_align(p, g.constant(mem), g.constant(x), m.slots, m.segment), 5);
       }},
      {"write_streams", &table, [&](const Binder<double>& p) { return probe(write_streams(p, m, streams), 6); }},
      {"reason", &table,
       [&](const Binder<double>& p) { return reason_loss(reason(p, m, p.graph().constant(mem), {0, 2}), {1, 3}); }},
      {"teacher_forward", &teacher,
       [&](const Binder<double>& p) { return reason_loss(teacher_forward(p, m, streams, {0, 2}), {1, 3}); }},
      {"combined_loss", &table,
       [&](const Binder<double>& p) {
         return student_forward(p, m, streams, {0, 2}, {1, 3}, &plan, LossWeights{}).total;
       }},
  };

  double worst = 0.0;
  int coords = 0;
  std::string where;
  for (const auto& c : cases) {
    const auto r = gradcheck(*c.table, c.loss, 120, 7, 1e-4);
    coords += r.coordinates;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      where = std::string(c.name) + " " + r.worst;
    }
  }
  return {worst < 1e-5, "max rel error " + fmt(worst) + " over " + std::to_string(coords) + " coordinates in " +
                            std::to_string(cases.size()) + " ops (worst: " + where + ")"};
}

Outcome mass_conservation() {
  const auto m = tiny_model();
  const auto table = make_student_params(m, 12).cast<double>();
  Rng rng(13);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Index K = 1 + static_cast<Index>(rng.uniform_int(8)), N = 1 + static_cast<Index>(rng.uniform_int(12));
    const Matrix<double> mem = random_matrix(K, m.width, rng, -2, 2), f = random_matrix(N, m.width, rng, -2, 2);
    Graph<double> g;
    Binder<double> p(g, table);
    const auto l = slot_item_align(p, g.constant(mem), g.constant(f), K, N).value();
    worst = std::max(worst, (l.colwise().sum() - f.colwise().sum()).cwiseAbs().maxCoeff());
  }
  return {worst < 1e-4, "max per-coordinate deviation " + fmt(worst) + " over 1000 pairs"};
}

Outcome generator_oracle() {
  auto cfg = small_task();
  Rng rng(14);
  const auto chains = build_logic_chains(cfg, rng);
  int ok = 0, early = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    Rng r = Rng(15).fork({static_cast<std::uint64_t>(i)});
    const auto s = generate_sample(chains[static_cast<std::size_t>(i) % chains.size()], chains, cfg, r);
    ok += verify_sample(s, chains);
    early += s.bucket == Bucket::Early;
  }
  const double freq = early / static_cast<double>(n);
  return {ok == n && std::abs(freq - 0.5) <= 0.05,
          std::to_string(ok) + "/" + std::to_string(n) + " verified, early frequency " + fmt(freq)};
}

Outcome constant_storage(const RunConfig& cfg) {
  const auto params = make_student_params(cfg.model, 0);
  auto stream = [&](std::size_t n) {
    Rng rng(n);
    std::vector<int> s(n);
    for (auto& v : s) v = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.model.items)));
    return s;
  };
  const auto a = serialize_memory(write_stream(params, cfg.model, stream(100))).size();
  const auto b = serialize_memory(write_stream(params, cfg.model, stream(1000))).size();
  return {a == b, std::to_string(a) + " bytes at length 100, " + std::to_string(b) + " bytes at length 1000"};
}

Outcome chance_level(const RunConfig& cfg, const Dataset& data) {
  std::vector<Sample> samples(data.val.begin(), data.val.end());
  samples.insert(samples.end(), data.test.begin(), data.test.end());
  const std::size_t need = 1000 - samples.size();
  const std::size_t stride = data.train.size() / need;
  for (std::size_t i = 0; i < need; ++i) samples.push_back(data.train[i * stride]);
  const auto r = evaluate_student(make_student_params(cfg.model, 0), cfg.model, samples);
  const double ra = static_cast<double>(cfg.model.answers);
  const double rel = std::abs(r.reason_loss - std::log(ra)) / std::log(ra);
  const double gap = std::abs(r.accuracy.overall - 1.0 / ra);
  return {rel <= 0.05 && gap <= 0.02, "loss " + fmt(r.reason_loss) + " vs ln " + fmt(ra, 2) + " = " +
                                          fmt(std::log(ra)) + ", accuracy " + fmt(r.accuracy.overall) + " vs " +
                                          fmt(1.0 / ra) + " over " + std::to_string(samples.size()) + " samples"};
}

struct ScaledStudy {
  StudyResult result;
  double seconds = 0.0;
  std::vector<double> top1;
};

ScaledStudy run_scaled(const RunConfig& cfg, const Dataset& data, const std::string& work) {
  ScaledStudy s;
  const auto t0 = std::chrono::steady_clock::now();
  s.result = run_study(data, cfg, {0, 1, 2}, {Ablation::Full, Ablation::NoRehearsal}, work,
                       [](const std::string& line) { std::cerr << line << '\n'; });
  s.seconds = seconds_since(t0);
  for (const auto& t : s.result.teachers) s.top1.push_back(t.teacher_evidence_top1);
  std::ofstream(work + "/acceptance_summary.json") << to_json(s.result).dump(2) << '\n';
  return s;
}

Outcome ablation_gap(const ScaledStudy& s, const RunConfig& cfg) {
  const auto full = s.result.mean_final_test(Ablation::Full);
  const auto plain = s.result.mean_final_test(Ablation::NoRehearsal);
  const double chance = 1.0 / static_cast<double>(cfg.model.answers);
  const double gap = full.early - plain.early;
  const bool pass = gap >= 0.02 && full.early > chance && plain.early > chance && s.seconds <= 1800.0;
  return {pass, "early test accuracy full " + fmt(full.early) + " vs no-rehearsal " + fmt(plain.early) + " (gap " +
                    fmt(100 * gap, 3) + " points, chance " + fmt(chance) + ", 3 seeds, " + fmt(s.seconds / 60, 3) +
                    " min)"};
}

Outcome rehearsal_learnability(const ScaledStudy& s, const RunConfig& cfg) {
  const double fam_limit = 0.5 * 2.0 * std::log(2.0);
  const double rec_limit = 0.5 * std::log(static_cast<double>(cfg.model.items));
  bool pass = true;
  std::string detail;
  for (const auto& r : s.result.runs) {
    if (r.ablation != Ablation::Full || r.metrics.empty()) continue;
    const auto& t = r.metrics.back().train;
    const double fam = t.familiarity.value_or(INFINITY), rec = t.recollection.value_or(INFINITY);
    pass = pass && fam < fam_limit && rec < rec_limit;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(r.seed) + " L_fam " + fmt(fam) +
              " L_rec " + fmt(rec);
  }
  return {pass, detail + " (limits " + fmt(fam_limit) + ", " + fmt(rec_limit) + ")"};
}

Outcome teacher_usefulness(const ScaledStudy& s) {
  bool pass = !s.top1.empty();
  std::string detail;
  for (std::size_t i = 0; i < s.top1.size(); ++i) {
    pass = pass && s.top1[i] > 0.6;
    detail += (i ? ", " : "") + fmt(s.top1[i]);
  }
  return {pass, "evidence top-1 on val per seed: " + detail};
}

Outcome determinism(const std::string& work) {
  RunConfig cfg;
  cfg.synthetic = small_task();
  cfg.synthetic.samples_per_chain = 20;
  cfg.model = tiny_model();
  cfg.model.items = 40;
  cfg.model.queries = 4;
  cfg.model.answers = 3;
  cfg.model.segment = 5;
  cfg.rehearsal.fragments = 2;
  cfg.training.epochs = 2;
  cfg.training.teacher_epochs = 3;
  cfg.training.batch_size = 8;
  const auto data = generate_dataset(cfg.synthetic);
  const auto teacher = train_teacher(data, cfg.model, teacher_config(cfg));
  const auto sel = compute_selections(teacher, cfg.model, data.train, cfg.rehearsal.fragments);

  auto trace = [&](const StudentRun& r) {
    std::string t;
    for (const auto& m : r.metrics) t += to_json(m, Ablation::Full, cfg.loss_weights).dump() + "\n";
    return t;
  };
  const auto a = train_student(data, cfg, Ablation::Full, &sel, work + "/run_a");
  const auto b = train_student(data, cfg, Ablation::Full, &sel);
  const bool same_trace = trace(a) == trace(b) && a.params.identical(b.params);

  auto loaded = make_student_params(cfg.model, 77);
  load_into(loaded, read_checkpoint(work + "/run_a/student.ckpt"));
  const auto before = evaluate_student(a.params, cfg.model, data.test);
  const auto after = evaluate_student(loaded, cfg.model, data.test);
  const bool same_eval = before.predictions == after.predictions && before.reason_loss == after.reason_loss &&
                         before.accuracy.overall == after.accuracy.overall;
  return {same_trace && same_eval, std::string("loss traces ") + (same_trace ? "identical" : "differ") +
                                       ", reloaded checkpoint eval " + (same_eval ? "bit-identical" : "differs")};
}

Outcome babi_ingestion(const std::string& path) {
  std::size_t tabs = 0;
  {
    std::ifstream in(path);
    if (!in) return {false, "cannot open " + path};
    for (std::string line; std::getline(in, line);) tabs += line.find('\t') != std::string::npos;
  }
  try {
    const auto stories = parse_babi_file(path);
    const auto records = babi_records(stories);
    std::istringstream again(serialize_babi(stories));
    const auto reparsed = parse_babi(again, path);
    bool same = reparsed.size() == stories.size();
    for (std::size_t i = 0; same && i < stories.size(); ++i)
      same = story_token_counts(stories[i]) == story_token_counts(reparsed[i]);
    return {records.size() == tabs && same, fs::path(path).filename().string() + ": " +
                                                std::to_string(stories.size()) + " stories, " +
                                                std::to_string(records.size()) + " records, " + std::to_string(tabs) +
                                                " tab lines, token multisets " + (same ? "round-trip" : "differ")};
  } catch (const std::exception& e) {
    return {false, std::string("parse error: ") + e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string criteria = "1,2,3,4,5,6,7,8,9,10";
  std::string fixture = std::string(RM_SOURCE_DIR) + "/tests/acceptance/scaled.json";
  std::string work = "acceptance_work";
  std::string babi;
  app.add_option("--criteria", criteria, "comma-separated criterion numbers");
  app.add_option("--fixture", fixture, "scaled run configuration");
  app.add_option("--work", work, "scratch directory for run outputs");
  app.add_option("--babi", babi, "bAbI task file (default: RM_BABI_FILE or the bundled sample)");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  {
    std::stringstream ss(criteria);
    for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));
  }
  if (babi.empty()) {
    const char* env = std::getenv("RM_BABI_FILE");
    babi = env ? env : std::string(RM_SOURCE_DIR) + "/tests/data/babi_sample.txt";
  }
  fs::create_directories(work);

  const auto cfg = load_run_config(fixture);
  const auto data = generate_dataset(cfg.synthetic);
  std::optional<ScaledStudy> study;
  if (selected.count(6) || selected.count(7) || selected.count(8)) study = run_scaled(cfg, data, work + "/scaled");

  bool all = true;
  auto report = [&](int n, const char* title, const std::function<Outcome()>& f) {
    if (!selected.count(n)) return;
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " " << title << ": " << o.detail << std::endl;
  };
  report(1, "gradient integrity", gradient_integrity);
  report(2, "mass conservation", mass_conservation);
  report(3, "generator oracle", generator_oracle);
  report(4, "constant storage", [&] { return constant_storage(cfg); });
  report(5, "chance level", [&] { return chance_level(cfg, data); });
  report(6, "rehearsal ablation", [&] { return ablation_gap(*study, cfg); });
  report(7, "rehearsal learnability", [&] { return rehearsal_learnability(*study, cfg); });
  report(8, "teacher usefulness", [&] { return teacher_usefulness(*study); });
  report(9, "determinism and persistence", [&] { return determinism(work); });
  report(10, "bAbI ingestion", [&] { return babi_ingestion(babi); });
  return all ? 0 : 1;
}
