#include "rm/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

namespace rm {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoRehearsal: return "no-rehearsal";
    case Ablation::OnlyRec: return "only-rec";
    case Ablation::OnlyFam: return "only-fam";
    case Ablation::RandomSampler: return "random-sampler";
  }
  return "full";
}

Ablation ablation_from_string(const std::string& s) {
  for (auto a : {Ablation::Full, Ablation::NoRehearsal, Ablation::OnlyRec, Ablation::OnlyFam, Ablation::RandomSampler})
    if (s == to_string(a)) return a;
  throw ConfigError("unknown ablation '" + s + "' (full, no-rehearsal, only-rec, only-fam, random-sampler)");
}

void RunConfig::validate() const {
  synthetic.validate();
  model.validate();
  rehearsal.validate();
  loss_weights.validate();
  if (model.items != synthetic.facts)
    throw ConfigError("model.items: " + std::to_string(model.items) + " differs from synthetic.facts " +
                      std::to_string(synthetic.facts));
  if (model.queries != synthetic.queries) throw ConfigError("model.queries: differs from synthetic.queries");
  if (model.answers != synthetic.answers) throw ConfigError("model.answers: differs from synthetic.answers");
  const int count = fragment_count(static_cast<std::size_t>(synthetic.stream_length), model.segment);
  if (count < rehearsal.fragments)
    throw ConfigError("rehearsal.fragments: B = " + std::to_string(rehearsal.fragments) + " exceeds the " +
                      std::to_string(count) + " fragments of a stream");
  if (training.batch_size <= 0) throw ConfigError("training.batch_size: must be positive");
  if (training.epochs < 0) throw ConfigError("training.epochs: must be nonnegative");
  if (training.teacher_epochs < 0) throw ConfigError("training.teacher_epochs: must be nonnegative");
  if (training.probe_samples < 0) throw ConfigError("training.probe_samples: must be nonnegative");
  if (!(training.teacher_lr > 0)) throw ConfigError("training.teacher_lr: must be positive");
  if (!(optimizer.lr > 0) || !(optimizer.eps > 0) || optimizer.beta1 < 0 || optimizer.beta1 >= 1 ||
      optimizer.beta2 < 0 || optimizer.beta2 >= 1)
    throw ConfigError("optimizer: lr and eps must be positive, betas in [0, 1)");
}

ojson to_json(const RunConfig& c) {
  return ojson{{"synthetic", to_json(c.synthetic)},
               {"model", to_json(c.model)},
               {"rehearsal", {{"fragments", c.rehearsal.fragments}, {"negatives", c.rehearsal.negatives}}},
               {"loss_weights",
                {{"recollection", c.loss_weights.recollection},
                 {"familiarity", c.loss_weights.familiarity},
                 {"reason", c.loss_weights.reason}}},
               {"optimizer",
                {{"lr", c.optimizer.lr},
                 {"beta1", c.optimizer.beta1},
                 {"beta2", c.optimizer.beta2},
                 {"eps", c.optimizer.eps}}},
               {"training",
                {{"batch_size", c.training.batch_size},
                 {"epochs", c.training.epochs},
                 {"teacher_epochs", c.training.teacher_epochs},
                 {"teacher_lr", c.training.teacher_lr},
                 {"seed", c.training.seed},
                 {"probe_samples", c.training.probe_samples}}}};
}

namespace {

void only_keys(const json& j, const std::string& section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(section + "." + k + ": unknown field");
}

template <typename T>
void read(const json& j, const std::string& section, const char* key, T& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(section + "." + key + ": expected a number");
  } else {
    if (!v.is_number_integer()) throw ConfigError(section + "." + key + ": expected an integer");
  }
  out = v.get<T>();
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  only_keys(j, "config", {"synthetic", "model", "rehearsal", "loss_weights", "optimizer", "training"});
  RunConfig c;
  if (j.contains("synthetic")) c.synthetic = synthetic_config_from_json(j.at("synthetic"));
  ModelConfig base;
  base.items = c.synthetic.facts;
  base.queries = c.synthetic.queries;
  base.answers = c.synthetic.answers;
  c.model = j.contains("model") ? model_config_from_json(j.at("model"), base) : base;
  if (j.contains("rehearsal")) {
    const auto& r = j.at("rehearsal");
    only_keys(r, "rehearsal", {"fragments", "negatives"});
    read(r, "rehearsal", "fragments", c.rehearsal.fragments);
    read(r, "rehearsal", "negatives", c.rehearsal.negatives);
  }
  if (j.contains("loss_weights")) {
    const auto& r = j.at("loss_weights");
    only_keys(r, "loss_weights", {"recollection", "familiarity", "reason"});
    read(r, "loss_weights", "recollection", c.loss_weights.recollection);
    read(r, "loss_weights", "familiarity", c.loss_weights.familiarity);
    read(r, "loss_weights", "reason", c.loss_weights.reason);
  }
  if (j.contains("optimizer")) {
    const auto& r = j.at("optimizer");
    only_keys(r, "optimizer", {"lr", "beta1", "beta2", "eps"});
    read(r, "optimizer", "lr", c.optimizer.lr);
    read(r, "optimizer", "beta1", c.optimizer.beta1);
    read(r, "optimizer", "beta2", c.optimizer.beta2);
    read(r, "optimizer", "eps", c.optimizer.eps);
  }
  if (j.contains("training")) {
    const auto& r = j.at("training");
    only_keys(r, "training", {"batch_size", "epochs", "teacher_epochs", "teacher_lr", "seed", "probe_samples"});
    read(r, "training", "batch_size", c.training.batch_size);
    read(r, "training", "epochs", c.training.epochs);
    read(r, "training", "teacher_epochs", c.training.teacher_epochs);
    read(r, "training", "teacher_lr", c.training.teacher_lr);
    read(r, "training", "seed", c.training.seed);
    read(r, "training", "probe_samples", c.training.probe_samples);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

TeacherTrainConfig teacher_config(const RunConfig& c) {
  TeacherTrainConfig tc;
  tc.epochs = c.training.teacher_epochs;
  tc.batch_size = c.training.batch_size;
  tc.seed = c.training.seed;
  tc.adam = c.optimizer;
  tc.adam.lr = c.training.teacher_lr;
  return tc;
}

LossWeights ablation_weights(Ablation a, const LossWeights& base) {
  LossWeights w = base;
  switch (a) {
    case Ablation::NoRehearsal:
      w.recollection = 0.0;
      w.familiarity = 0.0;
      break;
    case Ablation::OnlyRec: w.familiarity = 0.0; break;
    case Ablation::OnlyFam: w.recollection = 0.0; break;
    case Ablation::Full:
    case Ablation::RandomSampler: break;
  }
  return w;
}

template <typename S>
StudentLosses<S> student_forward(const Binder<S>& p, const ModelConfig& cfg,
                                 const std::vector<const std::vector<int>*>& streams, const std::vector<int>& queries,
                                 const std::vector<int>& answers, const FragmentBatch* plan, const LossWeights& w) {
  auto& g = p.graph();
  auto memory = write_streams(p, cfg, streams);
  auto logits = reason(p, cfg, memory, queries);
  StudentLosses<S> out;
  out.reason = reason_loss(logits, answers);
  out.logits = logits.value().template cast<float>();
  auto zero = g.constant(Matrix<S>::Zero(1, 1));
  Var<S> rec = zero, fam = zero;
  if (plan && plan->size() > 0 && (w.recollection > 0 || w.familiarity > 0)) {
    std::vector<const MaskedFragment*> frags;
    std::vector<Index> groups;
    for (std::size_t i = 0; i < plan->size(); ++i) {
      frags.push_back(&plan->positive[i]);
      groups.push_back(plan->owner[i]);
    }
    if (w.familiarity > 0)
      for (std::size_t i = 0; i < plan->size(); ++i) {
        frags.push_back(&plan->negative[i]);
        groups.push_back(plan->owner[i]);
      }
    auto decoded = decode_fragments(p, cfg, frags, memory, groups);
    if (w.recollection > 0) {
      std::vector<const MaskedFragment*> positives(frags.begin(), frags.begin() + static_cast<std::ptrdiff_t>(plan->size()));
      rec = recollection_loss(p, decoded, positives, plan->candidates.empty() ? nullptr : &plan->candidates);
      out.recollection = rec;
    }
    if (w.familiarity > 0) {
      auto scores = score_familiarity(p, cls_rows(decoded, cfg.segment + 1));
      std::vector<Index> pos(plan->size()), neg(plan->size());
      std::iota(pos.begin(), pos.end(), Index{0});
      std::iota(neg.begin(), neg.end(), static_cast<Index>(plan->size()));
      fam = familiarity_loss(gather_rows(scores, pos), gather_rows(scores, neg));
      out.familiarity = fam;
    }
  }
  out.total = combined_loss(rec, fam, out.reason, w);
  return out;
}

BucketAccuracy bucket_accuracy(const std::vector<Sample>& samples, const std::vector<int>& predictions) {
  if (samples.size() != predictions.size()) throw ShapeError("bucket_accuracy: one prediction per sample required");
  BucketAccuracy a;
  std::size_t hit = 0, hit_early = 0, hit_later = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const bool ok = predictions[i] == samples[i].answer;
    hit += ok;
    if (samples[i].bucket == Bucket::Early) {
      ++a.early_count;
      hit_early += ok;
    } else {
      ++a.later_count;
      hit_later += ok;
    }
  }
  a.count = samples.size();
  auto ratio = [](std::size_t n, std::size_t d) { return d ? static_cast<double>(n) / static_cast<double>(d) : 0.0; };
  a.overall = ratio(hit, a.count);
  a.early = ratio(hit_early, a.early_count);
  a.later = ratio(hit_later, a.later_count);
  return a;
}

EvalResult evaluate_student(const ParameterStore& params, const ModelConfig& cfg, const std::vector<Sample>& samples,
                            int batch_size) {
  EvalResult out;
  double loss = 0.0;
  for (std::size_t b = 0; b < samples.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(samples.size(), b + static_cast<std::size_t>(batch_size));
    std::vector<const std::vector<int>*> streams;
    std::vector<int> queries, answers;
    for (std::size_t i = b; i < e; ++i) {
      streams.push_back(&samples[i].stream);
      queries.push_back(samples[i].query);
      answers.push_back(samples[i].answer);
    }
    Graph<float> g;
    Binder<float> p(g, params.values());
    std::vector<int> updates;
    auto memory = write_streams(p, cfg, streams, &updates);
    for (std::size_t s = 0; s < streams.size(); ++s) {
      MemoryState state{memory.value().middleRows(static_cast<Index>(s) * cfg.slots, cfg.slots), 1 + updates[s]};
      const auto bytes = serialize_memory(state).size();
      if (out.memory_bytes == 0) out.memory_bytes = bytes;
      if (bytes != out.memory_bytes)
        throw ShapeError("storage law violated: memory snapshot of " + std::to_string(bytes) + " bytes, expected " +
                         std::to_string(out.memory_bytes));
    }
    auto logits = reason(p, cfg, memory, queries);
    loss += static_cast<double>(reason_loss(logits, answers).value()(0, 0)) * static_cast<double>(e - b);
    const auto pred = argmax_rows(logits.value());
    out.predictions.insert(out.predictions.end(), pred.begin(), pred.end());
  }
  out.reason_loss = samples.empty() ? 0.0 : loss / static_cast<double>(samples.size());
  out.accuracy = bucket_accuracy(samples, out.predictions);
  return out;
}

namespace {

ojson optional_number(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

ojson bucket_json(const BucketAccuracy& a) {
  return ojson{{"overall", a.overall},         {"early", a.early},
               {"later", a.later},             {"count", a.count},
               {"early_count", a.early_count}, {"later_count", a.later_count}};
}

}  // namespace

ojson to_json(const EpochMetrics& m, Ablation a, const LossWeights& w) {
  return ojson{{"epoch", m.epoch},
               {"ablation", to_string(a)},
               {"lambda", {w.recollection, w.familiarity, w.reason}},
               {"train",
                {{"recollection", optional_number(m.train.recollection)},
                 {"familiarity", optional_number(m.train.familiarity)},
                 {"reason", m.train.reason},
                 {"total", m.train.total}}},
               {"val", bucket_json(m.val)},
               {"test", bucket_json(m.test)}};
}

std::vector<int> random_selection(std::int64_t sample_index, int fragment_count, int fragments_to_pick,
                                  std::uint64_t seed) {
  if (fragment_count < fragments_to_pick || fragments_to_pick % 2 != 0)
    throw ConfigError("random_selection: cannot pick " + std::to_string(fragments_to_pick) + " of " +
                      std::to_string(fragment_count) + " fragments");
  Rng rng = Rng(seed).fork({0x5A3D1EULL, static_cast<std::uint64_t>(sample_index)});
  const int half = fragment_count / 2;
  std::vector<int> out;
  for (auto [lo, hi] : {std::pair{0, half}, std::pair{half, fragment_count}}) {
    std::vector<int> idx(static_cast<std::size_t>(hi - lo));
    std::iota(idx.begin(), idx.end(), lo);
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(fragments_to_pick / 2));
    std::sort(idx.begin(), idx.end());
    out.insert(out.end(), idx.begin(), idx.end());
  }
  return out;
}

std::string student_meta(const RunConfig& cfg, Ablation a, int epoch) {
  return ojson{{"kind", "student"}, {"ablation", to_string(a)}, {"epoch", epoch}, {"config", to_json(cfg)}}.dump();
}

namespace {

struct BatchOutcome {
  LossTotals sums;
  std::size_t samples = 0;
};

}  // namespace

StudentRun train_student(const Dataset& data, const RunConfig& cfg, Ablation ablation,
                         const std::vector<SelectionResult>* selections, const std::string& out_dir,
                         const std::function<void(const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  if (data.train.empty()) throw DataError("train_student: empty training split");
  const auto& mc = cfg.model;
  const LossWeights w = ablation_weights(ablation, cfg.loss_weights);
  const bool rehearses = w.recollection > 0 || w.familiarity > 0;
  const bool uses_cache = ablation == Ablation::Full || ablation == Ablation::OnlyRec || ablation == Ablation::OnlyFam;
  const int B = cfg.rehearsal.fragments;
  const std::uint64_t seed = cfg.training.seed;

  std::vector<std::vector<int>> chosen;
  if (rehearses) {
    chosen.resize(data.train.size());
    for (std::size_t i = 0; i < data.train.size(); ++i) {
      const int count = fragment_count(data.train[i].stream.size(), mc.segment);
      if (uses_cache) {
        if (!selections || selections->size() != data.train.size())
          throw DataError("train_student: selection cache must hold one row per training sample (" +
                          std::to_string(data.train.size()) + ")");
        const auto& row = (*selections)[i];
        if (row.sample_index != static_cast<std::int64_t>(i) || static_cast<int>(row.fragments.size()) != B)
          throw DataError("train_student: selection cache row " + std::to_string(i) + " does not match the dataset");
        for (int c : row.fragments)
          if (c < 0 || c >= count) throw DataError("train_student: selection cache row " + std::to_string(i) +
                                                   " names fragment " + std::to_string(c));
        chosen[i] = row.fragments;
      } else {
        chosen[i] = random_selection(static_cast<std::int64_t>(i), count, B, seed);
      }
    }
  }

  StudentRun run;
  run.params = make_student_params(mc, seed);
  std::ofstream metrics_out;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metrics_out.open(out_dir + "/metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics_out) throw DataError("cannot write " + out_dir + "/metrics.jsonl");
  }

  auto run_batches = [&](const std::vector<std::size_t>& order, int epoch, bool update) {
    BatchOutcome acc;
    const auto bs = static_cast<std::size_t>(cfg.training.batch_size);
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t e = std::min(order.size(), b + bs);
      std::vector<const std::vector<int>*> streams;
      std::vector<int> queries, answers;
      std::vector<std::vector<int>> sel;
      for (std::size_t i = b; i < e; ++i) {
        const auto& s = data.train[order[i]];
        streams.push_back(&s.stream);
        queries.push_back(s.query);
        answers.push_back(s.answer);
        if (rehearses) sel.push_back(chosen[order[i]]);
      }
      std::optional<FragmentBatch> plan;
      if (rehearses) {
        Rng rng = Rng(seed).fork({0xB47CULL, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b / bs)});
        plan = build_fragment_batch(streams, sel, mc.segment, cfg.rehearsal, mc.items, rng);
      }
      Graph<float> g;
      Binder<float> p(g, run.params.values());
      auto losses = student_forward(p, mc, streams, queries, answers, plan ? &*plan : nullptr, w);
      const double total = losses.total.value()(0, 0);
      if (!std::isfinite(total))
        throw NumericError("train_student: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b / bs));
      const auto n = static_cast<double>(e - b);
      acc.sums.total += total * n;
      acc.sums.reason += static_cast<double>(losses.reason.value()(0, 0)) * n;
      if (losses.recollection)
        acc.sums.recollection = acc.sums.recollection.value_or(0.0) + losses.recollection->value()(0, 0) * n;
      if (losses.familiarity)
        acc.sums.familiarity = acc.sums.familiarity.value_or(0.0) + losses.familiarity->value()(0, 0) * n;
      acc.samples += e - b;
      if (update) {
        g.backward(losses.total);
        run.params.adam_step(g.param_grads(run.params.values()), cfg.optimizer);
      }
    }
    const auto n = static_cast<double>(std::max<std::size_t>(acc.samples, 1));
    LossTotals mean;
    mean.total = acc.sums.total / n;
    mean.reason = acc.sums.reason / n;
    if (acc.sums.recollection) mean.recollection = *acc.sums.recollection / n;
    if (acc.sums.familiarity) mean.familiarity = *acc.sums.familiarity / n;
    return mean;
  };

  auto finish_epoch = [&](int epoch, const LossTotals& train) {
    EpochMetrics m;
    m.epoch = epoch;
    m.train = train;
    m.val = evaluate_student(run.params, mc, data.val).accuracy;
    m.test = evaluate_student(run.params, mc, data.test).accuracy;
    if (metrics_out.is_open()) {
      metrics_out << to_json(m, ablation, w).dump() << '\n';
      metrics_out.flush();
    }
    if (!out_dir.empty() && epoch > 0) {
      const auto named = to_named(run.params, student_meta(cfg, ablation, epoch));
      write_checkpoint(out_dir + "/student_epoch" + std::to_string(epoch) + ".ckpt", named);
      write_checkpoint(out_dir + "/student.ckpt", named);
    }
    run.metrics.push_back(m);
    if (on_epoch) on_epoch(m);
  };

  {
    std::vector<std::size_t> probe(std::min<std::size_t>(data.train.size(),
                                                         static_cast<std::size_t>(cfg.training.probe_samples)));
    std::iota(probe.begin(), probe.end(), 0);
    finish_epoch(0, run_batches(probe, 0, false));
  }
  std::vector<std::size_t> order(data.train.size());
  for (int epoch = 1; epoch <= cfg.training.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng(seed).fork({0x0D3EULL, static_cast<std::uint64_t>(epoch)}).shuffle(order);
    finish_epoch(epoch, run_batches(order, epoch, true));
  }
  return run;
}

#define RM_INSTANTIATE(S)                                                                                     \
  template StudentLosses<S> student_forward(const Binder<S>&, const ModelConfig&,                            \
                                            const std::vector<const std::vector<int>*>&, const std::vector<int>&, \
                                            const std::vector<int>&, const FragmentBatch*, const LossWeights&);

RM_INSTANTIATE(float)
RM_INSTANTIATE(double)

#undef RM_INSTANTIATE

}  // namespace rm
