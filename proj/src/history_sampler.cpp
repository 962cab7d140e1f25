#include "rm/history_sampler.hpp"

#include "rm/reasoner.hpp"
#include "rm/rehearsal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>

namespace rm {

template <typename S>
Var<S> fragment_features(const Binder<S>& p, const ModelConfig& cfg, const std::vector<const std::vector<int>*>& streams,
                         int fragments) {
  const Index n = cfg.segment;
  std::vector<Index> rows;
  rows.reserve(streams.size() * static_cast<std::size_t>(fragments * n));
  Matrix<S> w = Matrix<S>::Zero(static_cast<Index>(streams.size()) * fragments * n, 1);
  Index r = 0;
  for (const auto* s : streams) {
    if (s->empty()) throw ShapeError("fragment_features: empty stream");
    if (fragment_count(s->size(), n) != fragments)
      throw ShapeError("fragment_features: stream of " + std::to_string(s->size()) + " items does not have " +
                       std::to_string(fragments) + " fragments");
    for (int c = 0; c < fragments; ++c) {
      const auto begin = static_cast<std::size_t>(c * n);
      const auto valid = static_cast<Index>(std::min<std::size_t>(static_cast<std::size_t>(n), s->size() - begin));
      for (Index i = 0; i < n; ++i, ++r) {
        if (i < valid) {
          const int t = (*s)[begin + static_cast<std::size_t>(i)];
          if (t < 0 || t >= cfg.items) throw DataError("fragment_features: item id " + std::to_string(t) + " outside vocabulary");
          rows.push_back(t);
          w(r, 0) = S(1) / static_cast<S>(valid);
        } else {
          rows.push_back(-1);
        }
      }
    }
  }
  auto x = gather_rows(p("teacher.items"), rows);
  return grouped_weighted_sum(p.graph().constant(std::move(w)), x, n);
}

template <typename S>
Var<S> teacher_attend(const Binder<S>& p, Var<S> query, Var<S> fragments, int count, Matrix<S>* weights) {
  const Index groups = query.rows();
  if (fragments.rows() != groups * count)
    throw ShapeError("teacher_attend: " + std::to_string(groups) + " queries need " + std::to_string(groups * count) +
                     " fragment rows, got " + std::to_string(fragments.rows()));
  auto proj_q = query * p("teacher.attn.w1");
  auto proj_h = fragments * p("teacher.attn.w2") + p("teacher.attn.b");
  auto scores = reshape(additive_scores(proj_q, proj_h, p("teacher.attn.w"), 1, count), groups, count);
  auto beta = softmax_rows(scores);
  if (weights) *weights = beta.value();
  return grouped_weighted_sum(reshape(beta, groups * count, 1), fragments, count);
}

template <typename S>
Var<S> teacher_forward(const Binder<S>& p, const ModelConfig& cfg, const std::vector<const std::vector<int>*>& streams,
                       const std::vector<int>& queries, Matrix<S>* weights) {
  if (streams.empty() || streams.size() != queries.size())
    throw ShapeError("teacher_forward: one query per stream required");
  std::vector<Index> qrows(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (queries[i] < 0 || queries[i] >= cfg.queries)
      throw DataError("teacher_forward: query id " + std::to_string(queries[i]) + " out of range");
    qrows[i] = queries[i];
  }
  const int count = fragment_count(streams.front()->size(), cfg.segment);
  auto q = gather_rows(p("teacher.query"), qrows);
  auto h = fragment_features(p, cfg, streams, count);
  auto e = teacher_attend(p, q, h, count, weights);
  return linear(p, "teacher.head", concat_cols<S>({e, q}));
}

SelectionResult select_fragments(const std::vector<float>& weights, int fragments_to_pick) {
  const int count = static_cast<int>(weights.size());
  if (fragments_to_pick <= 0 || fragments_to_pick % 2 != 0)
    throw ConfigError("select_fragments: B must be a positive even number");
  if (count < fragments_to_pick)
    throw ConfigError("select_fragments: " + std::to_string(count) + " fragments cannot supply B = " +
                      std::to_string(fragments_to_pick));
  const int half = count / 2;
  const int per_half = fragments_to_pick / 2;
  SelectionResult out;
  out.weights = weights;
  auto pick = [&](int lo, int hi) {
    std::vector<int> idx(static_cast<std::size_t>(hi - lo));
    std::iota(idx.begin(), idx.end(), lo);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return weights[static_cast<std::size_t>(a)] > weights[static_cast<std::size_t>(b)];
    });
    idx.resize(static_cast<std::size_t>(per_half));
    std::sort(idx.begin(), idx.end());
    out.fragments.insert(out.fragments.end(), idx.begin(), idx.end());
  };
  pick(0, half);
  pick(half, count);
  return out;
}

bool fragment_holds_evidence(const Sample& s, int fragment, Index segment, int evidence_length) {
  const Index lo = fragment * segment, hi = lo + segment;
  return lo < s.evidence_start + evidence_length && s.evidence_start < hi;
}

namespace {

std::vector<const std::vector<int>*> stream_ptrs(const std::vector<Sample>& samples, std::size_t begin,
                                                 std::size_t end, const std::vector<std::size_t>* order = nullptr) {
  std::vector<const std::vector<int>*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&samples[order ? (*order)[i] : i].stream);
  return out;
}

int top_index(const float* w, Index n) {
  Index best = 0;
  for (Index c = 1; c < n; ++c)
    if (w[c] > w[best]) best = c;
  return static_cast<int>(best);
}

}  // namespace

TeacherEval evaluate_teacher(const ParameterStore& teacher, const ModelConfig& cfg, const std::vector<Sample>& samples,
                             int evidence_length, int batch_size) {
  TeacherEval out;
  if (samples.empty()) return out;
  std::size_t correct = 0, hits = 0;
  double loss = 0.0;
  for (std::size_t b = 0; b < samples.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(samples.size(), b + static_cast<std::size_t>(batch_size));
    std::vector<int> queries, answers;
    for (std::size_t i = b; i < e; ++i) {
      queries.push_back(samples[i].query);
      answers.push_back(samples[i].answer);
    }
    Graph<float> g;
    Binder<float> p(g, teacher.values());
    Matrix<float> beta;
    auto logits = teacher_forward(p, cfg, stream_ptrs(samples, b, e), queries, &beta);
    loss += static_cast<double>(reason_loss(logits, answers).value()(0, 0)) * static_cast<double>(e - b);
    const auto pred = argmax_rows(logits.value());
    for (std::size_t i = b; i < e; ++i) {
      const auto row = static_cast<Index>(i - b);
      correct += pred[static_cast<std::size_t>(row)] == samples[i].answer;
      const int top = top_index(beta.row(row).data(), beta.cols());
      hits += fragment_holds_evidence(samples[i], top, cfg.segment, evidence_length);
      out.weights.emplace_back(beta.row(row).data(), beta.row(row).data() + beta.cols());
    }
  }
  const auto n = static_cast<double>(samples.size());
  out.loss = loss / n;
  out.accuracy = static_cast<double>(correct) / n;
  out.evidence_top1 = static_cast<double>(hits) / n;
  return out;
}

ParameterStore train_teacher(const Dataset& data, const ModelConfig& cfg, const TeacherTrainConfig& tc,
                             const std::function<void(const TeacherEpoch&)>& on_epoch) {
  if (data.train.empty()) throw DataError("train_teacher: empty training split");
  if (tc.batch_size <= 0) throw ConfigError("training.batch_size: must be positive");
  ParameterStore teacher = make_teacher_params(cfg, tc.seed);
  std::optional<ParameterStore> best;
  double best_accuracy = 0.0;
  std::vector<std::size_t> order(data.train.size());
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng(tc.seed).fork({0x7EAC4E2ULL, static_cast<std::uint64_t>(epoch)}).shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(tc.batch_size));
      std::vector<int> queries, answers;
      for (std::size_t i = b; i < e; ++i) {
        queries.push_back(data.train[order[i]].query);
        answers.push_back(data.train[order[i]].answer);
      }
      Graph<float> g;
      Binder<float> p(g, teacher.values());
      auto logits = teacher_forward(p, cfg, stream_ptrs(data.train, b, e, &order), queries);
      auto loss = reason_loss(logits, answers);
      const float value = loss.value()(0, 0);
      if (!std::isfinite(value))
        throw NumericError("train_teacher: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b / static_cast<std::size_t>(tc.batch_size)));
      loss_sum += static_cast<double>(value) * static_cast<double>(e - b);
      const auto pred = argmax_rows(logits.value());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == answers[i];
      g.backward(loss);
      teacher.adam_step(g.param_grads(teacher.values()), tc.adam);
    }
    TeacherEpoch rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    if (!data.val.empty()) {
      const auto val = evaluate_teacher(teacher, cfg, data.val, data.config.evidence_length);
      rec.val_accuracy = val.accuracy;
      rec.evidence_top1 = val.evidence_top1;
      if (tc.keep_best && (!best || val.accuracy > best_accuracy)) {
        best = teacher;
        best_accuracy = val.accuracy;
      }
    }
    if (on_epoch) on_epoch(rec);
  }
  return best ? std::move(*best) : teacher;
}

std::vector<SelectionResult> compute_selections(const ParameterStore& teacher, const ModelConfig& cfg,
                                                const std::vector<Sample>& samples, int fragments_to_pick) {
  const auto eval = evaluate_teacher(teacher, cfg, samples, 1);
  std::vector<SelectionResult> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto sel = select_fragments(eval.weights[i], fragments_to_pick);
    sel.sample_index = static_cast<std::int64_t>(i);
    out.push_back(std::move(sel));
  }
  return out;
}

void write_selection_cache(const std::vector<SelectionResult>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write selection cache " + path);
  for (const auto& r : rows) {
    nlohmann::ordered_json j{{"sample_index", r.sample_index}, {"fragments", r.fragments}, {"weights", r.weights}};
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("write failed for " + path);
}

std::vector<SelectionResult> read_selection_cache(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open selection cache " + path);
  std::vector<SelectionResult> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SelectionResult r;
      r.sample_index = j.at("sample_index").get<std::int64_t>();
      r.fragments = j.at("fragments").get<std::vector<int>>();
      r.weights = j.at("weights").get<std::vector<float>>();
      rows.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

#define RM_INSTANTIATE(S)                                                                                          \
  template Var<S> fragment_features(const Binder<S>&, const ModelConfig&, const std::vector<const std::vector<int>*>&, \
                                    int);                                                                          \
  template Var<S> teacher_attend(const Binder<S>&, Var<S>, Var<S>, int, Matrix<S>*);                               \
  template Var<S> teacher_forward(const Binder<S>&, const ModelConfig&, const std::vector<const std::vector<int>*>&, \
                                  const std::vector<int>&, Matrix<S>*);

RM_INSTANTIATE(float)
RM_INSTANTIATE(double)

#undef RM_INSTANTIATE

}  // namespace rm
