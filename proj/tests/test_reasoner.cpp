#include "doctest.h"
#include "gradcheck.hpp"

#include "rm/reasoner.hpp"

#include <cmath>

using namespace rm;
using rm::testing::random_matrix;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.width = 8;
  c.slots = 3;
  c.segment = 4;
  c.heads = 2;
  c.items = 20;
  c.queries = 5;
  c.answers = 3;
  return c;
}

}  // namespace

TEST_CASE("encode_query: row lookup, distinct rows, range check") {
  auto cfg = small_config();
  auto t = make_student_params(cfg, 1).cast<double>();
  Graph<double> g;
  Binder<double> p(g, t);
  auto q = encode_query(p, cfg, {0, 1, 2, 3, 4}).value();
  CHECK(q == t.at("reason.query"));
  for (Index i = 0; i < 5; ++i)
    for (Index j = i + 1; j < 5; ++j) CHECK((q.row(i) - q.row(j)).norm() > 1e-3);
  CHECK_THROWS_AS(encode_query(p, cfg, {5}), DataError);
  CHECK_THROWS_AS(encode_query(p, cfg, {-1}), DataError);
}

TEST_CASE("hop: one slot, identical slots and a 2-slot oracle") {
  auto cfg = small_config();
  auto t = make_student_params(cfg, 2).cast<double>();
  Rng brng(3);
  t.at("reason.hop.b") = random_matrix(1, cfg.width, brng, -0.5, 0.5);
  Rng rng(4);
  Matrix<double> q = random_matrix(1, cfg.width, rng);

  {
    Matrix<double> m = random_matrix(1, cfg.width, rng);
    Graph<double> g;
    Binder<double> p(g, t);
    Matrix<double> w;
    hop(p, g.constant(q), g.constant(m), 1, &w);
    CHECK(w(0, 0) == doctest::Approx(1.0));
  }
  {
    Matrix<double> m = random_matrix(1, cfg.width, rng).replicate(3, 1);
    Graph<double> g;
    Binder<double> p(g, t);
    Matrix<double> w;
    hop(p, g.constant(q), g.constant(m), 3, &w);
    CHECK((w.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-12);
  }
  {
    Matrix<double> m = random_matrix(2, cfg.width, rng);
    Graph<double> g;
    Binder<double> p(g, t);
    auto [e, next] = hop(p, g.constant(q), g.constant(m), 2);

    Matrix<double> pq = q * t.at("reason.hop.w1");
    Matrix<double> pm = (m * t.at("reason.hop.w2")).rowwise() + t.at("reason.hop.b").row(0);
    double s[2];
    for (Index k = 0; k < 2; ++k) {
      s[k] = 0;
      for (Index c = 0; c < cfg.width; ++c) s[k] += t.at("reason.hop.w")(0, c) * std::tanh(pq(0, c) + pm(k, c));
      s[k] = std::exp(s[k]);
    }
    Matrix<double> want_e = (s[0] * m.row(0) + s[1] * m.row(1)) / (s[0] + s[1]);
    Matrix<double> cat(1, 2 * cfg.width);
    cat << want_e, q;
    Matrix<double> want_q = cat * t.at("reason.hop.wq");
    CHECK((e.value() - want_e).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((next.value() - want_q).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("reason: logits per answer, chance at init, gradients") {
  auto cfg = small_config();
  auto t = make_student_params(cfg, 5).cast<double>();
  Rng rng(6);
  Matrix<double> mem = random_matrix(2 * cfg.slots, cfg.width, rng);
  Graph<double> g;
  Binder<double> p(g, t);
  auto logits = reason(p, cfg, g.constant(mem), {1, 4});
  CHECK(logits.rows() == 2);
  CHECK(logits.cols() == cfg.answers);
  CHECK(reason_loss(logits, {0, 2}).value()(0, 0) == doctest::Approx(std::log(3.0)));

  // Give the head weight so every reasoner parameter is reached.
  t.at("reason.head.w") = random_matrix(cfg.width, cfg.answers, rng);
  auto r = rm::testing::gradcheck(
      t,
      [&](const Binder<double>& q) {
        return reason_loss(reason(q, cfg, q.graph().constant(mem), {1, 4}), {0, 2});
      },
      60, 7);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("reason_loss: limits and a scalar value") {
  Graph<double> g;
  Matrix<double> l(1, 3);
  l << 1, 0, 0;
  CHECK(reason_loss(g.constant(l), {0}).value()(0, 0) == doctest::Approx(0.5514).epsilon(1e-4));
  CHECK(reason_loss(g.constant(Matrix<double>::Zero(2, 4)), {1, 3}).value()(0, 0) == doctest::Approx(std::log(4.0)));
  Matrix<double> sure(1, 3);
  sure << 60, 0, 0;
  CHECK(reason_loss(g.constant(sure), {0}).value()(0, 0) < 1e-12);
  CHECK_THROWS_AS(reason_loss(g.constant(l), {3}), DataError);
}

TEST_CASE("combined_loss: weighted sum and ablation weights") {
  LossWeights w{1.0, 0.5, 1.0};
  CHECK(combined_loss(0.2, 0.4, 1.0, w) == doctest::Approx(1.4));
  CHECK(combined_loss(0.0, 0.0, 0.0, w) == 0.0);
  CHECK(combined_loss(3.0, 7.0, 0.8, LossWeights{0.0, 0.0, 1.0}) == doctest::Approx(0.8));

  Graph<double> g;
  auto c = [&](double v) { return g.constant(Matrix<double>::Constant(1, 1, v)); };
  CHECK(combined_loss(c(0.2), c(0.4), c(1.0), w).value()(0, 0) == doctest::Approx(1.4));
}

TEST_CASE("argmax_rows: lowest index wins ties") {
  Matrix<float> l(3, 3);
  l << 0, 2, 1, 1, 1, 1, -1, -2, 5;
  CHECK(argmax_rows(l) == std::vector<int>{1, 0, 2});
}
