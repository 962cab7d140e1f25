#include "doctest.h"
#include "gradcheck.hpp"

#include "rm/layers.hpp"

#include <cmath>
#include <vector>

using namespace rm;
using rm::testing::random_matrix;

namespace {

using Vec = std::vector<double>;

ParamTable<double> table_of(const ParameterStore& s) { return s.cast<double>(); }

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// x * W for a row vector and a (in x out) weight.
Vec row_times(const Vec& x, const Matrix<double>& w) {
  Vec out(static_cast<std::size_t>(w.cols()), 0.0);
  for (Index j = 0; j < w.cols(); ++j)
    for (Index i = 0; i < w.rows(); ++i) out[j] += x[i] * w(i, j);
  return out;
}

Vec row_of(const Matrix<double>& m, Index r) {
  Vec v(static_cast<std::size_t>(m.cols()));
  for (Index j = 0; j < m.cols(); ++j) v[j] = m(r, j);
  return v;
}

}  // namespace

TEST_CASE("softmax: symmetric, shift invariant and matches scalar values") {
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(3);
  auto u = softmax<double>(zero);
  for (int i = 0; i < 3; ++i) CHECK(u(i) == doctest::Approx(1.0 / 3.0));

  Eigen::VectorXd x(3);
  x << 1, 2, 3;
  auto s = softmax<double>(x);
  CHECK(s(0) == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(s(1) == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(s(2) == doctest::Approx(0.66524).epsilon(1e-4));
  auto shifted = softmax<double>((x.array() + 17.5).matrix());
  CHECK((shifted - s).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sinusoidal positions follow the sin/cos table") {
  auto pe = sinusoidal_positions<double>(5, 6);
  CHECK(pe.rows() == 5);
  CHECK(pe.cols() == 6);
  for (Index p = 0; p < 5; ++p)
    for (Index i = 0; i < 6; ++i) {
      const double rate = std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / 6.0);
      const double want = i % 2 == 0 ? std::sin(p / rate) : std::cos(p / rate);
      CHECK(pe(p, i) == doctest::Approx(want));
    }
}

TEST_CASE("gru_cell: zero parameters halve the state") {
  ParameterStore s;
  Rng rng(1);
  add_gru(s, "g", 3, 3, rng);
  for (const auto& n : s.names()) s.set(n, Matrix<float>::Zero(s.at(n).rows(), s.at(n).cols()));
  auto t = table_of(s);
  Graph<double> g;
  Binder<double> p(g, t);
  Rng data(2);
  Matrix<double> h = random_matrix(2, 3, data);
  auto out = gru_cell(p, "g", g.constant(h), g.constant(random_matrix(2, 3, data)));
  CHECK((out.value() - 0.5 * h).cwiseAbs().maxCoeff() < 1e-12);

  Graph<double> g2;
  Binder<double> p2(g2, t);
  auto still = gru_cell(p2, "g", g2.constant(Matrix<double>::Zero(1, 3)), g2.constant(Matrix<double>::Zero(1, 3)));
  CHECK(still.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gru_cell: random d=3 instance matches a scalar re-evaluation") {
  ParameterStore s;
  Rng rng(5);
  add_gru(s, "g", 3, 3, rng);
  Rng brng(6);
  for (const char* b : {"g.bz", "g.br", "g.bh"}) {
    Matrix<float> v(1, 3);
    for (Index i = 0; i < 3; ++i) v(0, i) = static_cast<float>(brng.uniform(-0.5, 0.5));
    s.set(b, v);
  }
  auto t = table_of(s);
  Rng data(7);
  Matrix<double> h = random_matrix(1, 3, data), x = random_matrix(1, 3, data);

  Graph<double> g;
  Binder<double> p(g, t);
  auto out = gru_cell(p, "g", g.constant(h), g.constant(x)).value();

  const Vec hv = row_of(h, 0), xv = row_of(x, 0);
  auto gate = [&](const char* w, const char* u, const char* b, const Vec& hin) {
    Vec a = row_times(xv, t.at(w)), c = row_times(hin, t.at(u));
    Vec out(3);
    for (int i = 0; i < 3; ++i) out[i] = a[i] + c[i] + t.at(b)(0, i);
    return out;
  };
  Vec z = gate("g.wz", "g.uz", "g.bz", hv), r = gate("g.wr", "g.ur", "g.br", hv);
  for (auto& v : z) v = sigm(v);
  for (auto& v : r) v = sigm(v);
  Vec rh(3);
  for (int i = 0; i < 3; ++i) rh[i] = r[i] * hv[i];
  Vec n = gate("g.wh", "g.uh", "g.bh", rh);
  for (int i = 0; i < 3; ++i) {
    const double want = (1 - z[i]) * hv[i] + z[i] * std::tanh(n[i]);
    CHECK(std::abs(out(0, i) - want) < 1e-5);
  }
}

TEST_CASE("multi_head_attention: single key, identical keys and a 2x2 oracle") {
  ParameterStore s;
  Rng rng(11);
  add_attention(s, "a", 4, rng);
  Rng brng(12);
  for (const char* b : {"a.q.b", "a.k.b", "a.v.b", "a.o.b"}) {
    Matrix<float> v(1, 4);
    for (Index i = 0; i < 4; ++i) v(0, i) = static_cast<float>(brng.uniform(-0.3, 0.3));
    s.set(b, v);
  }
  auto t = table_of(s);
  Rng data(13);

  SUBCASE("one key position returns the projected value for any query") {
    Matrix<double> kv = random_matrix(1, 4, data);
    AttentionLayout layout{2, 3, 1, {}, {}};
    Graph<double> g;
    Binder<double> p(g, t);
    auto out = multi_head_attention(p, "a", g.constant(random_matrix(3, 4, data)), g.constant(kv), g.constant(kv), layout)
                   .value();
    Matrix<double> v = (kv * t.at("a.v.w")).rowwise() + t.at("a.v.b").row(0);
    Matrix<double> want = (v * t.at("a.o.w")) + t.at("a.o.b");
    for (Index r = 0; r < 3; ++r) CHECK((out.row(r) - want.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("identical keys give uniform weights") {
    Matrix<double> k = random_matrix(1, 4, data).replicate(3, 1);
    AttentionLayout layout{2, 2, 3, {}, {}};
    Graph<double> g;
    Binder<double> p(g, t);
    std::vector<Matrix<double>> w;
    multi_head_attention(p, "a", g.constant(random_matrix(2, 4, data)), g.constant(k),
                         g.constant(random_matrix(3, 4, data)), layout, &w);
    REQUIRE(w.size() == 2);
    for (const auto& m : w) CHECK((m.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-12);
  }

  SUBCASE("2 queries by 2 keys against a scalar oracle") {
    const Index heads = 2, dh = 2;
    Matrix<double> q = random_matrix(2, 4, data), kv = random_matrix(2, 4, data);
    AttentionLayout layout{heads, 2, 2, {}, {}};
    Graph<double> g;
    Binder<double> p(g, t);
    auto out = multi_head_attention(p, "a", g.constant(q), g.constant(kv), g.constant(kv), layout).value();

    auto project = [&](const Matrix<double>& x, const std::string& n) -> Matrix<double> {
      Matrix<double> y(x.rows(), 4);
      for (Index r = 0; r < x.rows(); ++r) {
        Vec v = row_times(row_of(x, r), t.at(n + ".w"));
        for (Index j = 0; j < 4; ++j) y(r, j) = v[j] + t.at(n + ".b")(0, j);
      }
      return y;
    };
    Matrix<double> Q = project(q, "a.q"), K = project(kv, "a.k"), V = project(kv, "a.v");
    Matrix<double> ctx = Matrix<double>::Zero(2, 4);
    for (Index h = 0; h < heads; ++h)
      for (Index i = 0; i < 2; ++i) {
        double sc[2], z = 0;
        for (Index j = 0; j < 2; ++j) {
          double dot = 0;
          for (Index c = 0; c < dh; ++c) dot += Q(i, h * dh + c) * K(j, h * dh + c);
          sc[j] = std::exp(dot / std::sqrt(static_cast<double>(dh)));
          z += sc[j];
        }
        for (Index j = 0; j < 2; ++j)
          for (Index c = 0; c < dh; ++c) ctx(i, h * dh + c) += sc[j] / z * V(j, h * dh + c);
      }
    Matrix<double> want = project(ctx, "a.o");
    CHECK((out - want).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("transformer_encoder: shape, determinism and normalized outputs") {
  TransformerShape shape{8, 2, 2};
  ParameterStore s;
  Rng rng(21);
  add_encoder(s, "enc", shape, rng);
  auto t = table_of(s);
  Rng data(22);
  Matrix<double> x = random_matrix(3 * 5, 8, data);

  auto run = [&]() {
    Graph<double> g;
    Binder<double> p(g, t);
    return Matrix<double>(transformer_encoder(p, "enc", shape, g.constant(x), 5).value());
  };
  auto a = run(), b = run();
  CHECK(a.rows() == 15);
  CHECK(a.cols() == 8);
  CHECK(a == b);
  // The last layer norm has unit gain and zero bias at init, so outputs are standardized.
  for (Index r = 0; r < a.rows(); ++r) {
    const double mu = a.row(r).mean();
    const double var = (a.row(r).array() - mu).square().mean();
    CHECK(std::abs(mu) < 1e-4);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("transformer_decoder: shape, memory invariance and cross-attention rows") {
  TransformerShape shape{8, 2, 2};
  ParameterStore s;
  Rng rng(31);
  add_decoder(s, "dec", shape, rng);
  Rng data(32);
  Matrix<double> frag = random_matrix(2 * 4, 8, data);
  Matrix<double> mem_a = random_matrix(2 * 3, 8, data), mem_b = random_matrix(2 * 3, 8, data);

  auto run = [&](const ParamTable<double>& t, const Matrix<double>& mem, std::vector<Matrix<double>>* w = nullptr) {
    Graph<double> g;
    Binder<double> p(g, t);
    return Matrix<double>(
        transformer_decoder(p, "dec", shape, g.constant(frag), 4, g.constant(mem), 3, {}, {}, w).value());
  };

  auto t = table_of(s);
  std::vector<Matrix<double>> w;
  auto out = run(t, mem_a, &w);
  CHECK(out.rows() == 8);
  CHECK(out.cols() == 8);
  CHECK((out - run(t, mem_b)).cwiseAbs().maxCoeff() > 1e-6);
  REQUIRE(!w.empty());
  for (const auto& m : w)
    for (Index r = 0; r < m.rows(); ++r) CHECK(std::abs(m.row(r).sum() - 1.0) < 1e-6);

  for (Index l = 0; l < shape.layers; ++l) {
    const std::string pre = "dec.layer" + std::to_string(l) + ".cross.v.";
    t.at(pre + "w").setZero();
    t.at(pre + "b").setZero();
  }
  CHECK((run(t, mem_a) - run(t, mem_b)).cwiseAbs().maxCoeff() < 1e-12);
}
