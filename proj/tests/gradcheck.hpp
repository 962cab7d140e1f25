#pragma once

#include "rm/autodiff.hpp"
#include "rm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace rm::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  int coordinates = 0;
  std::string worst;
};

inline double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

template <typename F>
double eval_loss(const ParamTable<double>& table, F&& f) {
  Graph<double> g;
  Binder<double> p(g, table);
  return f(p).value()(0, 0);
}

/// Central differences on `coords` randomly chosen parameter entries.
template <typename F>
GradCheck gradcheck(ParamTable<double> table, F&& f, int coords, std::uint64_t seed, double eps = 1e-5) {
  ParamTable<double> analytic;
  {
    Graph<double> g;
    Binder<double> p(g, table);
    auto loss = f(p);
    g.backward(loss);
    analytic = g.param_grads(table);
  }
  std::vector<std::string> names;
  Index total = 0;
  for (const auto& [n, v] : table) {
    names.push_back(n);
    total += v.size();
  }
  Rng rng(seed);
  GradCheck out;
  for (int c = 0; c < coords; ++c) {
    auto pick = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(total)));
    std::string name;
    for (const auto& n : names) {
      if (pick < table.at(n).size()) {
        name = n;
        break;
      }
      pick -= table.at(n).size();
    }
    auto& entry = table.at(name).data()[pick];
    const double saved = entry;
    entry = saved + eps;
    const double up = eval_loss(table, f);
    entry = saved - eps;
    const double down = eval_loss(table, f);
    entry = saved;
    const double numeric = (up - down) / (2 * eps);
    const double a = analytic.at(name).data()[pick];
    const double e = rel_error(a, numeric);
    if (e > out.max_rel_error) {
      out.max_rel_error = e;
      out.worst = name + "[" + std::to_string(pick) + "] analytic " + std::to_string(a) + " numeric " +
                  std::to_string(numeric);
    }
    ++out.coordinates;
  }
  return out;
}

inline Matrix<double> random_matrix(Index r, Index c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

}  // namespace rm::testing
