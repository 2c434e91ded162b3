#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "s4d/tensor.hpp"

// Central finite-difference gradient checking, run in double. The check never
// calls backward() on the perturbed evaluations, so it is independent of the
// analytic path it verifies: each probe rebuilds the forward pass from scratch
// with one leaf entry nudged by +/-h.

namespace s4d {

struct FdLeaf {
  Shape shape;
  std::vector<double> value;
};

// Builds a scalar loss from graph-bound leaves (same order as the FdLeaf list).
using FdBuild = std::function<Tensor<double>(Graph<double>&, const std::vector<Tensor<double>>&)>;

struct FdReport {
  double max_rel_err = 0.0;
  int64_t n_checked = 0;
  int worst_leaf = -1;
  int64_t worst_entry = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct FdOptions {
  double step = 1e-3;
  // Entries checked per leaf; 0 means all. Sampling is deterministic (evenly
  // strided), for leaves too large to probe exhaustively.
  int64_t max_entries_per_leaf = 0;
};

namespace detail {

inline double fd_eval(const std::vector<FdLeaf>& leaves, const FdBuild& build) {
  Graph<double> g;
  std::vector<Tensor<double>> ts;
  ts.reserve(leaves.size());
  for (const auto& l : leaves) ts.push_back(g.leaf(l.shape, l.value, true));
  return build(g, ts).item();
}

}  // namespace detail

inline FdReport fd_check(std::vector<FdLeaf> leaves, const FdBuild& build, const FdOptions& opt = {}) {
  // Analytic gradients once, on the unperturbed point.
  std::vector<std::vector<double>> analytic;
  {
    Graph<double> g;
    std::vector<Tensor<double>> ts;
    for (const auto& l : leaves) ts.push_back(g.leaf(l.shape, l.value, true));
    Tensor<double> loss = build(g, ts);
    g.backward(loss);
    for (const auto& t : ts) analytic.emplace_back(t.grad().begin(), t.grad().end());
  }

  FdReport rep;
  const double h = opt.step;
  for (size_t li = 0; li < leaves.size(); ++li) {
    const int64_t n = (int64_t)leaves[li].value.size();
    int64_t stride = 1;
    if (opt.max_entries_per_leaf > 0 && n > opt.max_entries_per_leaf)
      stride = (n + opt.max_entries_per_leaf - 1) / opt.max_entries_per_leaf;
    for (int64_t e = 0; e < n; e += stride) {
      const double orig = leaves[li].value[e];
      leaves[li].value[e] = orig + h;
      const double lp = detail::fd_eval(leaves, build);
      leaves[li].value[e] = orig - h;
      const double lm = detail::fd_eval(leaves, build);
      leaves[li].value[e] = orig;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[li][e];
      // Truncation error of the h=1e-3 stencil puts a floor on meaningful
      // relative comparisons for near-zero gradients.
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-2});
      const double rel = std::abs(a - numeric) / denom;
      ++rep.n_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_leaf = (int)li;
        rep.worst_entry = e;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace s4d
