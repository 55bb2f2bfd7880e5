#pragma once

// Test-side gradient checking: runs Graph::backward against the central
// finite-difference oracle and reports the worst relative error.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "l2t/autodiff.hpp"

namespace gc {

inline l2t::Tensor random_tensor(std::mt19937_64& rng, std::vector<int> shape,
                                 double scale = 1.0) {
  l2t::Tensor t = l2t::Tensor::zeros(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (double& v : t.data) v = dist(rng);
  return t;
}

inline double max_rel_err(const l2t::Tensor& got, const l2t::Tensor& want) {
  double worst = 0.0;
  for (size_t i = 0; i < got.data.size(); ++i) {
    double denom = std::max(
        {std::fabs(got.data[i]), std::fabs(want.data[i]), 1e-8});
    worst = std::max(worst, std::fabs(got.data[i] - want.data[i]) / denom);
  }
  return worst;
}

// Builds the loss twice (once for backward, once per finite-difference
// probe) and returns the worst relative error across all parameters.
inline double check(
    const std::function<l2t::NodeId(l2t::Graph&, std::vector<l2t::NodeId>&)>&
        build,
    std::vector<l2t::Tensor> params, double eps) {
  using namespace l2t;
  for (Tensor& p : params) p.requires_grad = true;
  Graph g;
  std::vector<NodeId> leaves;
  for (const Tensor& p : params) leaves.push_back(g.leaf(p));
  std::vector<NodeId> leaves_in = leaves;
  NodeId loss = build(g, leaves_in);
  GradMap grads = g.backward(loss);

  auto eval = [&](const std::vector<Tensor>& ps) {
    Graph g2;
    std::vector<NodeId> ls;
    for (const Tensor& p : ps) ls.push_back(g2.leaf(p));
    NodeId out = build(g2, ls);
    return g2.value(out).data[0];
  };
  std::vector<Tensor> fd = finite_diff_grad(eval, params, eps);
  double worst = 0.0;
  for (size_t i = 0; i < params.size(); ++i)
    worst = std::max(worst, max_rel_err(grads.at(leaves[i]), fd[i]));
  return worst;
}

}  // namespace gc
