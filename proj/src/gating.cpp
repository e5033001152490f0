// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include "dynlora/gating.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dynlora {

bool GatingDecision::same_selection(const GatingDecision& other) const {
  return indices == other.indices && weights == other.weights;
}

std::vector<int> top_k_indices(const Matrix& logits, int k) {
  const int n = static_cast<int>(logits.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits.data()[a] > logits.data()[b]; });
  order.resize(k);
  return order;
}

std::vector<double> masked_softmax(const Matrix& logits, const std::vector<int>& selected) {
  std::vector<double> w(selected.size());
  if (selected.empty()) return w;
  double peak = logits.data()[selected[0]];
  for (int i : selected) peak = std::max(peak, logits.data()[i]);
  double total = 0.0;
  for (std::size_t j = 0; j < selected.size(); ++j) {
    w[j] = std::exp(logits.data()[selected[j]] - peak);
    total += w[j];
  }
  for (double& v : w) v /= total;
  return w;
}

GatingDecision gate(const Router& router, const Matrix& x, int k, int token_step) {
  const int n = static_cast<int>(router.w_g.rows());
  if (k < 1 || k > n) {
    throw ConfigError("gate: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  const Matrix logits = matmul(router.w_g, x);
  if (!all_finite(logits)) throw NumericError("gate: non-finite router logits");
  GatingDecision d;
  d.indices = top_k_indices(logits, k);
  d.weights = masked_softmax(logits, d.indices);
  d.token_step = token_step;
  return d;
}

GatingDecision pre_gate(const Model& model, const Matrix& x1, int token_step) {
  if (model.config.routing != RoutingPolicy::PreGated) {
    throw StateError("pre_gate: model routing is " + std::string(to_string(model.config.routing)) +
                     ", not PreGated");
  }
  return gate(model.routers.at(0), x1, model.config.top_k, token_step);
}

}  // namespace dynlora
