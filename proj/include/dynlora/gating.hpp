// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "dynlora/model.hpp"

namespace dynlora {

/// Top-k expert selection for one token. Indices are ordered by descending
/// weight, ties by ascending index.
struct GatingDecision {
  std::vector<int> indices;
  std::vector<double> weights;
  int token_step = 0;

  int k() const { return static_cast<int>(indices.size()); }
  /// Same experts with bitwise-equal weights. token_step is not compared.
  bool same_selection(const GatingDecision& other) const;
};

/// Indices of the k largest logits, ties toward the lower index.
std::vector<int> top_k_indices(const Matrix& logits, int k);

/// Softmax over the selected logits only; unselected logits are treated as
/// -inf. Change this one function to switch masking conventions.
std::vector<double> masked_softmax(const Matrix& logits, const std::vector<int>& selected);

/// z = w_g x; select top-k; renormalized softmax over the selection.
GatingDecision gate(const Router& router, const Matrix& x, int k, int token_step);

/// The single token-wide decision of a pre-gated model, computed from the
/// input of its first adapted site. Every adapted site of every block uses it.
GatingDecision pre_gate(const Model& model, const Matrix& x1, int token_step);

}  // namespace dynlora
