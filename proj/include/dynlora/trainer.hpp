// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Fine-tuning of expert factors and the pre-gate router with the backbone
// frozen. The forward is the pre-gated unmerged path (identical arithmetic to
// ExecMode::PreGatedNaive); the backward is hand-derived reverse mode with
// the top-k selection held fixed.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dynlora/gating.hpp"
#include "dynlora/model.hpp"

namespace dynlora {

struct SyntheticClasses {
  int n_classes = 2;
  int tokens_per_class = 16;
};

struct TrainConfig {
  int steps = 2000;
  int batch_size = 8;
  double learning_rate = 3e-4;
  std::uint64_t seed = 0;
  SyntheticClasses task;

  void validate(const ModelConfig& model) const;
};

/// Class c owns input tokens [c*T, (c+1)*T) with T = tokens_per_class. Each
/// class maps its tokens through a fixed seeded permutation of the same range.
class SyntheticTask {
 public:
  SyntheticTask(const SyntheticClasses& classes, int vocab, std::uint64_t seed);

  int n_classes() const { return spec_.n_classes; }
  int class_of(int token) const;
  int label(int token) const;
  const std::vector<int>& tokens() const { return tokens_; }
  std::vector<int> class_tokens(int c) const;

 private:
  SyntheticClasses spec_;
  std::vector<int> tokens_;
  std::vector<int> labels_;
};

struct ForwardCache {
  const Model* model = nullptr;
  std::uint64_t revision = 0;
  int token = 0;
  Matrix x1;
  Matrix router_logits;
  GatingDecision decision;
  std::vector<BlockTrace> blocks;
};

struct TrainForward {
  Matrix logits;
  ForwardCache cache;
};

/// Pre-gated forward of one token; logits are bit-identical to a
/// PreGatedNaive decode of the same token.
TrainForward forward_train(const Model& model, int token);

struct ExpertGrad {
  Matrix down;
  Matrix up;
};

struct Gradients {
  /// [adapted site index][expert]
  std::vector<std::vector<ExpertGrad>> experts;
  Matrix router;

  static Gradients zeros(const Model& model);
  Gradients& operator+=(const Gradients& other);
  Gradients& operator*=(double s);
};

/// Gradients of the loss whose logit gradient is `grad_logits`, for every
/// expert factor and the router. Throws StateError when the cache no longer
/// matches the model.
Gradients backward(const Model& model, const ForwardCache& cache, const Matrix& grad_logits);

/// Softmax cross-entropy; fills `grad` with d loss / d logits when given.
double cross_entropy(const Matrix& logits, int label, Matrix* grad = nullptr);

/// Mean cross-entropy over `tokens` against the task labels.
double task_loss(const Model& model, const SyntheticTask& task, const std::vector<int>& tokens);

/// params <- params - lr * grads. Bumps model.revision.
void apply_gradients(Model& model, const Gradients& grads, double learning_rate);

struct TrainReport {
  int top_k = 0;
  std::string routing_tag;          // "Top-1", "Top-2", ...
  std::vector<double> loss_curve;   // full-task loss before each step, then final
  /// [class][expert] fraction of the class's tokens whose highest-weighted
  /// expert is that expert.
  std::vector<std::vector<double>> routing_histogram;
  std::vector<int> dominant_expert;
  std::vector<double> dominant_share;

  double initial_loss() const { return loss_curve.front(); }
  double final_loss() const { return loss_curve.back(); }
  std::string to_json() const;
};

/// Plain gradient descent on minibatches drawn from the synthetic task.
/// Backbone weights are never written.
TrainReport train(Model& model, const TrainConfig& config);

/// Routing statistics of the current model over the task's tokens.
void fill_routing(const Model& model, const SyntheticTask& task, TrainReport& report);

}  // namespace dynlora
