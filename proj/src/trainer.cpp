// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include "dynlora/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dynlora/engine.hpp"

namespace dynlora {

void TrainConfig::validate(const ModelConfig& model) const {
  std::vector<std::string> problems;
  if (steps < 0) problems.push_back("steps must be >= 0");
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    problems.push_back("learning_rate must be finite and >= 0");
  }
  if (task.n_classes < 1) problems.push_back("n_classes must be >= 1");
  if (task.tokens_per_class < 1) problems.push_back("tokens_per_class must be >= 1");
  if (task.n_classes > model.n_experts) {
    problems.push_back("n_classes=" + std::to_string(task.n_classes) + " exceeds n_experts=" +
                       std::to_string(model.n_experts));
  }
  if (static_cast<long>(task.n_classes) * task.tokens_per_class > model.vocab) {
    problems.push_back("n_classes * tokens_per_class exceeds vocab");
  }
  if (model.routing != RoutingPolicy::PreGated) problems.push_back("model routing must be PreGated");
  if (!problems.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

SyntheticTask::SyntheticTask(const SyntheticClasses& classes, int vocab, std::uint64_t seed) : spec_(classes) {
  const int t = classes.tokens_per_class;
  if (classes.n_classes < 1 || t < 1 || classes.n_classes * t > vocab) {
    throw ConfigError("synthetic task does not fit in vocab " + std::to_string(vocab));
  }
  std::mt19937_64 rng(seed ^ 0x5eed7a5cULL);
  for (int c = 0; c < classes.n_classes; ++c) {
    std::vector<int> perm(t);
    std::iota(perm.begin(), perm.end(), c * t);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int i = 0; i < t; ++i) {
      tokens_.push_back(c * t + i);
      labels_.push_back(perm[i]);
    }
  }
}

int SyntheticTask::class_of(int token) const {
  if (token < 0 || token >= static_cast<int>(tokens_.size())) {
    throw Error("token " + std::to_string(token) + " is not part of the synthetic task");
  }
  return token / spec_.tokens_per_class;
}

int SyntheticTask::label(int token) const {
  class_of(token);
  return labels_[token];
}

std::vector<int> SyntheticTask::class_tokens(int c) const {
  std::vector<int> out(spec_.tokens_per_class);
  std::iota(out.begin(), out.end(), c * spec_.tokens_per_class);
  return out;
}

// ---------------------------------------------------------------------------

TrainForward forward_train(const Model& model, int token) {
  if (model.config.routing != RoutingPolicy::PreGated) {
    throw StateError("forward_train: model routing must be PreGated");
  }
  const double scale = model.config.lora_scale();
  const int first = model.first_adapted_site_id();
  TrainForward out;
  ForwardCache& cache = out.cache;
  cache.model = &model;
  cache.revision = model.revision;
  cache.token = token;
  bool gated = false;

  Matrix x = embed(model, token);
  cache.blocks.resize(model.blocks.size());
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    auto eval = [&](const AdapterSite& site, const Matrix& in) {
      if (site.site_id == first && !gated) {
        cache.x1 = in;
        cache.router_logits = matmul(model.routers.at(0).w_g, in);
        cache.decision = pre_gate(model, in, 0);
        gated = true;
      }
      return adapter_site_forward(site, in, gated ? &cache.decision : nullptr, scale, nullptr);
    };
    x = block_forward(model.blocks[b], x, eval, &cache.blocks[b]);
  }
  out.logits = matmul(model.head, x);
  return out;
}

Gradients Gradients::zeros(const Model& model) {
  Gradients g;
  for (int id : model.adapted_site_ids()) {
    const auto& site = model.site(id);
    std::vector<ExpertGrad> per;
    for (const auto& e : site.experts) {
      per.push_back({Matrix::Zero(e.down.rows(), e.down.cols()), Matrix::Zero(e.up.rows(), e.up.cols())});
    }
    g.experts.push_back(std::move(per));
  }
  const auto& w = model.routers.at(0).w_g;
  g.router = Matrix::Zero(w.rows(), w.cols());
  return g;
}

Gradients& Gradients::operator+=(const Gradients& o) {
  for (std::size_t s = 0; s < experts.size(); ++s) {
    for (std::size_t e = 0; e < experts[s].size(); ++e) {
      experts[s][e].down += o.experts[s][e].down;
      experts[s][e].up += o.experts[s][e].up;
    }
  }
  router += o.router;
  return *this;
}

Gradients& Gradients::operator*=(double s) {
  for (auto& per : experts) {
    for (auto& e : per) {
      e.down *= s;
      e.up *= s;
    }
  }
  router *= s;
  return *this;
}

namespace {

// Reverse of adapter_site_forward. Accumulates expert gradients into `grads`
// and d loss / d gate weight into `d_weights`; returns d loss / d input.
Matrix site_backward(const AdapterSite& site, const Matrix& x, const Matrix& dy,
                     const GatingDecision& d, double scale, std::vector<ExpertGrad>* grads,
                     std::vector<double>& d_weights) {
  Matrix dx = matmul(site.weight.transpose(), dy);
  if (!site.adapted) return dx;
  for (std::size_t j = 0; j < d.indices.size(); ++j) {
    const LoraExpert& e = site.experts[d.indices[j]];
    const double coeff = scale * d.weights[j];
    const Matrix low = matmul(e.down, x);              // r x 1
    const Matrix up_t_dy = matmul(e.up.transpose(), dy);  // r x 1
    const Matrix delta = matmul(e.up, low);            // d_out x 1
    d_weights[j] += scale * dy.cwiseProduct(delta).sum();
    ExpertGrad& g = (*grads)[d.indices[j]];
    g.up += coeff * matmul(dy, low.transpose());
    g.down += coeff * matmul(up_t_dy, x.transpose());
    dx += coeff * matmul(e.down.transpose(), up_t_dy);
  }
  return dx;
}

Matrix tanh_grad(const Matrix& activated, const Matrix& upstream) {
  return upstream.cwiseProduct((1.0 - activated.array().square()).matrix());
}

}  // namespace

Gradients backward(const Model& model, const ForwardCache& cache, const Matrix& grad_logits) {
  if (cache.model != &model || cache.revision != model.revision ||
      cache.blocks.size() != model.blocks.size()) {
    throw StateError("backward: stale forward cache");
  }
  const double scale = model.config.lora_scale();
  Gradients grads = Gradients::zeros(model);
  std::vector<double> d_weights(cache.decision.indices.size(), 0.0);

  auto site_grads = [&](const AdapterSite& s) -> std::vector<ExpertGrad>* {
    const int idx = model.adapted_index(s.site_id);
    return idx < 0 ? nullptr : &grads.experts[idx];
  };
  auto back = [&](const AdapterSite& s, const Matrix& in, const Matrix& dy) {
    return site_backward(s, in, dy, cache.decision, scale, site_grads(s), d_weights);
  };

  Matrix dy = matmul(model.head.transpose(), grad_logits);
  for (int b = static_cast<int>(model.blocks.size()) - 1; b >= 0; --b) {
    const Block& block = model.blocks[b];
    const BlockTrace& t = cache.blocks[b];
    Matrix dh = dy;
    const Matrix d_product = back(block.site(SiteKind::Down), t.product, dy);
    const Matrix d_gate_act = d_product.cwiseProduct(t.up_out);
    const Matrix d_up_out = d_product.cwiseProduct(t.gate_act);
    const Matrix d_gate_out = tanh_grad(t.gate_act, d_gate_act);
    dh += back(block.site(SiteKind::Gate), t.h, d_gate_out);
    dh += back(block.site(SiteKind::Up), t.h, d_up_out);
    Matrix dx = dh;
    const Matrix d_mixed = back(block.site(SiteKind::MixOut), t.mixed, dh);
    const Matrix d_mix_in_out = tanh_grad(t.mixed, d_mixed);
    dx += back(block.site(SiteKind::MixIn), t.x, d_mix_in_out);
    dy = std::move(dx);
  }

  // Renormalized softmax over the selected logits:
  //   dz_i = w_i * (dw_i - sum_j w_j dw_j); unselected rows get nothing.
  const auto& w = cache.decision.weights;
  double mean = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) mean += w[j] * d_weights[j];
  for (std::size_t j = 0; j < w.size(); ++j) {
    const double dz = w[j] * (d_weights[j] - mean);
    grads.router.row(cache.decision.indices[j]) += dz * cache.x1.transpose();
  }
  return grads;
}

double cross_entropy(const Matrix& logits, int label, Matrix* grad) {
  const double peak = logits.maxCoeff();
  const Matrix shifted = (logits.array() - peak).matrix();
  const Matrix ex = shifted.array().exp().matrix();
  const double total = ex.sum();
  if (grad != nullptr) {
    *grad = ex / total;
    (*grad)(label, 0) -= 1.0;
  }
  return std::log(total) - shifted(label, 0);
}

double task_loss(const Model& model, const SyntheticTask& task, const std::vector<int>& tokens) {
  double sum = 0.0;
  for (int tok : tokens) sum += cross_entropy(forward_train(model, tok).logits, task.label(tok));
  return sum / static_cast<double>(tokens.size());
}

void apply_gradients(Model& model, const Gradients& grads, double lr) {
  const auto ids = model.adapted_site_ids();
  for (std::size_t s = 0; s < ids.size(); ++s) {
    auto& site = model.site(ids[s]);
    for (std::size_t e = 0; e < site.experts.size(); ++e) {
      site.experts[e].down -= lr * grads.experts[s][e].down;
      site.experts[e].up -= lr * grads.experts[s][e].up;
    }
  }
  model.routers.at(0).w_g -= lr * grads.router;
  ++model.revision;
}

void fill_routing(const Model& model, const SyntheticTask& task, TrainReport& report) {
  const int n = model.config.n_experts;
  report.routing_histogram.assign(task.n_classes(), std::vector<double>(n, 0.0));
  report.dominant_expert.assign(task.n_classes(), 0);
  report.dominant_share.assign(task.n_classes(), 0.0);
  for (int c = 0; c < task.n_classes(); ++c) {
    const auto toks = task.class_tokens(c);
    for (int tok : toks) {
      const auto fwd = forward_train(model, tok);
      report.routing_histogram[c][fwd.cache.decision.indices.front()] += 1.0;
    }
    auto& h = report.routing_histogram[c];
    for (double& v : h) v /= static_cast<double>(toks.size());
    const auto best = std::max_element(h.begin(), h.end());
    report.dominant_expert[c] = static_cast<int>(best - h.begin());
    report.dominant_share[c] = *best;
  }
}

TrainReport train(Model& model, const TrainConfig& config) {
  config.validate(model.config);
  const SyntheticTask task(config.task, model.config.vocab, config.seed);
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, task.tokens().size() - 1);

  TrainReport report;
  report.top_k = model.config.top_k;
  report.routing_tag = "Top-" + std::to_string(model.config.top_k);
  report.loss_curve.reserve(static_cast<std::size_t>(config.steps) + 1);

  for (int step = 0; step < config.steps; ++step) {
    const double loss = task_loss(model, task, task.tokens());
    if (!std::isfinite(loss)) throw NumericError("training diverged at step " + std::to_string(step));
    report.loss_curve.push_back(loss);

    Gradients grads = Gradients::zeros(model);
    for (int i = 0; i < config.batch_size; ++i) {
      const int tok = task.tokens()[pick(rng)];
      const TrainForward fwd = forward_train(model, tok);
      Matrix dlogits;
      cross_entropy(fwd.logits, task.label(tok), &dlogits);
      grads += backward(model, fwd.cache, dlogits);
    }
    grads *= 1.0 / config.batch_size;
    if (config.learning_rate != 0.0) apply_gradients(model, grads, config.learning_rate);
  }
  const double final_loss = task_loss(model, task, task.tokens());
  if (!std::isfinite(final_loss)) {
    throw NumericError("training diverged at step " + std::to_string(config.steps));
  }
  report.loss_curve.push_back(final_loss);
  fill_routing(model, task, report);
  return report;
}

std::string TrainReport::to_json() const {
  nlohmann::json j;
  j["top_k"] = top_k;
  j["routing_tag"] = routing_tag;
  j["initial_loss"] = loss_curve.empty() ? 0.0 : initial_loss();
  j["final_loss"] = loss_curve.empty() ? 0.0 : final_loss();
  j["loss"] = loss_curve;
  j["routing_histogram"] = routing_histogram;
  j["dominant_expert"] = dominant_expert;
  j["dominant_share"] = dominant_share;
  return j.dump(2) + "\n";
}

}  // namespace dynlora
