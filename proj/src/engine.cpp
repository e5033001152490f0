// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include "dynlora/engine.hpp"

namespace dynlora {

RoutingPolicy routing_for(ExecMode mode) {
  switch (mode) {
    case ExecMode::NaivePerSite:
      return RoutingPolicy::PerSite;
    case ExecMode::NaivePerBlock:
      return RoutingPolicy::PerBlock;
    default:
      return RoutingPolicy::PreGated;
  }
}

Matrix adapter_site_forward(const AdapterSite& site, const Matrix& x, const GatingDecision* decision,
                            double scale, Profiler* profiler) {
  Matrix y = matmul(site.weight, x);
  if (profiler) profiler->record(DispatchKind::BackboneGemm, gemm_flops(site.d_out(), 1, site.d_in()), site.site_id);
  if (decision == nullptr || !site.adapted) return y;
  for (std::size_t j = 0; j < decision->indices.size(); ++j) {
    const LoraExpert& e = site.experts.at(decision->indices[j]);
    const Matrix low = matmul(e.down, x);
    if (profiler) profiler->record(DispatchKind::AdapterGemm, gemm_flops(e.down.rows(), 1, e.down.cols()), site.site_id);
    const Matrix delta = matmul(e.up, low);
    if (profiler) profiler->record(DispatchKind::AdapterGemm, gemm_flops(e.up.rows(), 1, e.up.cols()), site.site_id);
    const double coeff = scale * decision->weights[j];
    y += coeff * delta;
  }
  return y;
}

int argmax(const Matrix& logits) {
  int best = 0;
  for (Index i = 1; i < logits.size(); ++i)
    if (logits.data()[i] > logits.data()[best]) best = static_cast<int>(i);
  return best;
}

DecodeSession::DecodeSession(Model& model, ExecMode mode, SessionOptions options)
    : model_(model), mode_(mode), options_(options), profiler_(options.cost),
      scale_(model.config.lora_scale()) {
  model_.check_shapes();
  options_.tile.validate();
  profiler_.set_enabled(options_.profile);
  if (mode_ != ExecMode::BackboneOnly && model_.config.routing != routing_for(mode_)) {
    throw StateError(std::string(to_string(mode_)) + " needs " +
                     std::string(to_string(routing_for(mode_))) + " routers but the model is routed " +
                     std::string(to_string(model_.config.routing)));
  }
  if (!model_.adapted_site_ids().empty()) first_adapted_site_ = model_.first_adapted_site_id();
  state_.merged.assign(model_.adapted_site_ids().size(), false);
}

DecodeSession::~DecodeSession() {
  try {
    restore();
  } catch (...) {
  }
}

void DecodeSession::check_output(const Matrix& y, const AdapterSite& site) const {
  if (!all_finite(y)) {
    throw NumericError("non-finite activation at block " + std::to_string(site.site_id / kSitesPerBlock) +
                       " site " + std::string(site_name(site.kind)));
  }
}

Matrix DecodeSession::eval_site(const AdapterSite& site, const Matrix& x, ExecMode path, Phase phase,
                                int step, int block) {
  Profiler* prof = &profiler_;
  const auto& cfg = model_.config;

  // The pre-gate decision is taken when the token reaches its first adapted
  // site, before that site (or any later one) is evaluated.
  if (uses_pre_gate(path) && site.site_id == first_adapted_site_ && !token_decision_) {
    token_decision_ = pre_gate(model_, x, step);
    prof->record(DispatchKind::RouterGemm, gemm_flops(cfg.n_experts, 1, x.rows()), site.site_id);
    if (options_.record_trace) trace_.push_back({step, phase, x, *token_decision_});
    if (path == ExecMode::FusedSwitch) {
      switch_all(model_, state_, *token_decision_, prof, options_.tile);
    }
  }

  Matrix y;
  switch (path) {
    case ExecMode::BackboneOnly:
      y = adapter_site_forward(site, x, nullptr, scale_, prof);
      break;
    case ExecMode::NaivePerSite: {
      std::optional<GatingDecision> d;
      if (site.adapted) {
        const Router& router = model_.routers.at(model_.adapted_index(site.site_id));
        d = gate(router, x, cfg.top_k, step);
        prof->record(DispatchKind::RouterGemm, gemm_flops(cfg.n_experts, 1, x.rows()), site.site_id);
      }
      y = adapter_site_forward(site, x, d ? &*d : nullptr, scale_, prof);
      break;
    }
    case ExecMode::NaivePerBlock:
      y = adapter_site_forward(site, x, &block_decisions_.at(block), scale_, prof);
      break;
    case ExecMode::PreGatedNaive:
      y = adapter_site_forward(site, x, token_decision_ ? &*token_decision_ : nullptr, scale_, prof);
      break;
    case ExecMode::SimpleMerge: {
      if (site.adapted) {
        AdapterSite& live = model_.site(site.site_id);
        SiteSlices slices = build_concat(live, *token_decision_, scale_);
        merge(live, slices);
        prof->record(DispatchKind::MergeGemm, gemm_flops(live.d_out(), live.d_in(), slices.rank()), site.site_id);
        state_.merged.at(model_.adapted_index(site.site_id)) = true;
        merged_this_token_.emplace_back(site.site_id, std::move(slices));
      }
      y = adapter_site_forward(site, x, nullptr, scale_, prof);
      break;
    }
    case ExecMode::FusedSwitch:
      y = adapter_site_forward(site, x, nullptr, scale_, prof);
      break;
  }
  check_output(y, site);
  return y;
}

Matrix DecodeSession::forward(int token_id, ExecMode path, Phase phase, int step) {
  const auto& cfg = model_.config;
  profiler_.begin_token(step, phase);
  token_decision_.reset();
  block_decisions_.clear();
  merged_this_token_.clear();

  Matrix x = embed(model_, token_id);
  for (int b = 0; b < cfg.n_blocks; ++b) {
    if (path == ExecMode::NaivePerBlock) {
      block_decisions_.push_back(gate(model_.routers.at(b), x, cfg.top_k, step));
      profiler_.record(DispatchKind::RouterGemm, gemm_flops(cfg.n_experts, 1, x.rows()), -1);
    }
    x = block_forward(model_.blocks[b], x, [&](const AdapterSite& site, const Matrix& in) {
      return eval_site(site, in, path, phase, step, b);
    });
  }

  if (path == ExecMode::SimpleMerge) {
    for (auto& [id, slices] : merged_this_token_) {
      AdapterSite& live = model_.site(id);
      unmerge(live, slices);
      profiler_.record(DispatchKind::MergeGemm, gemm_flops(live.d_out(), live.d_in(), slices.rank()), id);
      state_.merged.at(model_.adapted_index(id)) = false;
    }
    merged_this_token_.clear();
  }
  return matmul(model_.head, x);
}

Matrix DecodeSession::decode_token(int token_id) {
  if (token_id < 0 || token_id >= model_.config.vocab) {
    throw Error("token " + std::to_string(token_id) + " out of range [0, " +
                std::to_string(model_.config.vocab) + ")");
  }
  const int step = decode_step_++;
  return forward(token_id, mode_, Phase::Decode, step);
}

std::vector<Matrix> DecodeSession::prefill(std::span<const int> token_ids) {
  if (token_ids.empty()) throw Error("prefill: empty token sequence");
  if (state_.is_merged()) {
    profiler_.begin_token(decode_step_, Phase::Restore);
    dynlora::restore(model_, state_, &profiler_, options_.tile);
  }
  ExecMode path = ExecMode::PreGatedNaive;
  if (mode_ == ExecMode::NaivePerSite || mode_ == ExecMode::NaivePerBlock || mode_ == ExecMode::BackboneOnly) {
    path = mode_;
  }
  std::vector<Matrix> logits;
  logits.reserve(token_ids.size());
  for (std::size_t pos = 0; pos < token_ids.size(); ++pos) {
    const int tok = token_ids[pos];
    if (tok < 0 || tok >= model_.config.vocab) {
      throw Error("token " + std::to_string(tok) + " out of range [0, " +
                  std::to_string(model_.config.vocab) + ")");
    }
    logits.push_back(forward(tok, path, Phase::Prefill, static_cast<int>(pos)));
  }
  return logits;
}

std::vector<int> DecodeSession::generate(std::span<const int> prompt, int n_new) {
  if (n_new < 1) throw Error("generate: n_new must be >= 1");
  if (prompt.empty()) throw Error("generate: empty prompt");
  if (prompt.size() > 1) prefill(prompt.first(prompt.size() - 1));
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n_new));
  int next = prompt.back();
  for (int i = 0; i < n_new; ++i) {
    next = argmax(decode_token(next));
    out.push_back(next);
  }
  generated_.insert(generated_.end(), out.begin(), out.end());
  return out;
}

void DecodeSession::restore() {
  if (state_.is_merged()) {
    profiler_.begin_token(decode_step_, Phase::Restore);
    dynlora::restore(model_, state_, &profiler_, options_.tile);
  }
}

}  // namespace dynlora
