// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy layered backbone with LoRA expert banks attached to its linear layers.
//
// Each block has five linear sites evaluated in a fixed order:
//
//   h = x + mix_out(tanh(mix_in(x)))
//   y = h + down(tanh(gate(h)) * up(h))
//
// No biases anywhere. Sites are numbered globally as block * 5 + position.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dynlora/linalg.hpp"

namespace dynlora {

enum class Placement : std::uint32_t { AllLinear = 0, MlpOnly = 1 };
enum class RoutingPolicy : std::uint32_t { PerSite = 0, PerBlock = 1, PreGated = 2 };

std::string_view to_string(Placement p);
std::string_view to_string(RoutingPolicy r);
Placement parse_placement(std::string_view s);
RoutingPolicy parse_routing(std::string_view s);

struct ModelConfig {
  int n_blocks = 4;
  int d_model = 64;
  int d_hidden = 128;
  int vocab = 256;
  int n_experts = 8;
  int rank = 8;
  double alpha = 16.0;
  int top_k = 2;
  Placement placement = Placement::AllLinear;
  RoutingPolicy routing = RoutingPolicy::PreGated;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming every invalid field.
  void validate() const;

  double lora_scale() const { return alpha / rank; }
  int total_sites() const;
  int adapted_sites_per_block() const;
  int adapted_sites() const;

  bool operator==(const ModelConfig&) const = default;
};

enum class SiteKind : int { MixIn = 0, MixOut = 1, Gate = 2, Up = 3, Down = 4 };
inline constexpr int kSitesPerBlock = 5;

std::string_view site_name(SiteKind kind);
bool is_adapted(SiteKind kind, Placement placement);

struct LoraExpert {
  Matrix down;  // r x d_in
  Matrix up;    // d_out x r
};

struct AdapterSite {
  int site_id = 0;
  SiteKind kind = SiteKind::MixIn;
  /// Live weight; holds the merged backbone while an adapter delta is applied.
  Matrix weight;
  /// Unmerged copy, present only while drift auditing is enabled.
  std::optional<Matrix> pristine;
  std::vector<LoraExpert> experts;  // empty when !adapted
  bool adapted = false;

  Index d_in() const { return weight.cols(); }
  Index d_out() const { return weight.rows(); }
};

struct Block {
  std::array<AdapterSite, kSitesPerBlock> sites;

  AdapterSite& site(SiteKind k) { return sites[static_cast<int>(k)]; }
  const AdapterSite& site(SiteKind k) const { return sites[static_cast<int>(k)]; }
};

struct Router {
  Matrix w_g;  // N x d_in
};

struct Model {
  ModelConfig config;
  Matrix embedding;  // vocab x d_model
  std::vector<Block> blocks;
  Matrix head;  // vocab x d_model
  /// One per adapted site (PerSite), one per block (PerBlock), or exactly one
  /// (PreGated), matching config.routing.
  std::vector<Router> routers;
  /// Bumped whenever trainable parameters change; guards backward caches.
  std::uint64_t revision = 0;

  AdapterSite& site(int site_id);
  const AdapterSite& site(int site_id) const;
  /// Every site, indexed by site_id.
  std::vector<AdapterSite*> site_table();
  std::vector<int> adapted_site_ids() const;
  /// Position of site_id among adapted sites, or -1.
  int adapted_index(int site_id) const;
  /// The site whose input feeds the pre-gate router: the first adapted site
  /// of block 0 in forward order.
  int first_adapted_site_id() const;

  /// Structural shape checks; throws ShapeError.
  void check_shapes() const;
};

Model generate(const ModelConfig& config);

/// Replaces the routers with freshly seeded ones for another routing policy.
/// Backbone and experts are untouched, so the result is the same network
/// routed differently.
void reroute(Model& model, RoutingPolicy policy);
Model rerouted(const Model& model, RoutingPolicy policy);

/// Fills every expert's up factor (zero at generation) with seeded Gaussian
/// values of standard deviation `up_std`, giving a "trained-like" model whose
/// adapter deltas are nonzero.
void randomize_adapters(Model& model, std::uint64_t seed, double up_std);

void enable_drift_audit(Model& model);
/// Largest relative Frobenius distance between weight and pristine over all
/// audited sites.
double max_pristine_drift(const Model& model);

std::vector<std::uint8_t> serialize(const Model& model);
Model deserialize(std::span<const std::uint8_t> bytes);
void save(const Model& model, const std::filesystem::path& path);
Model load(const std::filesystem::path& path);

/// Intermediates of one block evaluation, for backprop.
struct BlockTrace {
  Matrix x, mix_in_out, mixed, mix_out_out, h, gate_out, gate_act, up_out, product, down_out, y;
};

inline Matrix tanh_of(const Matrix& m) { return m.array().tanh().matrix(); }

/// Evaluates one block. Each linear layer goes through
/// `site_eval(const AdapterSite&, const Matrix& input) -> Matrix`.
template <typename SiteEval>
Matrix block_forward(const Block& block, const Matrix& x, SiteEval&& site_eval,
                     BlockTrace* trace = nullptr) {
  Matrix mix_in_out = site_eval(block.site(SiteKind::MixIn), x);
  Matrix mixed = tanh_of(mix_in_out);
  Matrix mix_out_out = site_eval(block.site(SiteKind::MixOut), mixed);
  Matrix h = x + mix_out_out;
  Matrix gate_out = site_eval(block.site(SiteKind::Gate), h);
  Matrix up_out = site_eval(block.site(SiteKind::Up), h);
  Matrix gate_act = tanh_of(gate_out);
  Matrix product = gate_act.cwiseProduct(up_out);
  Matrix down_out = site_eval(block.site(SiteKind::Down), product);
  Matrix y = h + down_out;
  if (trace != nullptr) {
    *trace = BlockTrace{x,       std::move(mix_in_out), std::move(mixed),   std::move(mix_out_out),
                        h,       std::move(gate_out),   std::move(gate_act), std::move(up_out),
                        product, std::move(down_out),   y};
  }
  return y;
}

/// Embedding row of `token` as a d_model x 1 column.
Matrix embed(const Model& model, int token);

}  // namespace dynlora
