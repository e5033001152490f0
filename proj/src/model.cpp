// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include "dynlora/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace dynlora {

namespace {

constexpr std::array<char, 4> kMagic = {'L', 'S', 'W', 'M'};
constexpr std::uint32_t kVersion = 1;

// RNG streams. Each parameter family draws from its own stream so that, e.g.,
// regenerating routers for another policy leaves the backbone unchanged.
enum class Stream : std::uint32_t { Backbone = 1, ExpertDown = 2, Router = 3, AdapterUp = 4 };

std::mt19937_64 make_rng(std::uint64_t seed, Stream stream, std::uint32_t sub = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), sub};
  return std::mt19937_64(seq);
}

Matrix gaussian(std::mt19937_64& rng, Index rows, Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

std::pair<Index, Index> site_shape(const ModelConfig& c, SiteKind kind) {
  switch (kind) {
    case SiteKind::MixIn:
    case SiteKind::MixOut:
      return {c.d_model, c.d_model};
    case SiteKind::Gate:
    case SiteKind::Up:
      return {c.d_hidden, c.d_model};
    case SiteKind::Down:
      return {c.d_model, c.d_hidden};
  }
  return {0, 0};
}

std::vector<Router> make_routers(const Model& model, RoutingPolicy policy) {
  const auto& c = model.config;
  auto rng = make_rng(c.seed, Stream::Router, static_cast<std::uint32_t>(policy));
  std::vector<Router> routers;
  switch (policy) {
    case RoutingPolicy::PerSite:
      for (int id : model.adapted_site_ids()) {
        const Index d_in = model.site(id).d_in();
        routers.push_back({gaussian(rng, c.n_experts, d_in, 1.0 / std::sqrt(double(d_in)))});
      }
      break;
    case RoutingPolicy::PerBlock:
      for (int b = 0; b < c.n_blocks; ++b) {
        routers.push_back({gaussian(rng, c.n_experts, c.d_model, 1.0 / std::sqrt(double(c.d_model)))});
      }
      break;
    case RoutingPolicy::PreGated:
      routers.push_back({gaussian(rng, c.n_experts, c.d_model, 1.0 / std::sqrt(double(c.d_model)))});
      break;
  }
  return routers;
}

// --- little-endian encoding ------------------------------------------------

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void tensor(const Matrix& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) f64(m.data()[i]);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::size_t offset() const { return pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (in_.size() - pos_ < n) {
      std::ostringstream os;
      os << "truncated model file at offset " << pos_ << ": need " << n << " bytes for " << what
         << ", " << (in_.size() - pos_) << " remain";
      throw FormatError(os.str());
    }
  }
  std::uint32_t u32(std::string_view what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(std::string_view what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(std::string_view what) { return std::bit_cast<double>(u64(what)); }

  Matrix tensor(const std::string& name, Index rows, Index cols) {
    const std::size_t header_at = pos_;
    const std::uint32_t r = u32(name + " rows");
    const std::uint32_t c = u32(name + " cols");
    if (r != rows || c != cols) {
      std::ostringstream os;
      os << "tensor '" << name << "' at offset " << header_at << ": header says " << r << "x" << c
         << ", expected " << rows << "x" << cols;
      throw FormatError(os.str());
    }
    const std::size_t payload = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * 8;
    need(payload, "payload of tensor '" + name + "'");
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = f64(name);
    return m;
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::string site_label(int block, SiteKind kind) {
  return "blocks[" + std::to_string(block) + "]." + std::string(site_name(kind));
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(Placement p) {
  return p == Placement::AllLinear ? "AllLinear" : "MlpOnly";
}

std::string_view to_string(RoutingPolicy r) {
  switch (r) {
    case RoutingPolicy::PerSite:
      return "PerSite";
    case RoutingPolicy::PerBlock:
      return "PerBlock";
    case RoutingPolicy::PreGated:
      return "PreGated";
  }
  return "?";
}

Placement parse_placement(std::string_view s) {
  if (s == "AllLinear") return Placement::AllLinear;
  if (s == "MlpOnly") return Placement::MlpOnly;
  throw ConfigError("placement: expected AllLinear or MlpOnly, got '" + std::string(s) + "'");
}

RoutingPolicy parse_routing(std::string_view s) {
  if (s == "PerSite") return RoutingPolicy::PerSite;
  if (s == "PerBlock") return RoutingPolicy::PerBlock;
  if (s == "PreGated") return RoutingPolicy::PreGated;
  throw ConfigError("routing: expected PerSite, PerBlock or PreGated, got '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  auto positive = [&](int v, const char* name) {
    if (v < 1) problems.push_back(std::string(name) + "=" + std::to_string(v) + " must be >= 1");
  };
  positive(n_blocks, "n_blocks");
  positive(d_model, "d_model");
  positive(d_hidden, "d_hidden");
  positive(vocab, "vocab");
  positive(n_experts, "n_experts");
  positive(rank, "rank");
  if (rank > std::min(d_model, d_hidden)) {
    problems.push_back("rank=" + std::to_string(rank) + " exceeds min(d_model, d_hidden)=" +
                       std::to_string(std::min(d_model, d_hidden)));
  }
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    problems.push_back("alpha=" + std::to_string(alpha) + " must be positive and finite");
  }
  if (top_k < 1 || top_k > n_experts) {
    problems.push_back("top_k=" + std::to_string(top_k) + " must be in [1, n_experts=" +
                       std::to_string(n_experts) + "]");
  }
  if (static_cast<std::uint32_t>(placement) > 1) problems.push_back("placement: unknown value");
  if (static_cast<std::uint32_t>(routing) > 2) problems.push_back("routing: unknown value");
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

int ModelConfig::total_sites() const { return kSitesPerBlock * n_blocks; }

int ModelConfig::adapted_sites_per_block() const {
  return placement == Placement::AllLinear ? 5 : 3;
}

int ModelConfig::adapted_sites() const { return adapted_sites_per_block() * n_blocks; }

std::string_view site_name(SiteKind kind) {
  switch (kind) {
    case SiteKind::MixIn:
      return "mix_in";
    case SiteKind::MixOut:
      return "mix_out";
    case SiteKind::Gate:
      return "gate";
    case SiteKind::Up:
      return "up";
    case SiteKind::Down:
      return "down";
  }
  return "?";
}

bool is_adapted(SiteKind kind, Placement placement) {
  if (placement == Placement::AllLinear) return true;
  return kind == SiteKind::Gate || kind == SiteKind::Up || kind == SiteKind::Down;
}

AdapterSite& Model::site(int site_id) {
  return blocks.at(site_id / kSitesPerBlock).sites[site_id % kSitesPerBlock];
}

const AdapterSite& Model::site(int site_id) const {
  return blocks.at(site_id / kSitesPerBlock).sites[site_id % kSitesPerBlock];
}

std::vector<AdapterSite*> Model::site_table() {
  std::vector<AdapterSite*> table;
  table.reserve(blocks.size() * kSitesPerBlock);
  for (auto& b : blocks)
    for (auto& s : b.sites) table.push_back(&s);
  return table;
}

std::vector<int> Model::adapted_site_ids() const {
  std::vector<int> ids;
  for (const auto& b : blocks)
    for (const auto& s : b.sites)
      if (s.adapted) ids.push_back(s.site_id);
  return ids;
}

int Model::adapted_index(int site_id) const {
  int idx = 0;
  for (const auto& b : blocks) {
    for (const auto& s : b.sites) {
      if (s.site_id == site_id) return s.adapted ? idx : -1;
      if (s.adapted) ++idx;
    }
  }
  return -1;
}

int Model::first_adapted_site_id() const {
  for (const auto& s : blocks.at(0).sites)
    if (s.adapted) return s.site_id;
  throw StateError("model has no adapted site in block 0");
}

void Model::check_shapes() const {
  const auto& c = config;
  auto expect = [](const Matrix& m, Index r, Index cc, const std::string& what) {
    if (m.rows() != r || m.cols() != cc) {
      throw ShapeError(what + " is " + shape_string(m) + ", expected " + std::to_string(r) + "x" +
                       std::to_string(cc));
    }
  };
  expect(embedding, c.vocab, c.d_model, "embedding");
  expect(head, c.vocab, c.d_model, "head");
  if (static_cast<int>(blocks.size()) != c.n_blocks) throw ShapeError("block count mismatch");
  for (int b = 0; b < c.n_blocks; ++b) {
    for (int k = 0; k < kSitesPerBlock; ++k) {
      const auto& s = blocks[b].sites[k];
      const auto kind = static_cast<SiteKind>(k);
      const auto [d_out, d_in] = site_shape(c, kind);
      const std::string label = site_label(b, kind);
      expect(s.weight, d_out, d_in, label + ".weight");
      if (s.pristine) expect(*s.pristine, d_out, d_in, label + ".pristine");
      if (s.adapted != is_adapted(kind, c.placement)) throw ShapeError(label + ": adapted flag disagrees with placement");
      const std::size_t n_exp = s.adapted ? static_cast<std::size_t>(c.n_experts) : 0;
      if (s.experts.size() != n_exp) throw ShapeError(label + ": wrong expert count");
      for (const auto& e : s.experts) {
        expect(e.down, c.rank, d_in, label + ".down");
        expect(e.up, d_out, c.rank, label + ".up");
      }
    }
  }
  std::size_t expected_routers = 1;
  if (c.routing == RoutingPolicy::PerSite) expected_routers = adapted_site_ids().size();
  if (c.routing == RoutingPolicy::PerBlock) expected_routers = c.n_blocks;
  if (routers.size() != expected_routers) throw ShapeError("router count does not match routing policy");
}

Model generate(const ModelConfig& config) {
  config.validate();
  Model model;
  model.config = config;
  auto backbone = make_rng(config.seed, Stream::Backbone);
  auto experts = make_rng(config.seed, Stream::ExpertDown);

  model.embedding = gaussian(backbone, config.vocab, config.d_model, 1.0);
  model.blocks.resize(config.n_blocks);
  for (int b = 0; b < config.n_blocks; ++b) {
    for (int k = 0; k < kSitesPerBlock; ++k) {
      auto& s = model.blocks[b].sites[k];
      s.site_id = b * kSitesPerBlock + k;
      s.kind = static_cast<SiteKind>(k);
      const auto [d_out, d_in] = site_shape(config, s.kind);
      s.weight = gaussian(backbone, d_out, d_in, 1.0 / std::sqrt(double(d_in)));
      // Merge targets live on the accumulation lattice so merge/unmerge is exact.
      snap_in_place(s.weight);
      s.adapted = is_adapted(s.kind, config.placement);
      if (!s.adapted) continue;
      s.experts.resize(config.n_experts);
      for (auto& e : s.experts) {
        e.down = gaussian(experts, config.rank, d_in, 1.0 / std::sqrt(double(d_in)));
        e.up = Matrix::Zero(d_out, config.rank);
      }
    }
  }
  model.head = gaussian(backbone, config.vocab, config.d_model, 1.0 / std::sqrt(double(config.d_model)));
  model.routers = make_routers(model, config.routing);
  return model;
}

void reroute(Model& model, RoutingPolicy policy) {
  model.config.routing = policy;
  model.routers = make_routers(model, policy);
  ++model.revision;
}

Model rerouted(const Model& model, RoutingPolicy policy) {
  Model copy = model;
  if (copy.config.routing != policy) reroute(copy, policy);
  return copy;
}

void randomize_adapters(Model& model, std::uint64_t seed, double up_std) {
  auto rng = make_rng(seed, Stream::AdapterUp);
  for (auto& b : model.blocks)
    for (auto& s : b.sites)
      for (auto& e : s.experts) e.up = gaussian(rng, e.up.rows(), e.up.cols(), up_std);
  ++model.revision;
}

void enable_drift_audit(Model& model) {
  for (auto& b : model.blocks)
    for (auto& s : b.sites)
      if (s.adapted) s.pristine = s.weight;
}

double max_pristine_drift(const Model& model) {
  double worst = 0.0;
  for (const auto& b : model.blocks)
    for (const auto& s : b.sites)
      if (s.pristine) worst = std::max(worst, relative_frobenius(s.weight, *s.pristine));
  return worst;
}

std::vector<std::uint8_t> serialize(const Model& model) {
  const auto& c = model.config;
  Writer w;
  w.bytes(kMagic.data(), kMagic.size());
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(c.n_blocks));
  w.u32(static_cast<std::uint32_t>(c.d_model));
  w.u32(static_cast<std::uint32_t>(c.d_hidden));
  w.u32(static_cast<std::uint32_t>(c.vocab));
  w.u32(static_cast<std::uint32_t>(c.n_experts));
  w.u32(static_cast<std::uint32_t>(c.rank));
  w.f64(c.alpha);
  w.u32(static_cast<std::uint32_t>(c.top_k));
  w.u32(static_cast<std::uint32_t>(c.placement));
  w.u32(static_cast<std::uint32_t>(c.routing));
  w.u64(c.seed);
  w.tensor(model.embedding);
  for (const auto& b : model.blocks) {
    for (const auto& s : b.sites) {
      w.tensor(s.weight);
      for (const auto& e : s.experts) {
        w.tensor(e.down);
        w.tensor(e.up);
      }
    }
  }
  for (const auto& r : model.routers) w.tensor(r.w_g);
  w.tensor(model.head);
  return w.take();
}

Model deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw FormatError("bad magic");
  r.u32("magic");
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw FormatError("unsupported model file version " + std::to_string(version) + " (expected " +
                      std::to_string(kVersion) + ")");
  }

  ModelConfig c;
  c.n_blocks = static_cast<int>(r.u32("n_blocks"));
  c.d_model = static_cast<int>(r.u32("d_model"));
  c.d_hidden = static_cast<int>(r.u32("d_hidden"));
  c.vocab = static_cast<int>(r.u32("vocab"));
  c.n_experts = static_cast<int>(r.u32("n_experts"));
  c.rank = static_cast<int>(r.u32("rank"));
  c.alpha = r.f64("alpha");
  c.top_k = static_cast<int>(r.u32("top_k"));
  c.placement = static_cast<Placement>(r.u32("placement"));
  c.routing = static_cast<RoutingPolicy>(r.u32("routing"));
  c.seed = r.u64("seed");
  c.validate();

  Model model;
  model.config = c;
  model.embedding = r.tensor("embedding", c.vocab, c.d_model);
  model.blocks.resize(c.n_blocks);
  for (int b = 0; b < c.n_blocks; ++b) {
    for (int k = 0; k < kSitesPerBlock; ++k) {
      auto& s = model.blocks[b].sites[k];
      s.site_id = b * kSitesPerBlock + k;
      s.kind = static_cast<SiteKind>(k);
      s.adapted = is_adapted(s.kind, c.placement);
      const auto [d_out, d_in] = site_shape(c, s.kind);
      const std::string label = site_label(b, s.kind);
      s.weight = r.tensor(label + ".weight", d_out, d_in);
      if (!s.adapted) continue;
      s.experts.resize(c.n_experts);
      for (int e = 0; e < c.n_experts; ++e) {
        const std::string el = label + ".experts[" + std::to_string(e) + "]";
        s.experts[e].down = r.tensor(el + ".down", c.rank, d_in);
        s.experts[e].up = r.tensor(el + ".up", d_out, c.rank);
      }
    }
  }
  std::size_t n_routers = 1;
  if (c.routing == RoutingPolicy::PerSite) n_routers = model.adapted_site_ids().size();
  if (c.routing == RoutingPolicy::PerBlock) n_routers = c.n_blocks;
  for (std::size_t i = 0; i < n_routers; ++i) {
    Index d_in = c.d_model;
    if (c.routing == RoutingPolicy::PerSite) d_in = model.site(model.adapted_site_ids()[i]).d_in();
    model.routers.push_back({r.tensor("routers[" + std::to_string(i) + "]", c.n_experts, d_in)});
  }
  model.head = r.tensor("head", c.vocab, c.d_model);
  if (!r.at_end()) {
    throw FormatError("trailing bytes after model payload at offset " + std::to_string(r.offset()));
  }
  return model;
}

void save(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Model load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return deserialize(bytes);
}

Matrix embed(const Model& model, int token) {
  if (token < 0 || token >= model.config.vocab) {
    throw Error("token " + std::to_string(token) + " out of range [0, " +
                std::to_string(model.config.vocab) + ")");
  }
  return model.embedding.row(token).transpose();
}

}  // namespace dynlora
