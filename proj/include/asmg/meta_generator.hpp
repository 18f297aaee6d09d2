// SPDX-License-Identifier: Apache-2.0
//
// Coordinate-wise GRU meta generator. Every coordinate of Θ runs its own GRU
// over its history of values; coordinates in the same parameter group share
// weights. MLP scalars get a group each, embedding tables get one group per
// embedding dimension shared by all ids. All groups of one time step are
// evaluated together as stacked per-row matrix-vector products.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asmg/base_model.hpp"
#include "asmg/binary_io.hpp"
#include "asmg/error.hpp"
#include "asmg/rng.hpp"
#include "asmg/tape.hpp"

namespace asmg {

// ---- parameter groups -------------------------------------------------------

struct ParameterGroup {
  enum class Kind { kEmbeddingDim, kScalar };
  Kind kind = Kind::kScalar;
  std::size_t feature = 0;     // kEmbeddingDim
  std::size_t dim = 0;         // kEmbeddingDim
  std::size_t coordinate = 0;  // kScalar
  bool shared() const { return kind == Kind::kEmbeddingDim; }
};

/// Partition of Θ's coordinates into groups that share one GRU.
class ParameterGroupMap {
 public:
  explicit ParameterGroupMap(const ModelLayout& layout) : group_of_(layout.size()) {
    const std::size_t d = layout.embed_dim();
    for (std::size_t f = 0; f < layout.features().size(); ++f) {
      const std::size_t base = layout.table_offset(f);
      const std::size_t vocab = layout.features()[f].vocab;
      for (std::size_t j = 0; j < d; ++j) {
        const auto g = static_cast<Index>(groups_.size());
        groups_.push_back({ParameterGroup::Kind::kEmbeddingDim, f, j, 0});
        for (std::size_t row = 0; row < vocab; ++row) group_of_[base + row * d + j] = g;
      }
    }
    for (std::size_t c = layout.embedding_size(); c < layout.size(); ++c) {
      group_of_[c] = static_cast<Index>(groups_.size());
      groups_.push_back({ParameterGroup::Kind::kScalar, 0, 0, c});
    }
    all_groups_ = make_index(group_of_);
    std::string sig = layout.describe() + "|groups=" + std::to_string(groups_.size());
    hash_ = fnv1a(sig.data(), sig.size());
  }

  std::size_t num_groups() const { return groups_.size(); }
  std::size_t num_coordinates() const { return group_of_.size(); }
  const ParameterGroup& group(std::size_t g) const { return groups_.at(g); }
  Index group_of(std::size_t coord) const { return group_of_.at(coord); }
  const std::vector<Index>& group_of_all() const { return group_of_; }
  /// Group id of every coordinate, shared for tape use.
  const IndexList& all_group_ids() const { return all_groups_; }
  std::uint64_t hash() const { return hash_; }

  std::vector<std::size_t> coordinates(std::size_t g) const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < group_of_.size(); ++c) {
      if (group_of_[c] == g) out.push_back(c);
    }
    return out;
  }

 private:
  std::vector<Index> group_of_;
  std::vector<ParameterGroup> groups_;
  IndexList all_groups_;
  std::uint64_t hash_ = 0;
};

inline ParameterGroupMap build_group_map(const ModelLayout& layout) { return ParameterGroupMap(layout); }

// ---- parameters -------------------------------------------------------------

/// Weights of one group's GRU and its linear readout.
/// w_r, w_z, w_h are d x (d+1) row-major; the last column multiplies θ.
struct GruGroupParams {
  std::size_t hidden = 0;
  std::vector<double> w_r, w_z, w_h;
  std::vector<double> w_out;  // d
  double b_out = 0.0;
};

/// Stacked GRU weights for every group (ω).
struct MetaGeneratorParams {
  std::size_t hidden = 0;
  std::size_t groups = 0;
  /// Adds the step's input θ to the readout, so θ* starts near θ.
  bool residual_readout = false;
  Tensor w_r, w_z, w_h;  // [G, d, d+1]
  Tensor w_out;          // [G, 1, d]
  Tensor b_out;          // [G, 1]

  static MetaGeneratorParams zeros(std::size_t groups, std::size_t hidden) {
    MetaGeneratorParams m;
    m.hidden = hidden;
    m.groups = groups;
    m.w_r = Tensor(Shape{groups, hidden, hidden + 1});
    m.w_z = Tensor(Shape{groups, hidden, hidden + 1});
    m.w_h = Tensor(Shape{groups, hidden, hidden + 1});
    m.w_out = Tensor(Shape{groups, 1, hidden});
    m.b_out = Tensor(Shape{groups, 1});
    return m;
  }

  std::size_t parameter_count() const {
    return w_r.size() + w_z.size() + w_h.size() + w_out.size() + b_out.size();
  }

  GruGroupParams group(std::size_t g) const {
    const std::size_t m = hidden * (hidden + 1);
    auto cut = [&](const Tensor& t, std::size_t len) {
      return std::vector<double>(t.data.begin() + static_cast<std::ptrdiff_t>(g * len),
                                 t.data.begin() + static_cast<std::ptrdiff_t>((g + 1) * len));
    };
    return {hidden, cut(w_r, m), cut(w_z, m), cut(w_h, m), cut(w_out, hidden), b_out.data.at(g)};
  }

  void set_group(std::size_t g, const GruGroupParams& p) {
    const std::size_t m = hidden * (hidden + 1);
    std::copy(p.w_r.begin(), p.w_r.end(), w_r.data.begin() + static_cast<std::ptrdiff_t>(g * m));
    std::copy(p.w_z.begin(), p.w_z.end(), w_z.data.begin() + static_cast<std::ptrdiff_t>(g * m));
    std::copy(p.w_h.begin(), p.w_h.end(), w_h.data.begin() + static_cast<std::ptrdiff_t>(g * m));
    std::copy(p.w_out.begin(), p.w_out.end(), w_out.data.begin() + static_cast<std::ptrdiff_t>(g * hidden));
    b_out.data.at(g) = p.b_out;
  }

  /// ω as one flat vector: w_r, w_z, w_h, w_out, b_out.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const Tensor* t : {&w_r, &w_z, &w_h, &w_out, &b_out}) out.insert(out.end(), t->data.begin(), t->data.end());
    return out;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != parameter_count()) throw ShapeError("meta parameters: flat size mismatch");
    std::size_t off = 0;
    for (Tensor* t : {&w_r, &w_z, &w_h, &w_out, &b_out}) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t->size(), t->data.begin());
      off += t->size();
    }
  }

  friend bool operator==(const MetaGeneratorParams&, const MetaGeneratorParams&) = default;
};

/// GRU matrices and readout weights uniform(-init_scale, init_scale), readout bias 0.
inline MetaGeneratorParams init_meta(std::size_t groups, std::size_t hidden, std::uint64_t seed,
                                     double init_scale = 0.1, bool residual_readout = false) {
  if (hidden == 0) throw UsageError("meta generator: hidden size must be positive");
  MetaGeneratorParams m = MetaGeneratorParams::zeros(groups, hidden);
  m.residual_readout = residual_readout;
  Rng rng(derive_seed(seed, {tag(SeedTag::kMetaInit)}));
  std::uniform_real_distribution<double> u(-init_scale, init_scale);
  for (Tensor* t : {&m.w_r, &m.w_z, &m.w_h, &m.w_out}) {
    for (double& x : t->data) x = u(rng);
  }
  return m;
}

/// Carried hidden states, one d-vector per coordinate of Θ.
/// `tag` is the period whose model was the last one folded in.
struct HiddenStateStore {
  int tag = 0;
  std::size_t hidden = 0;
  std::vector<double> h;  // [n, d]

  static HiddenStateStore zeros(std::size_t coords, std::size_t hidden, int tag) {
    return {tag, hidden, std::vector<double>(coords * hidden, 0.0)};
  }
  std::size_t coordinates() const { return hidden == 0 ? 0 : h.size() / hidden; }
  friend bool operator==(const HiddenStateStore&, const HiddenStateStore&) = default;
};

/// ASMG-Linear weights α, one per window position (oldest first).
struct LinearMetaParams {
  std::vector<double> alpha;
  friend bool operator==(const LinearMetaParams&, const LinearMetaParams&) = default;
};

// ---- tape kernels -----------------------------------------------------------

struct GruVars {
  Var w_r, w_z, w_h, w_out, b_out;
};

/// Registers ω on the tape, as leaves when `trainable`.
inline GruVars register_meta(Tape& tape, const MetaGeneratorParams& m, bool trainable) {
  auto put = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  return {put(m.w_r), put(m.w_z), put(m.w_h), put(m.w_out), put(m.b_out)};
}

/// r = σ(W_r[h,θ]), z = σ(W_z[h,θ]), h̃ = tanh(W_h[r⊙h,θ]), h' = (1-z)⊙h + z⊙h̃,
/// for every row; rows pick their weights by group id.
inline Var gru_step(Tape& tape, const GruVars& w, const IndexList& groups, Var h_prev, Var theta) {
  const Var x = tape.concat_cols({h_prev, theta});
  const Var r = tape.sigmoid(tape.grouped_matvec(w.w_r, groups, x));
  const Var z = tape.sigmoid(tape.grouped_matvec(w.w_z, groups, x));
  const Var x_reset = tape.concat_cols({tape.mul(r, h_prev), theta});
  const Var h_tilde = tape.tanh(tape.grouped_matvec(w.w_h, groups, x_reset));
  return tape.add(tape.mul(tape.affine(z, -1.0, 1.0), h_prev), tape.mul(z, h_tilde));
}

/// θ* = W·h + b (+ θ with the residual readout), shape [N].
inline Var readout(Tape& tape, const GruVars& w, const IndexList& groups, Var h, Var theta, bool residual) {
  const std::size_t n = tape.value(h).dim(0);
  const Var lin = tape.add(tape.grouped_matvec(w.w_out, groups, h), tape.gather_rows(w.b_out, groups));
  const Var out = tape.slice(lin, 0, {n});
  return residual ? tape.add(out, theta) : out;
}

// ---- single-group API -------------------------------------------------------

namespace detail {
inline MetaGeneratorParams single_group(const GruGroupParams& g) {
  auto m = MetaGeneratorParams::zeros(1, g.hidden);
  m.set_group(0, g);
  return m;
}
}  // namespace detail

/// One GRU step of a single group.
inline std::vector<double> gru_step(const GruGroupParams& g, std::span<const double> h_prev, double theta) {
  if (h_prev.size() != g.hidden) throw ShapeError("gru_step: hidden state has wrong length");
  Tape tape;
  const auto w = register_meta(tape, detail::single_group(g), false);
  const auto groups = make_index({0});
  const Var h = tape.constant(Tensor(Shape{1, g.hidden}, std::vector<double>(h_prev.begin(), h_prev.end())));
  const Var th = tape.constant(Tensor(Shape{1}, {theta}));
  return tape.value(gru_step(tape, w, groups, h, th)).data;
}

/// θ* = W·h + b for a single group.
inline double readout(const GruGroupParams& g, std::span<const double> h) {
  if (h.size() != g.hidden) throw ShapeError("readout: hidden state has wrong length");
  Tape tape;
  const auto w = register_meta(tape, detail::single_group(g), false);
  const auto groups = make_index({0});
  const Var hv = tape.constant(Tensor(Shape{1, g.hidden}, std::vector<double>(h.begin(), h.end())));
  const Var th = tape.constant(Tensor(Shape{1}, {0.0}));
  return tape.value(readout(tape, w, groups, hv, th, false)).data[0];
}

// ---- generation -------------------------------------------------------------

struct GenerationResult {
  std::vector<std::vector<double>> outputs;  // Θ*_i per window step
  std::vector<std::vector<double>> hidden;   // h_i per window step, [n, d]
};

/// Runs the window through every coordinate's GRU starting from `h_init`,
/// reading out a full serving model at every step.
inline GenerationResult generate(const MetaGeneratorParams& meta, const ParameterGroupMap& groups,
                                 std::span<const std::span<const double>> window,
                                 const HiddenStateStore& h_init, std::optional<std::size_t> expected_k = std::nullopt) {
  if (window.empty()) throw ShapeError("generate: empty model window");
  if (expected_k && window.size() != *expected_k) {
    throw ShapeError("generate: window has " + std::to_string(window.size()) + " models, expected k=" +
                     std::to_string(*expected_k));
  }
  const std::size_t n = groups.num_coordinates();
  const std::size_t d = meta.hidden;
  if (h_init.h.size() != n * d || h_init.hidden != d) throw ShapeError("generate: hidden store does not match layout");
  GenerationResult res;
  std::vector<double> h = h_init.h;
  for (const auto& model : window) {
    if (model.size() != n) throw ShapeError("generate: window model does not match layout");
    Tape tape;  // fresh per step: only the carried state crosses steps
    const auto w = register_meta(tape, meta, false);
    const Var hv = tape.constant(Tensor(Shape{n, d}, std::move(h)));
    const Var th = tape.constant(Tensor(Shape{n}, std::vector<double>(model.begin(), model.end())));
    const Var next = gru_step(tape, w, groups.all_group_ids(), hv, th);
    res.outputs.push_back(tape.value(readout(tape, w, groups.all_group_ids(), next, th, meta.residual_readout)).data);
    h = tape.value(next).data;
    res.hidden.push_back(h);
  }
  return res;
}

/// Θ* = Σ α_i Θ_i, coordinate-wise.
inline std::vector<double> linear_combine(std::span<const double> alpha, std::span<const std::span<const double>> window) {
  if (alpha.size() != window.size()) {
    throw ShapeError("linear_combine: " + std::to_string(alpha.size()) + " weights for " +
                     std::to_string(window.size()) + " models");
  }
  if (window.empty()) throw ShapeError("linear_combine: empty window");
  std::vector<double> out(window[0].size(), 0.0);
  for (std::size_t i = 0; i < window.size(); ++i) {
    if (window[i].size() != out.size()) throw ShapeError("linear_combine: models differ in size");
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += alpha[i] * window[i][c];
  }
  return out;
}

// ---- checkpoint -------------------------------------------------------------
//
// "ASMGMETA", u32 version, u64 group-map hash, u64 d, u64 k, i64 period,
// u8 residual, u64 G, ω (w_r, w_z, w_h, w_out, b_out as f64),
// hidden store: i64 tag, u64 coordinates, coordinates*d f64,
// u64 |α|, α. Little-endian.

inline constexpr std::uint32_t kMetaCheckpointVersion = 1;

struct MetaCheckpoint {
  std::uint64_t group_map_hash = 0;
  std::size_t k = 0;
  int period = 0;
  MetaGeneratorParams meta;
  HiddenStateStore hidden;
  LinearMetaParams linear;

  friend bool operator==(const MetaCheckpoint&, const MetaCheckpoint&) = default;
};

inline void save_meta_checkpoint(const std::filesystem::path& path, const MetaCheckpoint& c) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write meta checkpoint " + tmp);
    io::put_magic(os, "ASMGMETA");
    io::put<std::uint32_t>(os, kMetaCheckpointVersion);
    io::put<std::uint64_t>(os, c.group_map_hash);
    io::put<std::uint64_t>(os, c.meta.hidden);
    io::put<std::uint64_t>(os, c.k);
    io::put<std::int64_t>(os, c.period);
    io::put<std::uint8_t>(os, c.meta.residual_readout ? 1 : 0);
    io::put<std::uint64_t>(os, c.meta.groups);
    io::put_doubles(os, c.meta.flatten());
    io::put<std::int64_t>(os, c.hidden.tag);
    io::put<std::uint64_t>(os, c.hidden.coordinates());
    io::put_doubles(os, c.hidden.h);
    io::put<std::uint64_t>(os, c.linear.alpha.size());
    io::put_doubles(os, c.linear.alpha);
  }
  std::filesystem::rename(tmp, path);
}

inline MetaCheckpoint load_meta_checkpoint(const std::filesystem::path& path,
                                           std::optional<std::uint64_t> expected_group_map = std::nullopt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open meta checkpoint " + path.string());
  io::expect_magic(is, "ASMGMETA", path.string());
  if (io::get<std::uint32_t>(is, "version") != kMetaCheckpointVersion) {
    throw DataError(path.string() + ": unsupported meta checkpoint version");
  }
  MetaCheckpoint c;
  c.group_map_hash = io::get<std::uint64_t>(is, "group map hash");
  if (expected_group_map && *expected_group_map != c.group_map_hash) {
    throw DataError(path.string() + ": meta checkpoint group map does not match the configured model");
  }
  const auto d = io::get<std::uint64_t>(is, "hidden size");
  c.k = io::get<std::uint64_t>(is, "k");
  c.period = static_cast<int>(io::get<std::int64_t>(is, "period"));
  const bool residual = io::get<std::uint8_t>(is, "residual flag") != 0;
  const auto groups = io::get<std::uint64_t>(is, "group count");
  c.meta = MetaGeneratorParams::zeros(groups, d);
  c.meta.residual_readout = residual;
  c.meta.unflatten(io::get_doubles(is, c.meta.parameter_count(), "meta parameters"));
  c.hidden.tag = static_cast<int>(io::get<std::int64_t>(is, "hidden tag"));
  c.hidden.hidden = d;
  const auto coords = io::get<std::uint64_t>(is, "hidden coordinates");
  c.hidden.h = io::get_doubles(is, coords * d, "hidden states");
  const auto k_alpha = io::get<std::uint64_t>(is, "alpha count");
  c.linear.alpha = io::get_doubles(is, k_alpha, "alpha");
  return c;
}

}  // namespace asmg
