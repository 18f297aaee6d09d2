// SPDX-License-Identifier: Apache-2.0
//
// Embedding&MLP click-through model: per-feature embedding lookups (mean
// pooled for multi-hot features), concatenated user then item embeddings,
// a ReLU MLP and a sigmoid output. Trained with log loss and Adam.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "asmg/adam.hpp"
#include "asmg/binary_io.hpp"
#include "asmg/data_stream.hpp"
#include "asmg/error.hpp"
#include "asmg/rng.hpp"
#include "asmg/tape.hpp"

namespace asmg {

/// Where an embedding feature reads its ids from in a Sample.
enum class FeatureSource { kUserField, kSequence, kItemField };

struct EmbeddingSpec {
  std::string name;
  FeatureSource source = FeatureSource::kUserField;
  std::size_t field = 0;  // index into user_features / item_features
  std::size_t vocab = 0;

  bool multi_hot() const { return source == FeatureSource::kSequence; }
  bool is_user() const { return source != FeatureSource::kItemField; }
};

/// Flat parameter layout: embedding tables ([vocab, dim] row-major) in
/// feature order, then (weight [in, out], bias [out]) per dense layer.
class ModelLayout {
 public:
  struct Dense {
    std::size_t in = 0, out = 0;
    std::size_t weight_offset = 0, bias_offset = 0;
  };

  ModelLayout(std::size_t embed_dim, std::vector<EmbeddingSpec> features, std::vector<std::size_t> hidden)
      : embed_dim_(embed_dim), features_(std::move(features)), hidden_(std::move(hidden)) {
    if (embed_dim_ == 0) throw UsageError("layout: embedding dimension must be positive");
    if (features_.empty()) throw UsageError("layout: at least one embedding feature required");
    std::size_t off = 0;
    for (const auto& f : features_) {
      if (f.vocab == 0) throw UsageError("layout: feature '" + f.name + "' has empty vocabulary");
      table_offsets_.push_back(off);
      off += f.vocab * embed_dim_;
    }
    embedding_size_ = off;
    std::size_t in = features_.size() * embed_dim_;
    std::vector<std::size_t> widths = hidden_;
    widths.push_back(1);
    for (std::size_t w : widths) {
      if (w == 0) throw UsageError("layout: hidden width must be positive");
      Dense d{in, w, off, off + in * w};
      off += in * w + w;
      layers_.push_back(d);
      in = w;
    }
    size_ = off;
  }

  std::size_t embed_dim() const { return embed_dim_; }
  const std::vector<EmbeddingSpec>& features() const { return features_; }
  const std::vector<std::size_t>& hidden() const { return hidden_; }
  const std::vector<Dense>& layers() const { return layers_; }
  std::size_t table_offset(std::size_t f) const { return table_offsets_.at(f); }
  std::size_t embedding_size() const { return embedding_size_; }
  std::size_t mlp_size() const { return size_ - embedding_size_; }
  /// Total parameter count n.
  std::size_t size() const { return size_; }
  std::size_t mlp_input_dim() const { return features_.size() * embed_dim_; }

  bool is_bias(std::size_t coord) const {
    for (const auto& d : layers_) {
      if (coord >= d.bias_offset && coord < d.bias_offset + d.out) return true;
    }
    return false;
  }

  std::string describe() const {
    std::ostringstream os;
    os << "d_e=" << embed_dim_;
    for (const auto& f : features_) {
      os << ";" << f.name << ":" << static_cast<int>(f.source) << ":" << f.field << ":" << f.vocab;
    }
    os << ";hidden=";
    for (std::size_t h : hidden_) os << h << ',';
    return os.str();
  }

  std::uint64_t hash() const {
    const std::string s = describe();
    return fnv1a(s.data(), s.size());
  }

 private:
  std::size_t embed_dim_;
  std::vector<EmbeddingSpec> features_;
  std::vector<std::size_t> hidden_;
  std::vector<std::size_t> table_offsets_;
  std::vector<Dense> layers_;
  std::size_t embedding_size_ = 0;
  std::size_t size_ = 0;
};

/// User id, user side features, user sequence, item id, item side features.
inline ModelLayout layout_for_schema(const FeatureSchema& schema, std::size_t embed_dim,
                                     std::vector<std::size_t> hidden) {
  std::vector<EmbeddingSpec> f;
  f.push_back({"user_id", FeatureSource::kUserField, 0, schema.num_users});
  for (std::size_t i = 0; i < schema.user_side.size(); ++i) {
    f.push_back({schema.user_side[i], FeatureSource::kUserField, i + 1, schema.user_side_vocab.at(i)});
  }
  f.push_back({"user_sequence", FeatureSource::kSequence, 0, schema.num_items});
  f.push_back({"item_id", FeatureSource::kItemField, 0, schema.num_items});
  for (std::size_t i = 0; i < schema.item_side.size(); ++i) {
    f.push_back({schema.item_side[i], FeatureSource::kItemField, i + 1, schema.item_side_vocab.at(i)});
  }
  return ModelLayout(embed_dim, std::move(f), std::move(hidden));
}

/// Θ: flat parameters tagged with the period that produced them.
struct BaseModelParams {
  std::vector<double> theta;
  std::uint64_t layout_hash = 0;
  int period = 0;

  friend bool operator==(const BaseModelParams&, const BaseModelParams&) = default;
};

enum class DenseInit {
  kSmallUniform,  // dense weights uniform(-0.01, 0.01) like the embeddings
  kFanIn,         // dense weights uniform(-sqrt(6 / in), sqrt(6 / in))
};

/// Embeddings uniform(-0.01, 0.01), biases zero; dense weights per `dense`.
/// Both schemes draw the same uniform sequence, the fan-in one rescales it.
inline BaseModelParams init_params(const ModelLayout& layout, std::uint64_t seed,
                                   DenseInit dense = DenseInit::kSmallUniform) {
  BaseModelParams p;
  p.theta.assign(layout.size(), 0.0);
  p.layout_hash = layout.hash();
  Rng rng(derive_seed(seed, {tag(SeedTag::kBaseInit)}));
  std::uniform_real_distribution<double> u(-0.01, 0.01);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (!layout.is_bias(i)) p.theta[i] = u(rng);
  }
  if (dense == DenseInit::kFanIn) {
    for (const auto& d : layout.layers()) {
      const double scale = std::sqrt(6.0 / static_cast<double>(d.in)) / 0.01;
      for (std::size_t i = 0; i < d.in * d.out; ++i) p.theta[d.weight_offset + i] *= scale;
    }
  }
  return p;
}

/// Per-feature id bags (CSR) and labels for a mini-batch.
struct Batch {
  std::vector<IndexList> offsets;  // per feature, size + 1 entries
  std::vector<IndexList> indices;
  std::vector<double> labels;

  std::size_t size() const { return labels.size(); }
};

inline Batch make_batch(const ModelLayout& layout, std::span<const Sample> samples,
                        std::span<const std::size_t> rows = {}) {
  const std::size_t count = rows.empty() ? samples.size() : rows.size();
  Batch b;
  b.labels.reserve(count);
  for (std::size_t r = 0; r < count; ++r) {
    b.labels.push_back(static_cast<double>(samples[rows.empty() ? r : rows[r]].label));
  }
  for (const auto& f : layout.features()) {
    std::vector<Index> off{0}, idx;
    off.reserve(count + 1);
    for (std::size_t r = 0; r < count; ++r) {
      const Sample& s = samples[rows.empty() ? r : rows[r]];
      switch (f.source) {
        case FeatureSource::kUserField: idx.push_back(s.user_features.at(f.field)); break;
        case FeatureSource::kItemField: idx.push_back(s.item_features.at(f.field)); break;
        case FeatureSource::kSequence: idx.insert(idx.end(), s.sequence.begin(), s.sequence.end()); break;
      }
      off.push_back(static_cast<Index>(idx.size()));
    }
    b.offsets.push_back(make_index(std::move(off)));
    b.indices.push_back(make_index(std::move(idx)));
  }
  return b;
}

/// Records the forward pass on `tape`; returns scores ŷ with shape [B].
inline Var forward(Tape& tape, const ModelLayout& layout, Var theta, const Batch& batch) {
  if (tape.value(theta).size() != layout.size()) {
    throw ShapeError("base forward: parameter vector has " + std::to_string(tape.value(theta).size()) +
                     " entries, layout needs " + std::to_string(layout.size()));
  }
  const std::size_t d = layout.embed_dim();
  std::vector<Var> parts;
  for (std::size_t f = 0; f < layout.features().size(); ++f) {
    const auto& spec = layout.features()[f];
    const Var table = tape.slice(theta, layout.table_offset(f), {spec.vocab, d});
    if (spec.multi_hot()) {
      parts.push_back(tape.gather_mean(table, batch.offsets[f], batch.indices[f]));
    } else {
      parts.push_back(tape.gather_rows(table, batch.indices[f]));
    }
  }
  Var x = tape.concat_cols(std::span<const Var>(parts));
  const auto& layers = layout.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& dl = layers[l];
    const Var w = tape.slice(theta, dl.weight_offset, {dl.in, dl.out});
    const Var b = tape.slice(theta, dl.bias_offset, {dl.out});
    x = tape.add(tape.matmul(x, w), b);
    if (l + 1 < layers.size()) x = tape.relu(x);
  }
  return tape.sigmoid(tape.slice(x, 0, {batch.size()}));
}

inline constexpr double kLogLossClip = 1e-7;

/// Mean binary cross-entropy with scores clipped to [1e-7, 1 - 1e-7].
inline Var log_loss(Tape& tape, Var scores, std::span<const double> labels) {
  const Shape shape = tape.value(scores).shape;
  if (shape_size(shape) != labels.size()) throw ShapeError("log_loss: score/label count mismatch");
  std::vector<double> y(labels.begin(), labels.end()), not_y(labels.size());
  for (std::size_t i = 0; i < y.size(); ++i) not_y[i] = 1.0 - y[i];
  const Var p = tape.clip(scores, kLogLossClip, 1.0 - kLogLossClip);
  const Var pos = tape.mul(tape.constant(Tensor(shape, std::move(y))), tape.log(p));
  const Var neg = tape.mul(tape.constant(Tensor(shape, std::move(not_y))), tape.log(tape.affine(p, -1.0, 1.0)));
  return tape.affine(tape.mean(tape.add(pos, neg)), -1.0, 0.0);
}

/// Same definition as the tape version, evaluated directly.
inline double log_loss(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw ShapeError("log_loss: score/label count mismatch");
  if (scores.empty()) throw ShapeError("log_loss: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(scores[i], kLogLossClip, 1.0 - kLogLossClip);
    const double y = labels[i];
    acc += y * std::log(p) + (1.0 - y) * std::log(-1.0 * p + 1.0);
  }
  return -1.0 * (acc / static_cast<double>(scores.size()));
}

/// Scores for every sample, evaluated in chunks.
inline std::vector<double> predict(const ModelLayout& layout, std::span<const double> theta,
                                   std::span<const Sample> samples, std::size_t chunk = 4096) {
  std::vector<double> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t len = std::min(chunk, samples.size() - start);
    const Batch b = make_batch(layout, samples.subspan(start, len));
    Tape tape;
    const Var th = tape.constant(Tensor(Shape{theta.size()}, std::vector<double>(theta.begin(), theta.end())));
    const Tensor& s = tape.value(forward(tape, layout, th, b));
    out.insert(out.end(), s.data.begin(), s.data.end());
  }
  return out;
}

struct OptimConfig {
  AdamConfig adam;
  int epochs = 1;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
};

/// Deterministic per-epoch permutation of [0, n).
inline std::vector<std::size_t> shuffled_rows(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(rows[i - 1], rows[pick(rng)]);
  }
  return rows;
}

/// Loss and gradient of one mini-batch at `theta`.
inline double batch_loss_and_grad(const ModelLayout& layout, std::span<const double> theta,
                                  const Batch& batch, std::vector<double>* grad) {
  Tape tape;
  const Var th = tape.leaf(Tensor(Shape{theta.size()}, std::vector<double>(theta.begin(), theta.end())));
  const Var loss = log_loss(tape, forward(tape, layout, th, batch), batch.labels);
  const double value = tape.value(loss).item();
  if (grad) {
    tape.backward(loss);
    *grad = tape.grad(th).data;
  }
  return value;
}

/// Fits Θ_t from Θ_{t-1} on the samples of one period (or a union of periods).
/// Each epoch visits the samples in a fresh order seeded by (seed, period, epoch).
inline BaseModelParams incremental_update(const ModelLayout& layout, const BaseModelParams& prev,
                                          std::span<const Sample> data, const OptimConfig& cfg,
                                          int period) {
  if (prev.theta.size() != layout.size()) throw ShapeError("incremental_update: parameters do not match layout");
  BaseModelParams next = prev;
  next.period = period;
  if (cfg.epochs <= 0 || data.empty()) return next;
  Adam adam(layout.size(), cfg.adam);
  std::vector<double> grad;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_rows(
        data.size(), derive_seed(cfg.seed, {tag(SeedTag::kBaseShuffle), static_cast<std::uint64_t>(period),
                                            static_cast<std::uint64_t>(epoch)}));
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      const Batch b = make_batch(layout, data, std::span<const std::size_t>(order).subspan(start, len));
      const double loss = batch_loss_and_grad(layout, next.theta, b, &grad);
      if (!std::isfinite(loss)) {
        throw NumericalError("incremental_update: non-finite loss at period " + std::to_string(period) +
                             ", epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index));
      }
      adam.step(next.theta, grad);
    }
  }
  return next;
}

// ---- checkpoint -------------------------------------------------------------
//
// "ASMGBASE", u32 version, u64 layout hash, i64 period, u64 n, n x f64.
// All fields little-endian.

inline constexpr std::uint32_t kBaseCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const BaseModelParams& p) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint " + tmp);
    io::put_magic(os, "ASMGBASE");
    io::put<std::uint32_t>(os, kBaseCheckpointVersion);
    io::put<std::uint64_t>(os, p.layout_hash);
    io::put<std::int64_t>(os, p.period);
    io::put<std::uint64_t>(os, p.theta.size());
    io::put_doubles(os, p.theta);
  }
  std::filesystem::rename(tmp, path);
}

inline BaseModelParams load_checkpoint(const std::filesystem::path& path,
                                       std::optional<std::uint64_t> expected_layout = std::nullopt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  io::expect_magic(is, "ASMGBASE", path.string());
  const auto version = io::get<std::uint32_t>(is, "version");
  if (version != kBaseCheckpointVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  BaseModelParams p;
  p.layout_hash = io::get<std::uint64_t>(is, "layout hash");
  if (expected_layout && *expected_layout != p.layout_hash) {
    throw DataError(path.string() + ": checkpoint layout does not match the configured model");
  }
  p.period = static_cast<int>(io::get<std::int64_t>(is, "period"));
  const auto n = io::get<std::uint64_t>(is, "size");
  p.theta = io::get_doubles(is, n, "parameters");
  return p;
}

/// Order-sensitive fingerprint of a parameter vector.
inline std::uint64_t checksum(std::span<const double> xs) {
  return fnv1a(xs.data(), xs.size() * sizeof(double));
}

}  // namespace asmg
