// SPDX-License-Identifier: Apache-2.0
//
// Interaction-log ingestion: period splitting, user-sequence features,
// negative sampling and the on-disk period shards.
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "asmg/error.hpp"
#include "asmg/rng.hpp"
#include "asmg/tape.hpp"
#include "json.hpp"

namespace asmg {

inline constexpr std::size_t kMaxSequenceLength = 30;
inline constexpr std::int64_t kSecondsPerDay = 86400;

struct Interaction {
  std::string user_id;
  std::string item_id;
  int label = 1;
  std::int64_t timestamp = 0;
  /// (name, value) categorical columns in file order.
  std::vector<std::pair<std::string, std::string>> side_features;
  std::size_t line = 0;
};

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\n')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

template <typename T>
bool parse_int(std::string_view s, T& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace detail

/// Reads the delimiter-separated interaction log. The header row must start
/// with user_id, item_id, label, timestamp; further cells hold name=value.
inline std::vector<Interaction> read_interactions(std::istream& in, char delim = ',') {
  static constexpr std::string_view kExpected[] = {"user_id", "item_id", "label", "timestamp"};
  std::string line;
  if (!std::getline(in, line)) {
    throw DataError("interactions: empty input, expected header row "
                    "'user_id,item_id,label,timestamp[,name=value...]'");
  }
  {
    const auto cols = detail::split(detail::trim(line), delim);
    bool ok = cols.size() >= 4;
    for (std::size_t i = 0; ok && i < 4; ++i) ok = detail::trim(cols[i]) == kExpected[i];
    if (!ok) {
      throw DataError("interactions: line 1: missing header, expected columns "
                      "'user_id,item_id,label,timestamp' first");
    }
  }
  std::vector<Interaction> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view row = detail::trim(line);
    if (row.empty()) continue;
    const auto cols = detail::split(row, delim);
    auto fail = [&](const std::string& why) {
      throw DataError("interactions: line " + std::to_string(lineno) + ": " + why);
    };
    if (cols.size() < 4) fail("expected at least 4 columns, got " + std::to_string(cols.size()));
    Interaction it;
    it.line = lineno;
    it.user_id = std::string(detail::trim(cols[0]));
    it.item_id = std::string(detail::trim(cols[1]));
    if (it.user_id.empty() || it.item_id.empty()) fail("empty user_id or item_id");
    if (!detail::parse_int(detail::trim(cols[2]), it.label) || (it.label != 0 && it.label != 1)) {
      fail("label must be 0 or 1, got '" + std::string(cols[2]) + "'");
    }
    if (!detail::parse_int(detail::trim(cols[3]), it.timestamp)) {
      fail("timestamp must be an integer, got '" + std::string(cols[3]) + "'");
    }
    for (std::size_t c = 4; c < cols.size(); ++c) {
      const std::string_view cell = detail::trim(cols[c]);
      if (cell.empty()) continue;
      const std::size_t eq = cell.find('=');
      if (eq == std::string_view::npos || eq == 0) fail("side feature must be name=value, got '" + std::string(cell) + "'");
      it.side_features.emplace_back(std::string(cell.substr(0, eq)), std::string(cell.substr(eq + 1)));
    }
    out.push_back(std::move(it));
  }
  return out;
}

/// Stable order by timestamp; ties keep input order.
inline std::vector<std::size_t> time_order(const std::vector<Interaction>& xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return xs[a].timestamp < xs[b].timestamp;
  });
  return order;
}

// ---- period splitting -----------------------------------------------------

struct SplitScheme {
  enum class Kind { kCalendarDay, kEqualCount };
  Kind kind = Kind::kCalendarDay;
  int n_periods = 0;

  static SplitScheme calendar_day() { return {Kind::kCalendarDay, 0}; }
  static SplitScheme equal_count(int n) { return {Kind::kEqualCount, n}; }

  std::string id() const {
    return kind == Kind::kCalendarDay ? "calendar_day" : "equal_count(" + std::to_string(n_periods) + ")";
  }

  static SplitScheme parse(std::string_view s) {
    if (s == "calendar_day") return calendar_day();
    constexpr std::string_view prefix = "equal_count(";
    if (s.starts_with(prefix) && s.ends_with(")")) {
      int n = 0;
      if (detail::parse_int(s.substr(prefix.size(), s.size() - prefix.size() - 1), n)) return equal_count(n);
    }
    throw UsageError("unknown splitting scheme '" + std::string(s) +
                     "', expected calendar_day or equal_count(<n>)");
  }
};

/// One period's slice of the interaction log.
struct PeriodSlice {
  int index = 0;  // 1-based
  std::int64_t begin = 0;  // inclusive
  std::int64_t end = 0;    // exclusive
  std::vector<std::size_t> rows;  // indices into the interaction vector, time order
};

inline std::vector<PeriodSlice> split_periods(const std::vector<Interaction>& xs, const SplitScheme& scheme) {
  if (xs.empty()) throw DataError("split_periods: no interactions");
  if (scheme.kind == SplitScheme::Kind::kEqualCount && scheme.n_periods <= 0) {
    throw UsageError("split_periods: n_periods must be positive");
  }
  const auto order = time_order(xs);
  std::vector<PeriodSlice> out;
  if (scheme.kind == SplitScheme::Kind::kCalendarDay) {
    auto day_of = [](std::int64_t ts) {
      return ts >= 0 ? ts / kSecondsPerDay : -((-ts + kSecondsPerDay - 1) / kSecondsPerDay);
    };
    const std::int64_t first = day_of(xs[order.front()].timestamp);
    const std::int64_t last = day_of(xs[order.back()].timestamp);
    for (std::int64_t d = first; d <= last; ++d) {
      PeriodSlice p;
      p.index = static_cast<int>(d - first + 1);
      p.begin = d * kSecondsPerDay;
      p.end = (d + 1) * kSecondsPerDay;
      out.push_back(std::move(p));
    }
    for (std::size_t r : order) out[static_cast<std::size_t>(day_of(xs[r].timestamp) - first)].rows.push_back(r);
    return out;
  }
  const std::size_t n = static_cast<std::size_t>(scheme.n_periods);
  if (n > xs.size()) {
    throw DataError("split_periods: " + std::to_string(n) + " periods requested for only " +
                    std::to_string(xs.size()) + " interactions");
  }
  const std::size_t base = xs.size() / n, extra = xs.size() % n;
  std::size_t pos = 0;
  for (std::size_t p = 0; p < n; ++p) {
    PeriodSlice s;
    s.index = static_cast<int>(p + 1);
    const std::size_t len = base + (p < extra ? 1 : 0);
    s.rows.assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                  order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
    s.begin = xs[s.rows.front()].timestamp;
    s.end = xs[s.rows.back()].timestamp + 1;
    out.push_back(std::move(s));
  }
  return out;
}

// ---- user sequences -------------------------------------------------------

/// Items in time order (oldest first), at most kMaxSequenceLength.
struct UserSequence {
  std::string user_id;
  std::vector<std::string> item_ids;
};

/// Positive-feedback history of every user, queryable at any timestamp.
class UserHistory {
 public:
  struct Event {
    std::int64_t timestamp;
    std::string item_id;
  };

  /// Sequence made of positives strictly earlier than `timestamp`.
  UserSequence before(const std::string& user_id, std::int64_t timestamp,
                      std::size_t max_len = kMaxSequenceLength) const {
    UserSequence seq{user_id, {}};
    const auto it = events_.find(user_id);
    if (it == events_.end()) return seq;
    const auto& ev = it->second;
    const auto stop = std::lower_bound(ev.begin(), ev.end(), timestamp,
                                       [](const Event& e, std::int64_t ts) { return e.timestamp < ts; });
    const auto count = static_cast<std::size_t>(stop - ev.begin());
    const std::size_t start = count > max_len ? count - max_len : 0;
    for (std::size_t i = start; i < count; ++i) seq.item_ids.push_back(ev[i].item_id);
    return seq;
  }

  const std::unordered_map<std::string, std::vector<Event>>& events() const { return events_; }

 private:
  friend UserHistory build_user_sequences(const std::vector<Interaction>&);
  std::unordered_map<std::string, std::vector<Event>> events_;
};

/// Indexes every positive per user, ordered by (timestamp, input order).
inline UserHistory build_user_sequences(const std::vector<Interaction>& xs) {
  UserHistory h;
  for (std::size_t r : time_order(xs)) {
    if (xs[r].label == 1) h.events_[xs[r].user_id].push_back({xs[r].timestamp, xs[r].item_id});
  }
  return h;
}

// ---- vocabularies and encoded samples -------------------------------------

/// Append-only id -> index map, indices in order of first appearance.
class Vocabulary {
 public:
  Index add(const std::string& key) {
    auto [it, inserted] = index_.try_emplace(key, static_cast<Index>(keys_.size()));
    if (inserted) keys_.push_back(key);
    return it->second;
  }
  std::optional<Index> find(const std::string& key) const {
    const auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  const std::string& key(Index i) const { return keys_.at(i); }
  std::size_t size() const { return keys_.size(); }

 private:
  std::unordered_map<std::string, Index> index_;
  std::vector<std::string> keys_;
};

/// One labeled example in vocabulary-index form.
/// user_features[0] is the user id, item_features[0] the item id; the rest
/// follow the schema's side-feature order.
struct Sample {
  std::int64_t timestamp = 0;
  int label = 0;
  std::vector<Index> user_features;
  std::vector<Index> item_features;
  std::vector<Index> sequence;  // item-id indices, oldest first

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct PeriodDataset {
  int period = 0;
  std::int64_t begin = 0;
  std::int64_t end = 0;
  std::string scheme;
  std::vector<Sample> samples;

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(),
                                                  [](const Sample& s) { return s.label == 1; }));
  }
};

/// Categorical features and their vocabulary sizes.
struct FeatureSchema {
  std::vector<std::string> user_side;  // names, sorted
  std::vector<std::string> item_side;
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::vector<std::size_t> user_side_vocab;  // include the reserved "missing" slot 0
  std::vector<std::size_t> item_side_vocab;

  friend bool operator==(const FeatureSchema&, const FeatureSchema&) = default;
};

/// Side features named user_* belong to the user; all others to the item.
inline bool is_user_side(const std::string& name) { return name.starts_with("user_"); }

enum class NegativeMode { kSample, kExplicit };

inline NegativeMode parse_negative_mode(std::string_view s) {
  if (s == "sample") return NegativeMode::kSample;
  if (s == "explicit") return NegativeMode::kExplicit;
  throw UsageError("negatives must be 'sample' or 'explicit', got '" + std::string(s) + "'");
}
inline std::string to_string(NegativeMode m) { return m == NegativeMode::kSample ? "sample" : "explicit"; }

/// For every positive, draws one item from [0, catalog_size) that `observed`
/// does not contain for that user. Output interleaves positive, negative.
/// `item_side` supplies the item side features of any sampled item.
inline std::vector<Sample> sample_negatives(
    const std::vector<Sample>& positives, Index catalog_size,
    const std::unordered_map<Index, std::unordered_set<Index>>& observed,
    const std::vector<std::vector<Index>>& item_side, std::uint64_t seed,
    const Vocabulary* user_names = nullptr) {
  Rng rng(seed);
  std::uniform_int_distribution<Index> pick(0, catalog_size == 0 ? 0 : catalog_size - 1);
  static const std::unordered_set<Index> kNone;
  std::vector<Sample> out;
  out.reserve(positives.size() * 2);
  for (const Sample& pos : positives) {
    const Index user = pos.user_features.at(0);
    const auto it = observed.find(user);
    const auto& seen = it == observed.end() ? kNone : it->second;
    std::size_t seen_in_catalog = 0;
    for (Index i : seen) seen_in_catalog += i < catalog_size ? 1 : 0;
    if (seen_in_catalog >= catalog_size) {
      const std::string who = user_names ? user_names->key(user) : std::to_string(user);
      throw DataError("sample_negatives: user '" + who +
                      "' has interacted with the entire item catalog; no negative available");
    }
    Index item = 0;
    do {
      item = pick(rng);
    } while (seen.contains(item));
    Sample neg = pos;
    neg.label = 0;
    neg.item_features.assign(1, item);
    const auto& attrs = item_side.at(item);
    neg.item_features.insert(neg.item_features.end(), attrs.begin(), attrs.end());
    out.push_back(pos);
    out.push_back(std::move(neg));
  }
  return out;
}

struct PreparedStream {
  FeatureSchema schema;
  std::string scheme;
  NegativeMode negatives = NegativeMode::kSample;
  std::uint64_t seed = 0;
  std::vector<PeriodDataset> periods;
};

/// Full pipeline: split, encode, attach user sequences, sample negatives.
inline PreparedStream prepare_stream(const std::vector<Interaction>& xs, const SplitScheme& scheme,
                                     NegativeMode mode, std::uint64_t seed) {
  const auto slices = split_periods(xs, scheme);
  const auto history = build_user_sequences(xs);
  const auto order = time_order(xs);

  PreparedStream out;
  out.scheme = scheme.id();
  out.negatives = mode;
  out.seed = seed;

  std::set<std::string> user_side_names, item_side_names;
  for (const auto& x : xs) {
    for (const auto& [name, value] : x.side_features) {
      (is_user_side(name) ? user_side_names : item_side_names).insert(name);
    }
  }
  out.schema.user_side.assign(user_side_names.begin(), user_side_names.end());
  out.schema.item_side.assign(item_side_names.begin(), item_side_names.end());

  Vocabulary users, items;
  std::vector<Vocabulary> user_side_vocab(out.schema.user_side.size());
  std::vector<Vocabulary> item_side_vocab(out.schema.item_side.size());
  for (auto& v : user_side_vocab) v.add("");
  for (auto& v : item_side_vocab) v.add("");
  std::vector<std::vector<Index>> item_attrs;  // first-seen side features per item

  auto side_value = [](const Interaction& x, const std::string& name) -> std::string {
    for (const auto& [n, v] : x.side_features) {
      if (n == name) return v;
    }
    return "";
  };

  // Vocabulary indices follow first appearance in time order.
  for (std::size_t r : order) {
    const auto& x = xs[r];
    users.add(x.user_id);
    const Index item = items.add(x.item_id);
    if (item == item_attrs.size()) {
      std::vector<Index> attrs;
      for (std::size_t f = 0; f < out.schema.item_side.size(); ++f) {
        attrs.push_back(item_side_vocab[f].add(side_value(x, out.schema.item_side[f])));
      }
      item_attrs.push_back(std::move(attrs));
    }
    for (std::size_t f = 0; f < out.schema.user_side.size(); ++f) {
      user_side_vocab[f].add(side_value(x, out.schema.user_side[f]));
    }
  }

  auto encode = [&](const Interaction& x) {
    Sample s;
    s.timestamp = x.timestamp;
    s.label = x.label;
    s.user_features.push_back(*users.find(x.user_id));
    for (std::size_t f = 0; f < out.schema.user_side.size(); ++f) {
      s.user_features.push_back(*user_side_vocab[f].find(side_value(x, out.schema.user_side[f])));
    }
    const Index item = *items.find(x.item_id);
    s.item_features.push_back(item);
    for (std::size_t f = 0; f < out.schema.item_side.size(); ++f) {
      s.item_features.push_back(*item_side_vocab[f].find(side_value(x, out.schema.item_side[f])));
    }
    for (const auto& id : history.before(x.user_id, x.timestamp).item_ids) s.sequence.push_back(*items.find(id));
    return s;
  };

  std::unordered_map<Index, std::unordered_set<Index>> observed;
  Index catalog = 0;
  for (const auto& slice : slices) {
    PeriodDataset ds;
    ds.period = slice.index;
    ds.begin = slice.begin;
    ds.end = slice.end;
    ds.scheme = out.scheme;
    std::vector<Sample> encoded;
    for (std::size_t r : slice.rows) {
      const auto& x = xs[r];
      if (mode == NegativeMode::kSample && x.label != 1) continue;
      Sample s = encode(x);
      catalog = std::max<Index>(catalog, s.item_features[0] + 1);
      if (x.label == 1) observed[s.user_features[0]].insert(s.item_features[0]);
      encoded.push_back(std::move(s));
    }
    if (mode == NegativeMode::kSample) {
      ds.samples = sample_negatives(encoded, catalog, observed, item_attrs,
                                    derive_seed(seed, {tag(SeedTag::kNegatives), static_cast<std::uint64_t>(slice.index)}),
                                    &users);
    } else {
      ds.samples = std::move(encoded);
    }
    out.periods.push_back(std::move(ds));
  }

  out.schema.num_users = users.size();
  out.schema.num_items = items.size();
  for (const auto& v : user_side_vocab) out.schema.user_side_vocab.push_back(v.size());
  for (const auto& v : item_side_vocab) out.schema.item_side_vocab.push_back(v.size());
  return out;
}

// ---- shard files ------------------------------------------------------------
//
// period_<t>.tsv: header line, then one sample per line:
//   timestamp \t label \t user features \t item features \t user sequence
// feature lists are comma-joined vocabulary indices; the sequence may be empty.
// manifest.json records the scheme, schema and per-period boundaries/counts.

namespace detail {

inline std::string join(const std::vector<Index>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::vector<Index> parse_index_list(std::string_view s, const std::string& where) {
  std::vector<Index> out;
  if (s.empty()) return out;
  for (auto part : split(s, ',')) {
    Index v = 0;
    if (!parse_int(part, v)) throw DataError(where + ": bad index '" + std::string(part) + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace detail

inline std::string shard_name(int period) { return "period_" + std::to_string(period) + ".tsv"; }

inline void write_shard(const std::filesystem::path& path, const PeriodDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write shard " + path.string());
  os << "timestamp\tlabel\tuser_features\titem_features\tuser_sequence\n";
  for (const auto& s : ds.samples) {
    os << s.timestamp << '\t' << s.label << '\t' << detail::join(s.user_features) << '\t'
       << detail::join(s.item_features) << '\t' << detail::join(s.sequence) << '\n';
  }
}

inline std::vector<Sample> read_shard(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open shard " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<Sample> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto cols = detail::split(line, '\t');
    if (cols.size() != 5) throw DataError(where + ": expected 5 columns");
    Sample s;
    if (!detail::parse_int(cols[0], s.timestamp) || !detail::parse_int(cols[1], s.label)) {
      throw DataError(where + ": bad timestamp or label");
    }
    s.user_features = detail::parse_index_list(cols[2], where);
    s.item_features = detail::parse_index_list(cols[3], where);
    s.sequence = detail::parse_index_list(cols[4], where);
    out.push_back(std::move(s));
  }
  return out;
}

inline nlohmann::json schema_to_json(const FeatureSchema& s) {
  return {{"user_side", s.user_side},         {"item_side", s.item_side},
          {"num_users", s.num_users},         {"num_items", s.num_items},
          {"user_side_vocab", s.user_side_vocab}, {"item_side_vocab", s.item_side_vocab}};
}

inline FeatureSchema schema_from_json(const nlohmann::json& j) {
  FeatureSchema s;
  s.user_side = j.at("user_side").get<std::vector<std::string>>();
  s.item_side = j.at("item_side").get<std::vector<std::string>>();
  s.num_users = j.at("num_users").get<std::size_t>();
  s.num_items = j.at("num_items").get<std::size_t>();
  s.user_side_vocab = j.at("user_side_vocab").get<std::vector<std::size_t>>();
  s.item_side_vocab = j.at("item_side_vocab").get<std::vector<std::size_t>>();
  return s;
}

struct ShardManifest {
  std::string scheme;
  NegativeMode negatives = NegativeMode::kSample;
  std::uint64_t seed = 0;
  FeatureSchema schema;
  struct Entry {
    int period = 0;
    std::int64_t begin = 0, end = 0;
    std::size_t positives = 0, samples = 0;
    std::string file;
  };
  std::vector<Entry> periods;
};

inline void write_shards(const std::filesystem::path& dir, const PreparedStream& ps) {
  std::filesystem::create_directories(dir);
  nlohmann::json periods = nlohmann::json::array();
  for (const auto& ds : ps.periods) {
    write_shard(dir / shard_name(ds.period), ds);
    periods.push_back({{"period", ds.period},
                       {"begin", ds.begin},
                       {"end", ds.end},
                       {"positives", ds.positives()},
                       {"samples", ds.samples.size()},
                       {"file", shard_name(ds.period)}});
  }
  nlohmann::json m = {{"format", "asmg-shards-v1"},
                      {"scheme", ps.scheme},
                      {"negatives", to_string(ps.negatives)},
                      {"seed", ps.seed},
                      {"schema", schema_to_json(ps.schema)},
                      {"periods", periods}};
  std::ofstream os(dir / "manifest.json", std::ios::binary);
  os << m.dump(2) << '\n';
}

inline ShardManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw DataError("missing shard manifest in " + dir.string() + " (run prepare first)");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest.json: " + std::string(e.what()));
  }
  ShardManifest m;
  m.scheme = j.at("scheme").get<std::string>();
  m.negatives = parse_negative_mode(j.at("negatives").get<std::string>());
  m.seed = j.at("seed").get<std::uint64_t>();
  m.schema = schema_from_json(j.at("schema"));
  for (const auto& p : j.at("periods")) {
    m.periods.push_back({p.at("period").get<int>(), p.at("begin").get<std::int64_t>(),
                         p.at("end").get<std::int64_t>(), p.at("positives").get<std::size_t>(),
                         p.at("samples").get<std::size_t>(), p.at("file").get<std::string>()});
  }
  return m;
}

/// Loads every shard listed in the manifest, in period order.
inline std::vector<PeriodDataset> load_periods(const std::filesystem::path& dir, const ShardManifest& m) {
  std::vector<PeriodDataset> out;
  for (const auto& e : m.periods) {
    PeriodDataset ds;
    ds.period = e.period;
    ds.begin = e.begin;
    ds.end = e.end;
    ds.scheme = m.scheme;
    ds.samples = read_shard(dir / e.file);
    out.push_back(std::move(ds));
  }
  return out;
}

}  // namespace asmg
