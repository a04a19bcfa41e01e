#pragma once

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cares/common.hpp"

namespace cares {

// One parsed clickstream line.
struct RawEvent {
  std::string session_key;
  long long timestamp = 0;
  std::string item_key;
  std::string category_key;
};

// Column layout of the input log.
struct ColumnMap {
  char delimiter = ',';
  int session_col = 0;
  int time_col = 1;
  int item_col = 2;
  int category_col = 3;
  bool has_header = false;
};

struct IngestResult {
  std::vector<RawEvent> events;
  size_t skipped_lines = 0;
};

// Dense item/category indices over the retained catalog.
struct Vocab {
  std::vector<std::string> item_keys;                  // id -> key
  std::unordered_map<std::string, int> item_ids;       // key -> id
  std::vector<std::string> category_keys;              // id -> key
  std::unordered_map<std::string, int> category_ids;   // key -> id
  std::vector<int> item_category;                      // item id -> category id

  int num_items() const { return static_cast<int>(item_keys.size()); }
  int num_categories() const { return static_cast<int>(category_keys.size()); }

  int add_item(const std::string& key, int category) {
    auto [it, inserted] = item_ids.emplace(key, num_items());
    if (inserted) {
      item_keys.push_back(key);
      item_category.push_back(category);
    }
    return it->second;
  }

  int add_category(const std::string& key) {
    auto [it, inserted] = category_ids.emplace(key, num_categories());
    if (inserted) category_keys.push_back(key);
    return it->second;
  }

  uint64_t content_hash() const {
    Fnv1a h;
    for (const auto& k : item_keys) {
      h.update(k);
      h.update_value('\0');
    }
    for (const auto& k : category_keys) {
      h.update(k);
      h.update_value('\0');
    }
    for (int c : item_category) h.update_value(c);
    return h.digest();
  }
};

// A training/evaluation sample: a prefix and the ground-truth next item.
struct Session {
  std::vector<int> items;
  int target = -1;
};

struct PreprocessConfig {
  int min_item_freq = 5;
  int t_max = 20;
  long long split_boundary = 0;
  bool augment = true;
  bool augment_test = true;        // ignored when augment is false
  bool ignore_categories = false;  // ablation: single shared category

  uint64_t fingerprint() const {
    Fnv1a h;
    h.update_value(min_item_freq);
    h.update_value(t_max);
    h.update_value(split_boundary);
    h.update_value(augment);
    h.update_value(augment_test);
    h.update_value(ignore_categories);
    return h.digest();
  }
};

struct DatasetStats {
  size_t train_sessions = 0;  // sample counts, i.e. after augmentation
  size_t test_sessions = 0;
  int items = 0;
  int categories = 0;
  double avg_length = 0;  // mean filtered session length, pre-augmentation
};

struct Dataset {
  std::vector<Session> train;
  std::vector<Session> test;
  Vocab vocab;
  uint64_t config_fingerprint = 0;
  DatasetStats stats;
};

namespace detail {

// Session under construction: item ids in a provisional vocabulary plus the
// end-of-session timestamp needed for the temporal split.
struct TimedSession {
  std::vector<int> items;
  long long end_ts = 0;
};

inline std::vector<std::string_view> split_line(std::string_view line,
                                                char delim) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (true) {
    const size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

// Parses a delimited event log. Malformed lines (missing fields, empty keys,
// bad or negative timestamps) are counted and skipped.
inline IngestResult ingest_events(std::istream& in, const ColumnMap& cols) {
  if (!in.good()) throw UserError("unreadable input stream");
  const int max_col = std::max({cols.session_col, cols.time_col, cols.item_col,
                                cols.category_col});
  IngestResult result;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first && cols.has_header) {
      first = false;
      continue;
    }
    first = false;
    if (line.empty()) continue;
    const auto fields = detail::split_line(line, cols.delimiter);
    if (static_cast<int>(fields.size()) <= max_col) {
      ++result.skipped_lines;
      continue;
    }
    RawEvent ev;
    ev.session_key = std::string(fields[cols.session_col]);
    ev.item_key = std::string(fields[cols.item_col]);
    ev.category_key = std::string(fields[cols.category_col]);
    const auto ts = fields[cols.time_col];
    long long parsed = 0;
    auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), parsed);
    if (ec != std::errc{} || ptr != ts.data() + ts.size() || parsed < 0 ||
        ev.session_key.empty() || ev.item_key.empty() ||
        ev.category_key.empty()) {
      ++result.skipped_lines;
      continue;
    }
    ev.timestamp = parsed;
    result.events.push_back(std::move(ev));
  }
  return result;
}

// Groups events into sessions ordered by (timestamp, input order) and builds
// the provisional vocabulary. The session list is returned in chronological
// order of session end, which later fixes item id assignment. An item seen
// with several categories keeps the first one; the conflict count is
// reported through *category_conflicts when given.
inline std::vector<detail::TimedSession> build_sessions(
    const std::vector<RawEvent>& events, Vocab& vocab,
    size_t* category_conflicts = nullptr) {
  struct Entry {
    long long ts;
    size_t order;
    int item;
  };
  std::unordered_map<std::string, std::vector<Entry>> groups;
  std::vector<const std::string*> key_order;
  size_t conflicts = 0;
  for (size_t i = 0; i < events.size(); ++i) {
    const auto& ev = events[i];
    const int cat = vocab.add_category(ev.category_key);
    const int item = vocab.add_item(ev.item_key, cat);
    if (vocab.item_category[static_cast<size_t>(item)] != cat) ++conflicts;
    auto [it, inserted] = groups.try_emplace(ev.session_key);
    if (inserted) key_order.push_back(&it->first);
    it->second.push_back(Entry{ev.timestamp, i, item});
  }
  if (category_conflicts) *category_conflicts = conflicts;

  std::vector<detail::TimedSession> sessions;
  sessions.reserve(groups.size());
  std::vector<size_t> first_seen;  // parallel to sessions, for stable order
  for (const auto* key : key_order) {
    auto& entries = groups[*key];
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.ts < b.ts; });
    detail::TimedSession s;
    s.items.reserve(entries.size());
    for (const auto& e : entries) s.items.push_back(e.item);
    s.end_ts = entries.back().ts;
    first_seen.push_back(entries.front().order);
    sessions.push_back(std::move(s));
  }
  // Chronological by session end; ties keep input appearance order.
  std::vector<size_t> order(sessions.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (sessions[a].end_ts != sessions[b].end_ts)
      return sessions[a].end_ts < sessions[b].end_ts;
    return first_seen[a] < first_seen[b];
  });
  std::vector<detail::TimedSession> sorted;
  sorted.reserve(sessions.size());
  for (size_t i : order) sorted.push_back(std::move(sessions[i]));
  return sorted;
}

// A session is test iff its last event is strictly after the boundary.
inline std::pair<std::vector<detail::TimedSession>,
                 std::vector<detail::TimedSession>>
split_by_time(const std::vector<detail::TimedSession>& sessions,
              long long boundary, std::string* warning = nullptr) {
  std::pair<std::vector<detail::TimedSession>, std::vector<detail::TimedSession>>
      out;
  for (const auto& s : sessions) {
    (s.end_ts > boundary ? out.second : out.first).push_back(s);
  }
  if (warning) {
    warning->clear();
    if (!sessions.empty()) {
      if (out.first.empty())
        *warning = "split boundary precedes all sessions; train side is empty";
      else if (out.second.empty())
        *warning = "split boundary follows all sessions; test side is empty";
    }
  }
  return out;
}

// Expands a session into (prefix, next-item) samples, one per split point.
inline std::vector<Session> augment(const std::vector<int>& items) {
  std::vector<Session> out;
  if (items.size() < 2) return out;
  for (size_t k = items.size() - 1; k >= 1; --k) {
    Session s;
    s.items.assign(items.begin(), items.begin() + static_cast<long>(k));
    s.target = items[k];
    out.push_back(std::move(s));
  }
  return out;
}

// Applies the retention rules to a fixed point: drop items whose train
// frequency is below the threshold or that never occur in train, then drop
// sessions shorter than two events, and repeat until stable. Surviving
// sessions are truncated to their most recent t_max items, re-indexed into a
// compact vocabulary, and expanded into samples per the augmentation policy.
inline Dataset filter_dataset(std::vector<detail::TimedSession> train,
                              std::vector<detail::TimedSession> test,
                              const Vocab& raw_vocab,
                              const PreprocessConfig& config) {
  CARES_CHECK(config.min_item_freq >= 1);
  CARES_CHECK(config.t_max >= 2);
  const size_t raw_items = raw_vocab.item_keys.size();
  std::vector<bool> keep(raw_items, true);

  auto strip = [&](std::vector<detail::TimedSession>& sessions) {
    bool changed = false;
    for (auto& s : sessions) {
      const size_t before = s.items.size();
      std::erase_if(s.items, [&](int id) { return !keep[static_cast<size_t>(id)]; });
      changed |= s.items.size() != before;
    }
    const size_t before = sessions.size();
    std::erase_if(sessions,
                  [](const detail::TimedSession& s) { return s.items.size() < 2; });
    return changed || sessions.size() != before;
  };

  for (;;) {
    std::vector<long long> freq(raw_items, 0);
    for (const auto& s : train)
      for (int id : s.items) ++freq[static_cast<size_t>(id)];
    bool changed = false;
    for (size_t i = 0; i < raw_items; ++i) {
      if (keep[i] && freq[i] < config.min_item_freq) {
        keep[i] = false;
        changed = true;
      }
    }
    const bool t1 = strip(train);
    const bool t2 = strip(test);
    if (!changed && !t1 && !t2) break;
  }
  if (train.empty()) throw UserError("empty dataset after filtering");

  for (auto* side : {&train, &test})
    for (auto& s : *side)
      if (s.items.size() > static_cast<size_t>(config.t_max))
        s.items.erase(s.items.begin(),
                      s.items.end() - static_cast<long>(config.t_max));

  // Compact ids by first appearance in the (chronologically ordered) train
  // sessions. Categories are compacted the same way.
  Dataset ds;
  std::vector<int> remap(raw_items, -1);
  auto remap_item = [&](int old_id) {
    int& slot = remap[static_cast<size_t>(old_id)];
    if (slot < 0) {
      const std::string& cat_key =
          raw_vocab
              .category_keys[static_cast<size_t>(
                  raw_vocab.item_category[static_cast<size_t>(old_id)])];
      const int cat = ds.vocab.add_category(cat_key);
      slot = ds.vocab.add_item(raw_vocab.item_keys[static_cast<size_t>(old_id)],
                               cat);
    }
    return slot;
  };
  for (auto& s : train)
    for (auto& id : s.items) id = remap_item(id);
  for (auto& s : test)
    for (auto& id : s.items) {
      CARES_CHECK_MSG(remap[static_cast<size_t>(id)] >= 0,
                      "test-only item survived filtering");
      id = remap[static_cast<size_t>(id)];
    }

  size_t total_len = 0;
  size_t full_count = train.size() + test.size();
  auto expand = [&](const std::vector<detail::TimedSession>& sessions,
                    bool do_augment) {
    std::vector<Session> out;
    for (const auto& s : sessions) {
      if (do_augment) {
        for (auto& sample : augment(s.items)) out.push_back(std::move(sample));
      } else {
        Session sample;
        sample.items.assign(s.items.begin(), s.items.end() - 1);
        sample.target = s.items.back();
        out.push_back(std::move(sample));
      }
      total_len += s.items.size();
    }
    return out;
  };
  ds.train = expand(train, config.augment);
  ds.test = expand(test, config.augment && config.augment_test);
  ds.config_fingerprint = config.fingerprint();
  ds.stats.train_sessions = ds.train.size();
  ds.stats.test_sessions = ds.test.size();
  ds.stats.items = ds.vocab.num_items();
  ds.stats.categories = ds.vocab.num_categories();
  ds.stats.avg_length =
      full_count == 0 ? 0.0
                      : static_cast<double>(total_len) /
                            static_cast<double>(full_count);
  return ds;
}

// Full pipeline: parse, group, split, filter, augment.
inline Dataset preprocess(std::istream& in, const ColumnMap& cols,
                          const PreprocessConfig& config,
                          size_t* skipped_lines = nullptr,
                          std::string* split_warning = nullptr) {
  IngestResult ingested = ingest_events(in, cols);
  if (skipped_lines) *skipped_lines = ingested.skipped_lines;
  if (config.ignore_categories)
    for (auto& ev : ingested.events) ev.category_key = "_all";
  Vocab raw_vocab;
  auto sessions = build_sessions(ingested.events, raw_vocab);
  auto [train, test] = split_by_time(sessions, config.split_boundary,
                                     split_warning);
  return filter_dataset(std::move(train), std::move(test), raw_vocab, config);
}

// ---- dataset files -------------------------------------------------------
//
// <prefix>.train.jsonl / <prefix>.test.jsonl  one sample per line
// <prefix>.vocab.json                         key<->id<->category tables
// <prefix>.stats.json                         corpus statistics

inline void write_samples(const std::string& path,
                          const std::vector<Session>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  for (const auto& s : samples) {
    out << "{\"items\":[";
    for (size_t i = 0; i < s.items.size(); ++i)
      out << (i ? "," : "") << s.items[i];
    out << "],\"target\":" << s.target << "}\n";
  }
}

inline std::vector<Session> read_samples(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot read " + path);
  std::vector<Session> samples;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("items") || !j.contains("target"))
      throw UserError(path + ":" + std::to_string(lineno) + ": bad record");
    Session s;
    s.items = j["items"].get<std::vector<int>>();
    s.target = j["target"].get<int>();
    samples.push_back(std::move(s));
  }
  return samples;
}

inline void write_vocab(const std::string& path, const Vocab& vocab,
                        uint64_t config_fingerprint) {
  nlohmann::ordered_json j;
  j["config_fingerprint"] = config_fingerprint;
  j["categories"] = vocab.category_keys;
  auto items = nlohmann::ordered_json::array();
  for (size_t i = 0; i < vocab.item_keys.size(); ++i)
    items.push_back({{"key", vocab.item_keys[i]},
                     {"category", vocab.item_category[i]}});
  j["items"] = std::move(items);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  out << j.dump(2) << "\n";
}

inline Vocab read_vocab(const std::string& path,
                        uint64_t* config_fingerprint = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw UserError("corrupt vocab file " + path);
  Vocab vocab;
  for (const auto& k : j.at("categories")) vocab.add_category(k.get<std::string>());
  for (const auto& rec : j.at("items"))
    vocab.add_item(rec.at("key").get<std::string>(), rec.at("category").get<int>());
  if (config_fingerprint)
    *config_fingerprint = j.value("config_fingerprint", uint64_t{0});
  return vocab;
}

inline void write_stats(const std::string& path, const DatasetStats& stats) {
  nlohmann::ordered_json j;
  j["train_sessions"] = stats.train_sessions;
  j["test_sessions"] = stats.test_sessions;
  j["items"] = stats.items;
  j["categories"] = stats.categories;
  j["avg_length"] = stats.avg_length;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  out << j.dump(2) << "\n";
}

inline void write_dataset(const std::string& prefix, const Dataset& ds) {
  write_samples(prefix + ".train.jsonl", ds.train);
  write_samples(prefix + ".test.jsonl", ds.test);
  write_vocab(prefix + ".vocab.json", ds.vocab, ds.config_fingerprint);
  write_stats(prefix + ".stats.json", ds.stats);
}

inline Dataset read_dataset(const std::string& prefix) {
  Dataset ds;
  ds.train = read_samples(prefix + ".train.jsonl");
  ds.test = read_samples(prefix + ".test.jsonl");
  ds.vocab = read_vocab(prefix + ".vocab.json", &ds.config_fingerprint);
  for (const auto* side : {&ds.train, &ds.test})
    for (const auto& s : *side) {
      CARES_CHECK_MSG(!s.items.empty(), "empty sample in dataset file");
      for (int id : s.items)
        if (id < 0 || id >= ds.vocab.num_items())
          throw UserError(prefix + ": item id out of vocab range");
      if (s.target < 0 || s.target >= ds.vocab.num_items())
        throw UserError(prefix + ": target id out of vocab range");
    }
  return ds;
}

}  // namespace cares
