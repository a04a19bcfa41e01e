#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "cares/common.hpp"
#include "cares/session_data.hpp"

namespace cares {

struct GraphConfig {
  int epsilon = 2;     // co-occurrence window radius
  int top_n = 12;      // incoming edges kept per (node, relation)
  int top_q = 5;       // named category-pair relations
  double alpha = 0.75; // frequency damping exponent

  void validate() const {
    if (epsilon < 1) throw UserError("epsilon must be >= 1");
    if (top_n < 1) throw UserError("top-n must be >= 1");
    if (top_q < 0) throw UserError("top-q must be >= 0");
    if (!(alpha > 0.0 && alpha <= 1.0))
      throw UserError("alpha must be in (0, 1]");
  }
};

// Relation typing over ordered category pairs. The key order is
// (destination category, source category): the edge j -> i that feeds item
// i's aggregation carries the relation of pair (c_i, c_j). Pairs outside
// the named top-Q fall back to Same (equal categories) or Drift.
struct RelationTable {
  struct NamedRelation {
    int cat_dst = 0;
    int cat_src = 0;
    uint64_t cooc = 0;
  };
  std::vector<NamedRelation> named;  // rank order; relation id = index

  int same_id() const { return static_cast<int>(named.size()); }
  int drift_id() const { return static_cast<int>(named.size()) + 1; }
  int self_id() const { return static_cast<int>(named.size()) + 2; }
  int count() const { return static_cast<int>(named.size()) + 3; }

  int lookup(int cat_dst, int cat_src) const {
    for (size_t i = 0; i < named.size(); ++i)
      if (named[i].cat_dst == cat_dst && named[i].cat_src == cat_src)
        return static_cast<int>(i);
    return cat_dst == cat_src ? same_id() : drift_id();
  }
};

struct CrossSessionGraph {
  struct Edge {
    int src = 0;
    int dst = 0;
    int rel = 0;
    double weight = 0;
  };

  int num_nodes = 0;
  RelationTable relations;
  std::vector<Edge> edges;      // sorted by (dst, rel, src)
  std::vector<size_t> in_begin; // CSR over dst: edges[in_begin[v]..in_begin[v+1])

  void build_index() {
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
      if (a.dst != b.dst) return a.dst < b.dst;
      if (a.rel != b.rel) return a.rel < b.rel;
      return a.src < b.src;
    });
    in_begin.assign(static_cast<size_t>(num_nodes) + 1, 0);
    for (const auto& e : edges) ++in_begin[static_cast<size_t>(e.dst) + 1];
    for (size_t v = 1; v < in_begin.size(); ++v) in_begin[v] += in_begin[v - 1];
  }

  uint64_t content_hash() const;
};

// Pairwise co-occurrence counts within the window, plus per-item totals.
struct CooccurrenceCounts {
  std::map<std::pair<int, int>, long long> pair_count;
  std::vector<long long> item_freq;
};

// Counts, for each occurrence of an item at position k, every other
// position within distance epsilon. Repeated items count per occurrence;
// an item within range of its own other occurrence yields a (v, v) entry,
// which never becomes an edge.
inline CooccurrenceCounts epsilon_cooccurrence(
    const std::vector<Session>& train, int num_items, int epsilon) {
  CARES_CHECK(epsilon >= 1);
  CooccurrenceCounts out;
  out.item_freq.assign(static_cast<size_t>(num_items), 0);
  auto scan = [&](const std::vector<int>& seq) {
    const long n = static_cast<long>(seq.size());
    for (long k = 0; k < n; ++k) {
      ++out.item_freq[static_cast<size_t>(seq[static_cast<size_t>(k)])];
      const long lo = std::max<long>(0, k - epsilon);
      const long hi = std::min<long>(n - 1, k + epsilon);
      for (long j = lo; j <= hi; ++j) {
        if (j == k) continue;
        ++out.pair_count[{seq[static_cast<size_t>(k)],
                          seq[static_cast<size_t>(j)]}];
      }
    }
  };
  for (const auto& s : train) scan(s.items);
  return out;
}

// Co-occurrence damped by both endpoint frequencies (natural log).
inline double edge_weight(long long cooc, long long freq_i, long long freq_j,
                          double alpha) {
  CARES_CHECK(freq_i >= 1 && freq_j >= 1 && cooc >= 0);
  if (cooc == 0) return 0.0;
  const double di = alpha * std::log(static_cast<double>(freq_i)) + 1.0;
  const double dj = alpha * std::log(static_cast<double>(freq_j)) + 1.0;
  return static_cast<double>(cooc) / (di * dj);
}

// Ranks ordered category pairs by total co-occurrence of distinct-item
// pairs; the top Q become named relations. Ties break by (count desc,
// pair id asc) with pair id in (cat_dst, cat_src) lexicographic order.
inline RelationTable build_relation_table(const CooccurrenceCounts& counts,
                                          const Vocab& vocab, int top_q) {
  std::map<std::pair<int, int>, uint64_t> pair_totals;
  for (const auto& [pair, c] : counts.pair_count) {
    const auto [item_i, item_j] = pair;
    if (item_i == item_j) continue;
    const int cd = vocab.item_category[static_cast<size_t>(item_i)];
    const int cs = vocab.item_category[static_cast<size_t>(item_j)];
    pair_totals[{cd, cs}] += static_cast<uint64_t>(c);
  }
  std::vector<RelationTable::NamedRelation> ranked;
  ranked.reserve(pair_totals.size());
  for (const auto& [pair, total] : pair_totals)
    ranked.push_back({pair.first, pair.second, total});
  std::sort(ranked.begin(), ranked.end(),
            [](const RelationTable::NamedRelation& a,
               const RelationTable::NamedRelation& b) {
              if (a.cooc != b.cooc) return a.cooc > b.cooc;
              if (a.cat_dst != b.cat_dst) return a.cat_dst < b.cat_dst;
              return a.cat_src < b.cat_src;
            });
  RelationTable table;
  const size_t q = std::min<size_t>(static_cast<size_t>(top_q), ranked.size());
  table.named.assign(ranked.begin(), ranked.begin() + static_cast<long>(q));
  return table;
}

// Builds the full graph: one edge j -> i per co-occurring distinct item
// pair, typed by (c_i, c_j), then pruned to the top_n heaviest incoming
// edges per (destination, relation) with ties broken by source id.
inline CrossSessionGraph build_graph(const Dataset& dataset,
                                     const GraphConfig& config) {
  config.validate();
  if (dataset.train.empty()) throw UserError("cannot build graph: no train data");
  auto counts = epsilon_cooccurrence(dataset.train, dataset.vocab.num_items(),
                                     config.epsilon);

  CrossSessionGraph g;
  g.num_nodes = dataset.vocab.num_items();
  g.relations = build_relation_table(counts, dataset.vocab, config.top_q);

  // bucket candidate edges per (dst, rel)
  std::map<std::pair<int, int>, std::vector<CrossSessionGraph::Edge>> buckets;
  for (const auto& [pair, c] : counts.pair_count) {
    const auto [dst, src] = pair;  // cooc(v_i, v_j) keyed as (i=dst, j=src)
    if (dst == src) continue;
    const double w =
        edge_weight(c, counts.item_freq[static_cast<size_t>(dst)],
                    counts.item_freq[static_cast<size_t>(src)], config.alpha);
    CARES_CHECK(w > 0.0);
    const int rel =
        g.relations.lookup(dataset.vocab.item_category[static_cast<size_t>(dst)],
                           dataset.vocab.item_category[static_cast<size_t>(src)]);
    buckets[{dst, rel}].push_back({src, dst, rel, w});
  }
  for (auto& [key, bucket] : buckets) {
    std::sort(bucket.begin(), bucket.end(),
              [](const CrossSessionGraph::Edge& a,
                 const CrossSessionGraph::Edge& b) {
                if (a.weight != b.weight) return a.weight > b.weight;
                return a.src < b.src;
              });
    const size_t keep = std::min<size_t>(bucket.size(),
                                         static_cast<size_t>(config.top_n));
    g.edges.insert(g.edges.end(), bucket.begin(),
                   bucket.begin() + static_cast<long>(keep));
  }
  g.build_index();
  return g;
}

// Subgraph over the hop-closure of a set of seed items, with local ids.
struct Subgraph {
  std::vector<int> nodes;           // global item ids, ascending
  std::vector<int> local_of_cache;  // global -> local or -1
  struct Edge {
    int src = 0;  // local ids
    int dst = 0;
    int rel = 0;
    double weight = 0;
  };
  std::vector<Edge> edges;  // sorted by (dst, rel, src), mirroring the parent

  int local_of(int global_id) const {
    return local_of_cache[static_cast<size_t>(global_id)];
  }
  int size() const { return static_cast<int>(nodes.size()); }
};

// Nodes reachable from the batch items by walking incoming edges backwards
// up to `hops` steps, plus every parent edge inside that node set.
inline Subgraph subgraph_for_batch(const CrossSessionGraph& graph,
                                   const std::vector<int>& batch_items,
                                   int hops) {
  CARES_CHECK(hops >= 0);
  std::vector<bool> in_set(static_cast<size_t>(graph.num_nodes), false);
  std::vector<int> frontier;
  for (int v : batch_items) {
    CARES_CHECK_MSG(v >= 0 && v < graph.num_nodes, "batch item outside graph");
    if (!in_set[static_cast<size_t>(v)]) {
      in_set[static_cast<size_t>(v)] = true;
      frontier.push_back(v);
    }
  }
  for (int hop = 0; hop < hops && !frontier.empty(); ++hop) {
    std::vector<int> next;
    for (int v : frontier) {
      for (size_t e = graph.in_begin[static_cast<size_t>(v)];
           e < graph.in_begin[static_cast<size_t>(v) + 1]; ++e) {
        const int src = graph.edges[e].src;
        if (!in_set[static_cast<size_t>(src)]) {
          in_set[static_cast<size_t>(src)] = true;
          next.push_back(src);
        }
      }
    }
    frontier = std::move(next);
  }

  Subgraph sub;
  sub.local_of_cache.assign(static_cast<size_t>(graph.num_nodes), -1);
  for (int v = 0; v < graph.num_nodes; ++v)
    if (in_set[static_cast<size_t>(v)]) {
      sub.local_of_cache[static_cast<size_t>(v)] =
          static_cast<int>(sub.nodes.size());
      sub.nodes.push_back(v);
    }
  for (int v : sub.nodes) {
    for (size_t e = graph.in_begin[static_cast<size_t>(v)];
         e < graph.in_begin[static_cast<size_t>(v) + 1]; ++e) {
      const auto& edge = graph.edges[e];
      const int src_local = sub.local_of(edge.src);
      if (src_local < 0) continue;
      sub.edges.push_back(
          {src_local, sub.local_of(edge.dst), edge.rel, edge.weight});
    }
  }
  return sub;
}

// ---- serialization ---------------------------------------------------------
//
// Binary layout: magic "CSGR", version u32, m u32, edge count u64, named
// relation count u16, named relation records (cat_dst u32, cat_src u32,
// cooc u64), edge records (src u32, dst u32, rel u16, weight f32).

namespace detail {

constexpr char kGraphMagic[4] = {'C', 'S', 'G', 'R'};
constexpr uint32_t kGraphVersion = 1;

template <typename T>
void put(std::string& buf, const T& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  const char* p = reinterpret_cast<const char*>(&v);
  buf.append(p, sizeof(T));
}

template <typename T>
T take(const std::string& buf, size_t& pos) {
  if (pos + sizeof(T) > buf.size())
    throw UserError("corrupt graph file: truncated");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string serialize_graph(const CrossSessionGraph& g) {
  std::string buf;
  buf.append(detail::kGraphMagic, 4);
  detail::put(buf, detail::kGraphVersion);
  detail::put(buf, static_cast<uint32_t>(g.num_nodes));
  detail::put(buf, static_cast<uint64_t>(g.edges.size()));
  detail::put(buf, static_cast<uint16_t>(g.relations.named.size()));
  for (const auto& r : g.relations.named) {
    detail::put(buf, static_cast<uint32_t>(r.cat_dst));
    detail::put(buf, static_cast<uint32_t>(r.cat_src));
    detail::put(buf, static_cast<uint64_t>(r.cooc));
  }
  for (const auto& e : g.edges) {
    detail::put(buf, static_cast<uint32_t>(e.src));
    detail::put(buf, static_cast<uint32_t>(e.dst));
    detail::put(buf, static_cast<uint16_t>(e.rel));
    detail::put(buf, static_cast<float>(e.weight));
  }
  return buf;
}

inline uint64_t CrossSessionGraph::content_hash() const {
  Fnv1a h;
  h.update(serialize_graph(*this));
  return h.digest();
}

inline void write_graph(const std::string& path, const CrossSessionGraph& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  const std::string buf = serialize_graph(g);
  out.write(buf.data(), static_cast<long>(buf.size()));
}

inline CrossSessionGraph read_graph(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot read " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  size_t pos = 0;
  if (buf.size() < 4 || std::memcmp(buf.data(), detail::kGraphMagic, 4) != 0)
    throw UserError("corrupt graph file: bad magic in " + path);
  pos = 4;
  const auto version = detail::take<uint32_t>(buf, pos);
  if (version != detail::kGraphVersion)
    throw UserError("unsupported graph file version " + std::to_string(version));
  CrossSessionGraph g;
  g.num_nodes = static_cast<int>(detail::take<uint32_t>(buf, pos));
  const uint64_t edge_count = detail::take<uint64_t>(buf, pos);
  const uint16_t named = detail::take<uint16_t>(buf, pos);
  for (uint16_t i = 0; i < named; ++i) {
    RelationTable::NamedRelation r;
    r.cat_dst = static_cast<int>(detail::take<uint32_t>(buf, pos));
    r.cat_src = static_cast<int>(detail::take<uint32_t>(buf, pos));
    r.cooc = detail::take<uint64_t>(buf, pos);
    g.relations.named.push_back(r);
  }
  g.edges.reserve(edge_count);
  for (uint64_t i = 0; i < edge_count; ++i) {
    CrossSessionGraph::Edge e;
    e.src = static_cast<int>(detail::take<uint32_t>(buf, pos));
    e.dst = static_cast<int>(detail::take<uint32_t>(buf, pos));
    e.rel = detail::take<uint16_t>(buf, pos);
    e.weight = detail::take<float>(buf, pos);
    if (e.src < 0 || e.src >= g.num_nodes || e.dst < 0 || e.dst >= g.num_nodes ||
        e.rel >= g.relations.count())
      throw UserError("corrupt graph file: edge out of range in " + path);
    g.edges.push_back(e);
  }
  if (pos != buf.size()) throw UserError("corrupt graph file: trailing bytes");
  g.build_index();
  return g;
}

inline nlohmann::ordered_json graph_to_json(const CrossSessionGraph& g,
                                            bool include_edges) {
  nlohmann::ordered_json j;
  j["nodes"] = g.num_nodes;
  j["edges"] = g.edges.size();
  j["relation_count"] = g.relations.count();
  auto named = nlohmann::ordered_json::array();
  for (size_t i = 0; i < g.relations.named.size(); ++i) {
    const auto& r = g.relations.named[i];
    named.push_back({{"relation", i},
                     {"category_dst", r.cat_dst},
                     {"category_src", r.cat_src},
                     {"cooccurrence", r.cooc}});
  }
  j["named_relations"] = std::move(named);
  j["same_relation"] = g.relations.same_id();
  j["drift_relation"] = g.relations.drift_id();
  j["self_relation"] = g.relations.self_id();
  if (include_edges) {
    auto edges = nlohmann::ordered_json::array();
    for (const auto& e : g.edges)
      edges.push_back({{"src", e.src},
                       {"dst", e.dst},
                       {"rel", e.rel},
                       {"weight", e.weight}});
    j["edge_list"] = std::move(edges);
  }
  return j;
}

}  // namespace cares
