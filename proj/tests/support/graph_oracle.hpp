#pragma once

// Brute-force construction of the cross-session graph, kept deliberately
// independent of the library implementation: dense count matrices, explicit
// position-pair enumeration, full sorts instead of incremental pruning.

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>
#include <vector>

#include "cares/graph.hpp"
#include "cares/session_data.hpp"

namespace test_support {

struct OracleEdge {
  int src, dst, rel;
  double weight;
};

struct OracleGraph {
  std::vector<OracleEdge> edges;  // sorted by (dst, rel, src)
  std::vector<std::pair<std::pair<int, int>, unsigned long long>> named;
};

inline OracleGraph brute_force_graph(const cares::Dataset& ds,
                                     const cares::GraphConfig& cfg) {
  const int m = ds.vocab.num_items();
  std::vector<std::vector<long long>> cooc(
      static_cast<size_t>(m), std::vector<long long>(static_cast<size_t>(m), 0));
  std::vector<long long> freq(static_cast<size_t>(m), 0);
  for (const auto& s : ds.train) {
    const int n = static_cast<int>(s.items.size());
    for (int a = 0; a < n; ++a) {
      ++freq[static_cast<size_t>(s.items[static_cast<size_t>(a)])];
      for (int b = 0; b < n; ++b) {
        if (a == b) continue;
        if (std::abs(a - b) <= cfg.epsilon)
          ++cooc[static_cast<size_t>(s.items[static_cast<size_t>(a)])]
                [static_cast<size_t>(s.items[static_cast<size_t>(b)])];
      }
    }
  }

  // category-pair totals over distinct-item pairs, orientation (c_dst, c_src)
  std::map<std::pair<int, int>, unsigned long long> totals;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      if (i == j || cooc[static_cast<size_t>(i)][static_cast<size_t>(j)] == 0)
        continue;
      totals[{ds.vocab.item_category[static_cast<size_t>(i)],
              ds.vocab.item_category[static_cast<size_t>(j)]}] +=
          static_cast<unsigned long long>(
              cooc[static_cast<size_t>(i)][static_cast<size_t>(j)]);
    }
  std::vector<std::pair<std::pair<int, int>, unsigned long long>> ranked(
      totals.begin(), totals.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  OracleGraph out;
  const size_t q = std::min<size_t>(static_cast<size_t>(cfg.top_q), ranked.size());
  out.named.assign(ranked.begin(), ranked.begin() + static_cast<long>(q));

  auto relation_of = [&](int cd, int cs) {
    for (size_t r = 0; r < out.named.size(); ++r)
      if (out.named[r].first == std::make_pair(cd, cs))
        return static_cast<int>(r);
    const int same = static_cast<int>(out.named.size());
    return cd == cs ? same : same + 1;
  };

  std::vector<OracleEdge> all;
  for (int dst = 0; dst < m; ++dst)
    for (int src = 0; src < m; ++src) {
      if (dst == src) continue;
      const long long c =
          cooc[static_cast<size_t>(dst)][static_cast<size_t>(src)];
      if (c == 0) continue;
      const double w =
          static_cast<double>(c) /
          ((cfg.alpha * std::log(static_cast<double>(
                            freq[static_cast<size_t>(dst)])) +
            1.0) *
           (cfg.alpha * std::log(static_cast<double>(
                            freq[static_cast<size_t>(src)])) +
            1.0));
      all.push_back({src, dst,
                     relation_of(ds.vocab.item_category[static_cast<size_t>(dst)],
                                 ds.vocab.item_category[static_cast<size_t>(src)]),
                     w});
    }

  // prune: keep top_n per (dst, rel) by weight, ties by src asc
  std::map<std::pair<int, int>, std::vector<OracleEdge>> grouped;
  for (const auto& e : all) grouped[{e.dst, e.rel}].push_back(e);
  for (auto& [key, group] : grouped) {
    std::sort(group.begin(), group.end(), [](const OracleEdge& a,
                                             const OracleEdge& b) {
      if (a.weight != b.weight) return a.weight > b.weight;
      return a.src < b.src;
    });
    if (group.size() > static_cast<size_t>(cfg.top_n))
      group.resize(static_cast<size_t>(cfg.top_n));
    out.edges.insert(out.edges.end(), group.begin(), group.end());
  }
  std::sort(out.edges.begin(), out.edges.end(),
            [](const OracleEdge& a, const OracleEdge& b) {
              return std::tie(a.dst, a.rel, a.src) <
                     std::tie(b.dst, b.rel, b.src);
            });
  return out;
}

// BFS over reversed edges from the seed set, used to validate subgraphs.
inline std::vector<int> bfs_incoming_closure(const cares::CrossSessionGraph& g,
                                             const std::vector<int>& seeds,
                                             int hops) {
  std::vector<int> dist(static_cast<size_t>(g.num_nodes), -1);
  std::vector<int> queue;
  for (int s : seeds)
    if (dist[static_cast<size_t>(s)] < 0) {
      dist[static_cast<size_t>(s)] = 0;
      queue.push_back(s);
    }
  for (size_t qi = 0; qi < queue.size(); ++qi) {
    const int v = queue[qi];
    if (dist[static_cast<size_t>(v)] == hops) continue;
    for (const auto& e : g.edges)
      if (e.dst == v && dist[static_cast<size_t>(e.src)] < 0) {
        dist[static_cast<size_t>(e.src)] = dist[static_cast<size_t>(v)] + 1;
        queue.push_back(e.src);
      }
  }
  std::vector<int> nodes;
  for (int v = 0; v < g.num_nodes; ++v)
    if (dist[static_cast<size_t>(v)] >= 0) nodes.push_back(v);
  return nodes;
}

// Random micro-corpora for oracle comparisons.
inline cares::Dataset random_micro_dataset(cares::Rng& rng, int max_sessions,
                                           int max_len, int max_items,
                                           int max_categories) {
  cares::Dataset ds;
  const int n_items =
      2 + static_cast<int>(rng.next_below(static_cast<uint64_t>(max_items - 1)));
  const int n_cats = 1 + static_cast<int>(rng.next_below(
                             static_cast<uint64_t>(max_categories)));
  for (int i = 0; i < n_items; ++i) {
    const int cat = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_cats)));
    const std::string cat_key = "c" + std::to_string(cat);
    ds.vocab.add_item("i" + std::to_string(i), ds.vocab.add_category(cat_key));
  }
  const int n_sessions =
      1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(max_sessions)));
  for (int s = 0; s < n_sessions; ++s) {
    cares::Session sess;
    const int len =
        2 + static_cast<int>(rng.next_below(static_cast<uint64_t>(max_len - 1)));
    for (int k = 0; k < len; ++k)
      sess.items.push_back(
          static_cast<int>(rng.next_below(static_cast<uint64_t>(n_items))));
    sess.target =
        static_cast<int>(rng.next_below(static_cast<uint64_t>(n_items)));
    ds.train.push_back(std::move(sess));
  }
  return ds;
}

}  // namespace test_support
