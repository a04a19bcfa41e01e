#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "cares/graph.hpp"
#include "support/graph_oracle.hpp"
#include "support/tmpdir.hpp"

using namespace cares;

namespace {

Dataset tiny_dataset(std::vector<std::vector<int>> sessions,
                     std::vector<int> item_cats) {
  Dataset ds;
  std::set<int> cats(item_cats.begin(), item_cats.end());
  for (int c : cats) ds.vocab.add_category("c" + std::to_string(c));
  for (size_t i = 0; i < item_cats.size(); ++i)
    ds.vocab.add_item("i" + std::to_string(i),
                      ds.vocab.category_ids.at("c" + std::to_string(item_cats[i])));
  for (auto& items : sessions) {
    Session s;
    s.items = std::move(items);
    s.target = s.items.back();
    ds.train.push_back(std::move(s));
  }
  return ds;
}

}  // namespace

TEST_CASE("epsilon co-occurrence on minimal cases") {
  auto ds = tiny_dataset({{0, 1}}, {0, 0});
  auto c = epsilon_cooccurrence(ds.train, 2, 1);
  CHECK(c.pair_count.at({0, 1}) == 1);
  CHECK(c.pair_count.at({1, 0}) == 1);
  CHECK(c.item_freq[0] == 1);
  CHECK(c.item_freq[1] == 1);

  auto ds3 = tiny_dataset({{0, 1, 2}}, {0, 0, 0});
  auto c3 = epsilon_cooccurrence(ds3.train, 3, 1);
  CHECK(c3.pair_count.at({0, 1}) == 1);
  CHECK(c3.pair_count.at({1, 0}) == 1);
  CHECK(c3.pair_count.at({1, 2}) == 1);
  CHECK(c3.pair_count.at({2, 1}) == 1);
  CHECK(c3.pair_count.count({0, 2}) == 0);

  auto dsr = tiny_dataset({{0, 1, 0}}, {0, 0});
  auto cr = epsilon_cooccurrence(dsr.train, 2, 1);
  CHECK(cr.pair_count.at({0, 1}) == 2);
  CHECK(cr.pair_count.at({1, 0}) == 2);
  CHECK(cr.item_freq[0] == 2);
  CHECK(cr.item_freq[1] == 1);
}

TEST_CASE("co-occurrence symmetry and epsilon monotonicity") {
  Rng rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    auto ds = test_support::random_micro_dataset(rng, 8, 6, 15, 4);
    auto c1 = epsilon_cooccurrence(ds.train, ds.vocab.num_items(), 1);
    auto c2 = epsilon_cooccurrence(ds.train, ds.vocab.num_items(), 2);
    for (const auto& [pair, count] : c1.pair_count) {
      CHECK(c1.pair_count.at({pair.second, pair.first}) == count);
      CHECK(c2.pair_count.at(pair) >= count);
    }
  }
}

TEST_CASE("edge weight formula") {
  CHECK(edge_weight(1, 1, 1, 0.75) == 1.0);
  CHECK(edge_weight(0, 3, 2, 0.75) == 0.0);
  // frozen from an independent high-precision evaluation
  CHECK(std::abs(edge_weight(2, 3, 2, 0.75) - 0.72145820497406311) < 1e-12);
}

TEST_CASE("relation table ranking and fallbacks") {
  // Q=0: everything is Same or Drift
  auto ds = tiny_dataset({{0, 1}, {1, 2}}, {0, 0, 1});
  auto counts = epsilon_cooccurrence(ds.train, 3, 1);
  auto t0 = build_relation_table(counts, ds.vocab, 0);
  CHECK(t0.named.empty());
  CHECK(t0.count() == 3);
  CHECK(t0.lookup(0, 0) == t0.same_id());
  CHECK(t0.lookup(0, 1) == t0.drift_id());

  // forced ranking: (c0,c0) has count 10, (c0,c1) count 4
  Dataset ds2 = tiny_dataset({}, {0, 0, 1});
  for (int rep = 0; rep < 5; ++rep) {
    Session s;
    s.items = {0, 1};
    s.target = 1;
    ds2.train.push_back(s);
  }
  for (int rep = 0; rep < 2; ++rep) {
    Session s;
    s.items = {2, 0};
    s.target = 0;
    ds2.train.push_back(s);
  }
  auto counts2 = epsilon_cooccurrence(ds2.train, 3, 1);
  auto t1 = build_relation_table(counts2, ds2.vocab, 1);
  REQUIRE(t1.named.size() == 1);
  CHECK(t1.named[0].cat_dst == 0);
  CHECK(t1.named[0].cat_src == 0);
  CHECK(t1.lookup(0, 1) == t1.drift_id());
  CHECK(t1.lookup(1, 0) == t1.drift_id());

  // saturation: Q larger than distinct pairs names everything
  auto t9 = build_relation_table(counts2, ds2.vocab, 99);
  CHECK(t9.named.size() == 3);  // (0,0), (0,1), (1,0)
}

TEST_CASE("build_graph composition on a single session") {
  auto ds = tiny_dataset({{0, 1}}, {0, 0});
  GraphConfig cfg;
  cfg.epsilon = 1;
  cfg.top_q = 0;
  auto g = build_graph(ds, cfg);
  REQUIRE(g.edges.size() == 2);
  for (const auto& e : g.edges) {
    CHECK(e.rel == g.relations.same_id());
    CHECK(e.weight == 1.0);
    CHECK(e.src != e.dst);
  }
}

TEST_CASE("pruning keeps the top-n heaviest incoming edges") {
  // one hub (item 0) co-occurring with 15 spokes at varying strengths
  std::vector<int> cats(16, 0);
  std::vector<std::vector<int>> sessions;
  for (int spoke = 1; spoke <= 15; ++spoke)
    for (int rep = 0; rep < spoke; ++rep) sessions.push_back({0, spoke});
  auto ds = tiny_dataset(std::move(sessions), cats);
  GraphConfig cfg;
  cfg.epsilon = 1;
  cfg.top_n = 12;
  cfg.top_q = 0;
  auto g = build_graph(ds, cfg);
  int incoming_hub = 0;
  std::set<int> kept;
  for (const auto& e : g.edges)
    if (e.dst == 0) {
      ++incoming_hub;
      kept.insert(e.src);
    }
  CHECK(incoming_hub == 12);
  // heaviest = most frequent co-occurrence, i.e. the largest spokes win;
  // frequency damping grows slower than the raw count
  for (int spoke = 4; spoke <= 15; ++spoke) CHECK(kept.count(spoke) == 1);
}

TEST_CASE("build_graph matches the brute-force oracle") {
  Rng rng(37);
  for (int trial = 0; trial < 60; ++trial) {
    auto ds = test_support::random_micro_dataset(rng, 8, 6, 15, 4);
    GraphConfig cfg;
    cfg.epsilon = 1 + static_cast<int>(rng.next_below(3));
    cfg.top_q = static_cast<int>(rng.next_below(3));
    cfg.top_n = rng.next_below(2) ? 2 : 12;
    auto g = build_graph(ds, cfg);
    auto oracle = test_support::brute_force_graph(ds, cfg);
    REQUIRE(g.edges.size() == oracle.edges.size());
    for (size_t i = 0; i < g.edges.size(); ++i) {
      CHECK(g.edges[i].src == oracle.edges[i].src);
      CHECK(g.edges[i].dst == oracle.edges[i].dst);
      CHECK(g.edges[i].rel == oracle.edges[i].rel);
      CHECK(std::abs(g.edges[i].weight - oracle.edges[i].weight) < 1e-12);
    }
    REQUIRE(g.relations.named.size() == oracle.named.size());
    for (size_t i = 0; i < oracle.named.size(); ++i) {
      CHECK(g.relations.named[i].cat_dst == oracle.named[i].first.first);
      CHECK(g.relations.named[i].cat_src == oracle.named[i].first.second);
      CHECK(g.relations.named[i].cooc == oracle.named[i].second);
    }
  }
}

TEST_CASE("graph invariants: weights positive, in-degree bounded") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    auto ds = test_support::random_micro_dataset(rng, 8, 6, 15, 4);
    GraphConfig cfg;
    cfg.top_n = 3;
    auto g = build_graph(ds, cfg);
    std::map<std::pair<int, int>, int> in_degree;
    for (const auto& e : g.edges) {
      CHECK(e.weight > 0.0);
      CHECK(std::isfinite(e.weight));
      CHECK(e.src != e.dst);
      ++in_degree[{e.dst, e.rel}];
    }
    for (const auto& [key, deg] : in_degree) CHECK(deg <= cfg.top_n);
  }
}

TEST_CASE("subgraph closure cases") {
  // chain a(0) -> b(1) -> c(2): co-occurrence makes both directions; build
  // manually to get a directed chain
  CrossSessionGraph g;
  g.num_nodes = 3;
  g.edges = {{0, 1, 0, 1.0}, {1, 2, 0, 1.0}};
  g.build_index();

  auto s0 = subgraph_for_batch(g, {2}, 0);
  CHECK(s0.nodes == std::vector<int>{2});
  CHECK(s0.edges.empty());

  auto s1 = subgraph_for_batch(g, {2}, 1);
  CHECK(s1.nodes == std::vector<int>{1, 2});
  REQUIRE(s1.edges.size() == 1);
  CHECK(s1.nodes[static_cast<size_t>(s1.edges[0].src)] == 1);
  CHECK(s1.nodes[static_cast<size_t>(s1.edges[0].dst)] == 2);

  auto s2 = subgraph_for_batch(g, {2}, 2);
  CHECK(s2.nodes == std::vector<int>{0, 1, 2});
  CHECK(s2.edges.size() == 2);
}

TEST_CASE("subgraph node set equals BFS oracle") {
  Rng rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    auto ds = test_support::random_micro_dataset(rng, 8, 6, 15, 4);
    auto g = build_graph(ds, GraphConfig{});
    std::vector<int> seeds;
    const int n_seeds = 1 + static_cast<int>(rng.next_below(3));
    for (int i = 0; i < n_seeds; ++i)
      seeds.push_back(static_cast<int>(
          rng.next_below(static_cast<uint64_t>(g.num_nodes))));
    auto sub = subgraph_for_batch(g, seeds, 2);
    auto expected = test_support::bfs_incoming_closure(g, seeds, 2);
    CHECK(sub.nodes == expected);
    // edge data identical to the parent graph
    for (const auto& e : sub.edges) {
      const int gsrc = sub.nodes[static_cast<size_t>(e.src)];
      const int gdst = sub.nodes[static_cast<size_t>(e.dst)];
      bool found = false;
      for (const auto& pe : g.edges)
        if (pe.src == gsrc && pe.dst == gdst && pe.rel == e.rel &&
            pe.weight == e.weight)
          found = true;
      CHECK(found);
    }
  }
}

TEST_CASE("graph serialization round-trip and corruption handling") {
  test_support::TmpDir tmp("graph_io");
  Rng rng(61);
  auto ds = test_support::random_micro_dataset(rng, 8, 6, 15, 4);
  auto g = build_graph(ds, GraphConfig{});
  const std::string path = tmp.path("g.bin");
  write_graph(path, g);
  auto loaded = read_graph(path);
  CHECK(loaded.num_nodes == g.num_nodes);
  REQUIRE(loaded.edges.size() == g.edges.size());
  for (size_t i = 0; i < g.edges.size(); ++i) {
    CHECK(loaded.edges[i].src == g.edges[i].src);
    CHECK(loaded.edges[i].dst == g.edges[i].dst);
    CHECK(loaded.edges[i].rel == g.edges[i].rel);
    CHECK(loaded.edges[i].weight ==
          static_cast<double>(static_cast<float>(g.edges[i].weight)));
  }
  CHECK(loaded.content_hash() == g.content_hash());

  // truncated file
  {
    std::ifstream in(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    std::ofstream out(tmp.path("trunc.bin"), std::ios::binary);
    out.write(buf.data(), static_cast<long>(buf.size() / 2));
  }
  CHECK_THROWS_AS(read_graph(tmp.path("trunc.bin")), UserError);

  std::ofstream bad(tmp.path("bad.bin"), std::ios::binary);
  bad << "not a graph";
  bad.close();
  CHECK_THROWS_AS(read_graph(tmp.path("bad.bin")), UserError);
}

TEST_CASE("empty train set is fatal") {
  Dataset ds;
  ds.vocab.add_item("x", ds.vocab.add_category("c"));
  CHECK_THROWS_AS(build_graph(ds, GraphConfig{}), UserError);
}
