#pragma once

#include <vector>

#include "cares/graph.hpp"
#include "cares/model.hpp"
#include "cares/session_data.hpp"
#include "cares/tape.hpp"

namespace cares {

struct EncoderOptions {
  double leaky_slope = 0.2;
  bool normalize_per_layer = false;  // L2-normalize node states after each layer
  bool no_general = false;           // ablation: skip graph aggregation
  bool no_personalize = false;       // ablation: zero gating score
};

// A batch of sessions bound to a subgraph: every item occurrence carries its
// local node index, so personalized states live per occurrence.
struct SessionBatch {
  struct Entry {
    std::vector<int> items;  // vocab ids
    std::vector<int> cats;   // category ids, parallel to items
    std::vector<int> local;  // subgraph-local indices, parallel to items
    int target = -1;
  };
  std::vector<Entry> sessions;
  Subgraph sub;
};

// hops must equal the number of encoder layers so that every consumed
// neighbor state is exact.
inline SessionBatch bind_batch(const std::vector<const Session*>& samples,
                               const Vocab& vocab,
                               const CrossSessionGraph& graph, int hops) {
  std::vector<int> seed_items;
  for (const Session* s : samples) {
    CARES_CHECK_MSG(!s->items.empty(), "empty session in batch");
    for (int id : s->items) seed_items.push_back(id);
  }
  SessionBatch batch;
  batch.sub = subgraph_for_batch(graph, seed_items, hops);
  batch.sessions.reserve(samples.size());
  for (const Session* s : samples) {
    SessionBatch::Entry e;
    e.items = s->items;
    e.target = s->target;
    for (int id : s->items) {
      e.cats.push_back(vocab.item_category[static_cast<size_t>(id)]);
      e.local.push_back(batch.sub.local_of(id));
      CARES_CHECK(e.local.back() >= 0);
    }
    batch.sessions.push_back(std::move(e));
  }
  return batch;
}

template <typename Real>
struct EncodeResult {
  std::vector<ad::Var<Real>> session_items;   // per session: t x d, final layer
  std::vector<ad::Var<Real>> session_virtual; // per session: 1 x d, final
  ad::Var<Real> nodes;                        // subgraph nodes x d, final layer
};

namespace enc {

// Virtual-node start state: arithmetic mean of the session's item states.
template <typename Real>
ad::Var<Real> init_virtual(ad::Tape<Real>& t, ad::Var<Real> session_items) {
  CARES_CHECK_MSG(session_items.rows() >= 1, "empty session");
  return t.mean_rows(session_items);
}

// One layer of relation-aware attention over the subgraph. Every node
// attends over its incoming neighbors plus itself; the self entry uses
// edge weight 1 and the dedicated self-relation embedding.
template <typename Real>
ad::Var<Real> rgat_layer(ad::Tape<Real>& t, ad::Var<Real> h,
                         const Subgraph& sub, int self_relation,
                         ad::Var<Real> relation_table,
                         RgatLayerParams<Real>& lp,
                         const EncoderOptions& opt) {
  CARES_CHECK(h.rows() == sub.size());

  std::vector<int> src_ids, dst_ids, rel_ids;
  const size_t n_entries = sub.edges.size() + static_cast<size_t>(sub.size());
  src_ids.reserve(n_entries);
  dst_ids.reserve(n_entries);
  rel_ids.reserve(n_entries);
  ad::Tensor<Real> evals(static_cast<long>(n_entries), 1);
  size_t edge_at = 0;
  for (int v = 0; v < sub.size(); ++v) {
    evals.at(static_cast<long>(src_ids.size()), 0) = Real(1);
    src_ids.push_back(v);
    dst_ids.push_back(v);
    rel_ids.push_back(self_relation);
    while (edge_at < sub.edges.size() && sub.edges[edge_at].dst == v) {
      evals.at(static_cast<long>(src_ids.size()), 0) =
          static_cast<Real>(sub.edges[edge_at].weight);
      src_ids.push_back(sub.edges[edge_at].src);
      dst_ids.push_back(v);
      rel_ids.push_back(sub.edges[edge_at].rel);
      ++edge_at;
    }
  }
  CARES_CHECK(edge_at == sub.edges.size());

  auto h_dst = t.gather_rows(h, dst_ids);
  auto h_src = t.gather_rows(h, src_ids);
  auto rel_emb = t.gather_rows(relation_table, rel_ids);
  auto edge_feat = t.constant(std::move(evals));
  auto features = t.concat_cols({h_dst, h_src, edge_feat, rel_emb});
  auto att_w = t.param(lp.att_weight);
  auto att_v = t.param(lp.att_vec);
  auto scores = t.matmul(
      t.leaky_relu(t.matmul(features, att_w), static_cast<Real>(opt.leaky_slope)),
      att_v);
  auto alpha = t.segment_softmax(scores, dst_ids);

  ad::Var<Real> messages;
  if (opt.no_general) {
    messages = h;
  } else {
    auto agg_w = t.param(lp.agg_weight);
    messages = t.matmul(h, agg_w);
  }
  auto gathered = t.gather_rows(messages, src_ids);
  return t.segment_weighted_sum(gathered, alpha, dst_ids, sub.size());
}

// Gate between the general item state and the session's virtual node:
// delta = sigmoid((W_g h_i)^T (W_v h~) / sqrt(d)), output
// (1 - delta) h_i + delta h~, per item occurrence.
template <typename Real>
ad::Var<Real> personalize(ad::Tape<Real>& t, ad::Var<Real> session_items,
                          ad::Var<Real> virtual_node,
                          RgatLayerParams<Real>& lp,
                          const EncoderOptions& opt) {
  if (opt.no_personalize) return session_items;
  const long n = session_items.rows();
  const Real inv_sqrt_d =
      Real(1) / std::sqrt(static_cast<Real>(session_items.cols()));
  auto gate_w = t.param(lp.gate_item_weight);
  auto gate_v = t.param(lp.gate_virtual_weight);
  auto tiled = t.gather_rows(t.matmul(virtual_node, gate_v),
                             std::vector<int>(static_cast<size_t>(n), 0));
  auto delta = t.sigmoid(t.scalar_mul(
      t.rowwise_dot(t.matmul(session_items, gate_w), tiled), inv_sqrt_d));
  auto one_minus = t.affine(delta, Real(-1), Real(1));
  auto tiled_virtual = t.gather_rows(
      virtual_node, std::vector<int>(static_cast<size_t>(n), 0));
  return t.add(t.mul_rowscale(session_items, one_minus),
               t.mul_rowscale(tiled_virtual, delta));
}

// beta = softmax over occurrences of (W_p h_i^s)^T (W_q h~) / sqrt(d);
// new virtual node = sum beta_i h_i^s.
template <typename Real>
ad::Var<Real> update_virtual(ad::Tape<Real>& t, ad::Var<Real> personalized,
                             ad::Var<Real> virtual_node,
                             RgatLayerParams<Real>& lp) {
  const long n = personalized.rows();
  const Real inv_sqrt_d =
      Real(1) / std::sqrt(static_cast<Real>(personalized.cols()));
  auto pool_w = t.param(lp.pool_item_weight);
  auto pool_v = t.param(lp.pool_virtual_weight);
  auto tiled = t.gather_rows(t.matmul(virtual_node, pool_v),
                             std::vector<int>(static_cast<size_t>(n), 0));
  auto scores = t.scalar_mul(
      t.rowwise_dot(t.matmul(personalized, pool_w), tiled), inv_sqrt_d);
  auto beta =
      t.segment_softmax(scores, std::vector<int>(static_cast<size_t>(n), 0));
  return t.weighted_sum_rows(personalized, beta);
}

}  // namespace enc

// Runs the layer loop: relational attention over the subgraph, then per
// session the gating and virtual-node update. With zero layers the
// personalized states are the raw table rows and the virtual node is their
// mean.
template <typename Real>
EncodeResult<Real> encode_items(ad::Tape<Real>& t, ModelParams<Real>& params,
                                const SessionBatch& batch,
                                const EncoderOptions& opt = {}) {
  const int L = params.dims.layers;
  auto item_table = t.param(params.item_table);
  auto relation_table = t.param(params.relation_table);

  auto h = t.gather_rows(item_table, batch.sub.nodes);
  const int self_rel = params.dims.relations - 1;

  std::vector<ad::Var<Real>> virtual_nodes;
  virtual_nodes.reserve(batch.sessions.size());
  std::vector<ad::Var<Real>> personalized(batch.sessions.size());
  for (const auto& s : batch.sessions)
    virtual_nodes.push_back(
        enc::init_virtual(t, t.gather_rows(h, s.local)));

  for (int k = 0; k < L; ++k) {
    auto& lp = params.layer(k);
    h = enc::rgat_layer(t, h, batch.sub, self_rel, relation_table, lp, opt);
    if (opt.normalize_per_layer) h = t.l2_normalize_rows(h);
    for (size_t s = 0; s < batch.sessions.size(); ++s) {
      auto items = t.gather_rows(h, batch.sessions[s].local);
      personalized[s] = enc::personalize(t, items, virtual_nodes[s], lp, opt);
      virtual_nodes[s] =
          enc::update_virtual(t, personalized[s], virtual_nodes[s], lp);
    }
  }
  if (L == 0)
    for (size_t s = 0; s < batch.sessions.size(); ++s)
      personalized[s] = t.gather_rows(h, batch.sessions[s].local);

  return EncodeResult<Real>{std::move(personalized), std::move(virtual_nodes),
                            h};
}

}  // namespace cares
