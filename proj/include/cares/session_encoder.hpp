#pragma once

#include <vector>

#include "cares/item_encoder.hpp"
#include "cares/model.hpp"
#include "cares/tape.hpp"

namespace cares {
namespace enc {

// z_i = h_i + p_{t-i} + l_t. Positions are reverse-indexed so the last item
// reads row 0 of the position table; the length table stores length t in
// row t-1.
template <typename Real>
ad::Var<Real> positional_fuse(ad::Tape<Real>& t, ad::Var<Real> items,
                              ad::Var<Real> pos_table,
                              ad::Var<Real> len_table) {
  const long n = items.rows();
  CARES_CHECK_MSG(n >= 1 && n <= pos_table.rows(),
                  "session length exceeds t_max");
  std::vector<int> rev(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i)
    rev[static_cast<size_t>(i)] = static_cast<int>(n - 1 - i);
  auto fused = t.add(items, t.gather_rows(pos_table, rev));
  return t.add_rowvec(fused,
                      t.gather_rows(len_table, {static_cast<int>(n - 1)}));
}

// Mean of the session's category embeddings, repeats counted per occurrence.
template <typename Real>
ad::Var<Real> category_context(ad::Tape<Real>& t,
                               const std::vector<int>& category_ids,
                               ad::Var<Real> category_table) {
  return t.mean_rows(t.gather_rows(category_table, category_ids));
}

// Two-layer MLP attention over [z_i || z_t || h~ || h_c]; the scores are
// used as plain weights, without normalization.
template <typename Real>
ad::Var<Real> attention_pool(ad::Tape<Real>& t, ad::Var<Real> fused,
                             ad::Var<Real> virtual_node,
                             ad::Var<Real> category_ctx,
                             ModelParams<Real>& params, double leaky_slope) {
  const long n = fused.rows();
  const std::vector<int> zeros(static_cast<size_t>(n), 0);
  auto last = t.gather_rows(fused, {static_cast<int>(n - 1)});
  auto feats = t.concat_cols({fused, t.gather_rows(last, zeros),
                              t.gather_rows(virtual_node, zeros),
                              t.gather_rows(category_ctx, zeros)});
  auto hidden = t.leaky_relu(
      t.add_rowvec(t.matmul(feats, t.param(params.mlp_hidden_w)),
                   t.param(params.mlp_hidden_b)),
      static_cast<Real>(leaky_slope));
  auto gamma = t.add_rowvec(t.matmul(hidden, t.param(params.mlp_out_w)),
                            t.param(params.mlp_out_b));
  return t.weighted_sum_rows(fused, gamma);
}

// z_s = W [pooled || z_t].
template <typename Real>
ad::Var<Real> combine(ad::Tape<Real>& t, ad::Var<Real> pooled,
                      ad::Var<Real> last, ad::Var<Real> combine_weight) {
  return t.matmul(t.concat_cols({pooled, last}), combine_weight);
}

// One pass of the fuse -> pool -> combine pipeline.
template <typename Real>
ad::Var<Real> session_vector_path(ad::Tape<Real>& t, ad::Var<Real> items,
                                  ad::Var<Real> virtual_node,
                                  const std::vector<int>& category_ids,
                                  ModelParams<Real>& params,
                                  double leaky_slope) {
  auto fused = positional_fuse(t, items, t.param(params.pos_table),
                               t.param(params.len_table));
  auto ctx = category_context(t, category_ids, t.param(params.category_table));
  auto pooled = attention_pool(t, fused, virtual_node, ctx, params, leaky_slope);
  auto last = t.gather_rows(fused, {static_cast<int>(items.rows() - 1)});
  return combine(t, pooled, last, t.param(params.combine_weight));
}

}  // namespace enc

// Session representation: the personalized path plus a skip path that
// reruns the same pipeline (same tables, same MLP) on raw look-up
// embeddings, with the virtual node replaced by their mean.
template <typename Real>
ad::Var<Real> encode_session(ad::Tape<Real>& t, ModelParams<Real>& params,
                             const SessionBatch::Entry& session,
                             ad::Var<Real> personalized_items,
                             ad::Var<Real> virtual_node,
                             double leaky_slope = 0.2) {
  auto main_path = enc::session_vector_path(
      t, personalized_items, virtual_node, session.cats, params, leaky_slope);
  auto raw_items = t.gather_rows(t.param(params.item_table), session.items);
  auto raw_path = enc::session_vector_path(
      t, raw_items, t.mean_rows(raw_items), session.cats, params, leaky_slope);
  return t.add(main_path, raw_path);
}

// Stacks all session vectors of a batch into B x d.
template <typename Real>
ad::Var<Real> encode_batch_sessions(ad::Tape<Real>& t,
                                    ModelParams<Real>& params,
                                    const SessionBatch& batch,
                                    const EncodeResult<Real>& encoded,
                                    double leaky_slope = 0.2) {
  std::vector<ad::Var<Real>> rows;
  rows.reserve(batch.sessions.size());
  for (size_t s = 0; s < batch.sessions.size(); ++s)
    rows.push_back(encode_session(t, params, batch.sessions[s],
                                  encoded.session_items[s],
                                  encoded.session_virtual[s], leaky_slope));
  return t.concat_rows(rows);
}

}  // namespace cares
