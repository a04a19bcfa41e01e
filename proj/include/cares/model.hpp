#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cares/tape.hpp"

namespace cares {

struct ModelDims {
  int d = 256;        // embedding width
  int items = 0;      // m
  int categories = 0; // l
  int relations = 0;  // named + same + drift + self
  int layers = 2;     // L
  int t_max = 20;
};

// Per-layer weights of the relational attention encoder. The aggregation
// matrix and the attention projection are separate: the former maps a
// d-vector, the latter the [h_i || h_j || e_ij || r_ij] concat of width
// 3d+1. The four gate matrices drive session personalization and the
// virtual-node update.
template <typename Real>
struct RgatLayerParams {
  ad::Tensor<Real> agg_weight;         // d x d
  ad::Tensor<Real> att_weight;         // (3d+1) x d
  ad::Tensor<Real> att_vec;            // d x 1
  ad::Tensor<Real> gate_item_weight;   // d x d
  ad::Tensor<Real> gate_virtual_weight;// d x d
  ad::Tensor<Real> pool_item_weight;   // d x d
  ad::Tensor<Real> pool_virtual_weight;// d x d
};

template <typename Real>
struct ModelParams {
  ModelDims dims;
  bool shared_layers = false;

  ad::Tensor<Real> item_table;     // m x d
  ad::Tensor<Real> relation_table; // relations x d
  std::vector<RgatLayerParams<Real>> layers;  // size L, or 1 when shared

  ad::Tensor<Real> pos_table;      // t_max x d, row 0 = most recent
  ad::Tensor<Real> len_table;      // t_max x d, row t-1 = length t
  ad::Tensor<Real> category_table; // l x d
  ad::Tensor<Real> mlp_hidden_w;   // 4d x d
  ad::Tensor<Real> mlp_hidden_b;   // 1 x d
  ad::Tensor<Real> mlp_out_w;      // d x 1
  ad::Tensor<Real> mlp_out_b;      // 1 x 1
  ad::Tensor<Real> combine_weight; // 2d x d

  RgatLayerParams<Real>& layer(int k) {
    return layers[shared_layers ? 0 : static_cast<size_t>(k)];
  }
  const RgatLayerParams<Real>& layer(int k) const {
    return layers[shared_layers ? 0 : static_cast<size_t>(k)];
  }

  // Tables and matrices start uniform in [-1/sqrt(d), 1/sqrt(d)); biases
  // start at zero. Fill order is the named_tensors order, so a seed pins
  // every weight.
  void init(uint64_t seed) {
    const int d = dims.d;
    item_table = ad::Tensor<Real>(dims.items, d);
    relation_table = ad::Tensor<Real>(dims.relations, d);
    layers.resize(shared_layers ? 1 : static_cast<size_t>(dims.layers));
    for (auto& l : layers) {
      l.agg_weight = ad::Tensor<Real>(d, d);
      l.att_weight = ad::Tensor<Real>(3 * d + 1, d);
      l.att_vec = ad::Tensor<Real>(d, 1);
      l.gate_item_weight = ad::Tensor<Real>(d, d);
      l.gate_virtual_weight = ad::Tensor<Real>(d, d);
      l.pool_item_weight = ad::Tensor<Real>(d, d);
      l.pool_virtual_weight = ad::Tensor<Real>(d, d);
    }
    pos_table = ad::Tensor<Real>(dims.t_max, d);
    len_table = ad::Tensor<Real>(dims.t_max, d);
    category_table = ad::Tensor<Real>(dims.categories, d);
    mlp_hidden_w = ad::Tensor<Real>(4 * d, d);
    mlp_hidden_b = ad::Tensor<Real>(1, d);
    mlp_out_w = ad::Tensor<Real>(d, 1);
    mlp_out_b = ad::Tensor<Real>(1, 1);
    combine_weight = ad::Tensor<Real>(2 * d, d);

    Rng rng(seed);
    const Real bound = Real(1) / std::sqrt(static_cast<Real>(d));
    for (auto& [name, tensor] : named_tensors()) {
      if (name == "mlp_hidden_b" || name == "mlp_out_b") continue;
      tensor->fill_uniform(rng, bound);
    }
  }

  std::vector<std::pair<std::string, ad::Tensor<Real>*>> named_tensors() {
    std::vector<std::pair<std::string, ad::Tensor<Real>*>> out;
    out.emplace_back("item_table", &item_table);
    out.emplace_back("relation_table", &relation_table);
    for (size_t k = 0; k < layers.size(); ++k) {
      const std::string p = "layer" + std::to_string(k) + ".";
      out.emplace_back(p + "agg_weight", &layers[k].agg_weight);
      out.emplace_back(p + "att_weight", &layers[k].att_weight);
      out.emplace_back(p + "att_vec", &layers[k].att_vec);
      out.emplace_back(p + "gate_item_weight", &layers[k].gate_item_weight);
      out.emplace_back(p + "gate_virtual_weight", &layers[k].gate_virtual_weight);
      out.emplace_back(p + "pool_item_weight", &layers[k].pool_item_weight);
      out.emplace_back(p + "pool_virtual_weight", &layers[k].pool_virtual_weight);
    }
    out.emplace_back("pos_table", &pos_table);
    out.emplace_back("len_table", &len_table);
    out.emplace_back("category_table", &category_table);
    out.emplace_back("mlp_hidden_w", &mlp_hidden_w);
    out.emplace_back("mlp_hidden_b", &mlp_hidden_b);
    out.emplace_back("mlp_out_w", &mlp_out_w);
    out.emplace_back("mlp_out_b", &mlp_out_b);
    out.emplace_back("combine_weight", &combine_weight);
    return out;
  }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    out.dims = dims;
    out.shared_layers = shared_layers;
    out.item_table = item_table.template cast<Other>();
    out.relation_table = relation_table.template cast<Other>();
    for (const auto& l : layers) {
      RgatLayerParams<Other> ol;
      ol.agg_weight = l.agg_weight.template cast<Other>();
      ol.att_weight = l.att_weight.template cast<Other>();
      ol.att_vec = l.att_vec.template cast<Other>();
      ol.gate_item_weight = l.gate_item_weight.template cast<Other>();
      ol.gate_virtual_weight = l.gate_virtual_weight.template cast<Other>();
      ol.pool_item_weight = l.pool_item_weight.template cast<Other>();
      ol.pool_virtual_weight = l.pool_virtual_weight.template cast<Other>();
      out.layers.push_back(std::move(ol));
    }
    out.pos_table = pos_table.template cast<Other>();
    out.len_table = len_table.template cast<Other>();
    out.category_table = category_table.template cast<Other>();
    out.mlp_hidden_w = mlp_hidden_w.template cast<Other>();
    out.mlp_hidden_b = mlp_hidden_b.template cast<Other>();
    out.mlp_out_w = mlp_out_w.template cast<Other>();
    out.mlp_out_b = mlp_out_b.template cast<Other>();
    out.combine_weight = combine_weight.template cast<Other>();
    return out;
  }
};

}  // namespace cares
