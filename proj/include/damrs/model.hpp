/*
 * Copyright 2026 The damrs Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "damrs/common.hpp"
#include "damrs/dataset.hpp"
#include "damrs/graphs.hpp"

#include <Eigen/SparseCore>

#include <string>
#include <vector>

namespace damrs {

enum class Backbone { kMF, kLightGCN };

inline Backbone parse_backbone(const std::string& s) {
  if (s == "mf" || s == "MF") return Backbone::kMF;
  if (s == "lightgcn" || s == "LightGCN") return Backbone::kLightGCN;
  throw ConfigError("unknown backbone '" + s + "'");
}

inline std::string backbone_name(Backbone b) { return b == Backbone::kMF ? "mf" : "lightgcn"; }

struct ModelConfig {
  int dim = 64;
  Backbone backbone = Backbone::kLightGCN;
  int backbone_layers = 2;
  int graph_layers = 2;
  /// Give every item-item graph its own learnable input table instead of
  /// sharing the item ID table.
  bool separate_modality_tables = false;
};

/// Trainable parameters. `modality_tables` is empty unless
/// `separate_modality_tables` is set.
struct ModelState {
  ModelConfig config;
  Matrix user_table;
  Matrix item_table;
  std::vector<Matrix> modality_tables;
  std::size_t step = 0;

  bool finite() const {
    if (!user_table.allFinite() || !item_table.allFinite()) return false;
    for (const auto& m : modality_tables) {
      if (!m.allFinite()) return false;
    }
    return true;
  }
};

/// Xavier/Glorot uniform over a rows x cols table: U(-b, b), b = sqrt(6 / (rows + cols)).
inline Matrix xavier_uniform(int rows, int cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
  }
  return m;
}

inline ModelState init_parameters(int num_users, int num_items, int num_graphs, const ModelConfig& config,
                                  std::uint64_t seed) {
  if (config.dim < 1) throw ConfigError("embedding dimension must be >= 1");
  if (config.backbone_layers < 0 || config.graph_layers < 0) throw ConfigError("layer counts must be >= 0");
  ModelState s;
  s.config = config;
  Rng rng(mix_seed(seed, 0x1417));
  s.user_table = xavier_uniform(num_users, config.dim, rng);
  s.item_table = xavier_uniform(num_items, config.dim, rng);
  if (config.separate_modality_tables) {
    for (int g = 0; g < num_graphs; ++g) s.modality_tables.push_back(xavier_uniform(num_items, config.dim, rng));
  }
  return s;
}

/// Symmetric-normalized user-item bipartite adjacency over (|U| + |I|) nodes,
/// users first.
inline SparseMatrix bipartite_adjacency(const InteractionDataset& ds) {
  const int nu = ds.num_users();
  std::vector<double> item_deg(ds.num_items(), 0.0);
  for (const auto& p : ds.train()) item_deg[p.item] += 1.0;
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(2 * ds.train().size());
  for (const auto& p : ds.train()) {
    const double du = static_cast<double>(ds.train_items(p.user).size());
    const double w = 1.0 / (std::sqrt(du) * std::sqrt(item_deg[p.item]));
    trips.emplace_back(p.user, nu + p.item, w);
    trips.emplace_back(nu + p.item, p.user, w);
  }
  SparseMatrix a(nu + ds.num_items(), nu + ds.num_items());
  a.setFromTriplets(trips.begin(), trips.end());
  return a;
}

struct BackboneOutput {
  Matrix users;
  Matrix items;
};

namespace detail {

/// mean_{l=0..L} A^l X
inline Matrix layer_mean(const SparseMatrix& a, const Matrix& x, int layers) {
  Matrix acc = x;
  Matrix cur = x;
  for (int l = 0; l < layers; ++l) {
    cur = a * cur;
    acc += cur;
  }
  acc /= static_cast<double>(layers + 1);
  return acc;
}

inline Matrix stack_rows(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

}  // namespace detail

/// MF returns the tables verbatim; LightGCN returns the mean of layers 0..L
/// over the bipartite graph.
inline BackboneOutput backbone_forward(const ModelState& state, const SparseMatrix& bipartite) {
  if (state.config.backbone == Backbone::kMF || state.config.backbone_layers == 0) {
    return {state.user_table, state.item_table};
  }
  const Matrix out =
      detail::layer_mean(bipartite, detail::stack_rows(state.user_table, state.item_table), state.config.backbone_layers);
  const auto nu = state.user_table.rows();
  return {out.topRows(nu), out.bottomRows(out.rows() - nu)};
}

/// Adjoint of `backbone_forward`: maps output gradients to table gradients.
inline BackboneOutput backbone_backward(const ModelState& state, const SparseMatrix& bipartite_transposed,
                                        const Matrix& grad_users, const Matrix& grad_items) {
  if (state.config.backbone == Backbone::kMF || state.config.backbone_layers == 0) {
    return {grad_users, grad_items};
  }
  const Matrix g = detail::layer_mean(bipartite_transposed, detail::stack_rows(grad_users, grad_items),
                                      state.config.backbone_layers);
  const auto nu = grad_users.rows();
  return {g.topRows(nu), g.bottomRows(g.rows() - nu)};
}

/// h^(L) with h^(0) = x and h^(l+1) = A h^(l). Last layer only.
inline Matrix itemgraph_propagate(const Matrix& x, const SparseMatrix& adjacency, int layers) {
  Matrix h = x;
  for (int l = 0; l < layers; ++l) h = adjacency * h;
  return h;
}

inline Matrix itemgraph_propagate(const Matrix& x, const SparseItemGraph& graph, int layers) {
  return itemgraph_propagate(x, graph.to_sparse(), layers);
}

struct FusedItems {
  Matrix h_mm;  // empty when there are no item-item graphs
  Matrix t;
};

/// h_mm = mean of the graph embeddings, t = (h_id + h_mm) / 2. Without any
/// graph the fused representation is h_id itself.
inline FusedItems fuse_item(const Matrix& h_id, const std::vector<Matrix>& h) {
  if (h.empty()) return {Matrix(), h_id};
  Matrix mm = Matrix::Zero(h_id.rows(), h_id.cols());
  for (const auto& hm : h) {
    if (hm.rows() != h_id.rows() || hm.cols() != h_id.cols()) {
      throw DimensionError("modality embedding shape differs from item ID embedding");
    }
    mm += hm;
  }
  mm /= static_cast<double>(h.size());
  Matrix t = 0.5 * (h_id + mm);
  return {std::move(mm), std::move(t)};
}

template <typename A, typename B>
double score(const Eigen::MatrixBase<A>& user, const Eigen::MatrixBase<B>& item) {
  if (user.size() != item.size()) throw DimensionError("score: vector dimensions differ");
  double s = 0.0;
  for (Eigen::Index k = 0; k < user.size(); ++k) s += user.derived().coeff(k) * item.derived().coeff(k);
  return s;
}

/// Same inner product, applied to a single modality embedding h_i^m.
template <typename A, typename B>
double modality_score(const Eigen::MatrixBase<A>& user, const Eigen::MatrixBase<B>& item_modality) {
  return score(user, item_modality);
}

/// Everything the objective reads. `h` is ordered like the graph set.
struct Embeddings {
  Matrix u;
  Matrix h_id;
  std::vector<Matrix> h;
  Matrix h_mm;
  Matrix t;
  std::vector<std::string> modalities;
};

/// Gradients with the same layout as `Embeddings`, plus direct gradients on
/// parameter tables (the L2 term acts on the tables, not on propagated rows).
struct Gradients {
  Matrix u;
  Matrix h_id;
  std::vector<Matrix> h;
  Matrix h_mm;
  Matrix t;
  Matrix user_table;
  Matrix item_table;

  static Gradients zeros_like(const Embeddings& e) {
    Gradients g;
    g.u = Matrix::Zero(e.u.rows(), e.u.cols());
    g.h_id = Matrix::Zero(e.h_id.rows(), e.h_id.cols());
    for (const auto& hm : e.h) g.h.push_back(Matrix::Zero(hm.rows(), hm.cols()));
    g.h_mm = Matrix::Zero(e.h_mm.rows(), e.h_mm.cols());
    g.t = Matrix::Zero(e.t.rows(), e.t.cols());
    g.user_table = Matrix::Zero(e.u.rows(), e.u.cols());
    g.item_table = Matrix::Zero(e.h_id.rows(), e.h_id.cols());
    return g;
  }

  void add_scaled(const Gradients& o, double w) {
    u += w * o.u;
    h_id += w * o.h_id;
    for (std::size_t m = 0; m < h.size(); ++m) h[m] += w * o.h[m];
    if (h_mm.size()) h_mm += w * o.h_mm;
    t += w * o.t;
    user_table += w * o.user_table;
    item_table += w * o.item_table;
  }
};

struct ParamGradients {
  Matrix user_table;
  Matrix item_table;
  std::vector<Matrix> modality_tables;
};

/// Parameters plus the fixed structures they are propagated over.
class Model {
 public:
  Model(ModelState state, const InteractionDataset& ds, const GraphSet* graphs)
      : state_(std::move(state)), bipartite_(bipartite_adjacency(ds)) {
    bipartite_t_ = bipartite_.transpose();
    if (graphs) {
      for (const auto& g : graphs->graphs) {
        adjacency_.push_back(g.to_sparse());
        adjacency_t_.push_back(adjacency_.back().transpose());
        modalities_.push_back(g.modality);
      }
    }
    if (state_.config.separate_modality_tables && state_.modality_tables.size() != adjacency_.size()) {
      throw DimensionError("separate modality tables do not match the number of graphs");
    }
    if (state_.user_table.rows() != ds.num_users() || state_.item_table.rows() != ds.num_items()) {
      throw DimensionError("parameter tables do not match the dataset");
    }
  }

  const ModelState& state() const { return state_; }
  ModelState& state() { return state_; }
  std::size_t num_graphs() const { return adjacency_.size(); }
  const std::vector<std::string>& modalities() const { return modalities_; }

  Embeddings forward() const {
    Embeddings e;
    auto bb = backbone_forward(state_, bipartite_);
    e.u = std::move(bb.users);
    e.h_id = std::move(bb.items);
    for (std::size_t g = 0; g < adjacency_.size(); ++g) {
      e.h.push_back(itemgraph_propagate(graph_input(g), adjacency_[g], state_.config.graph_layers));
    }
    auto fused = fuse_item(e.h_id, e.h);
    e.h_mm = std::move(fused.h_mm);
    e.t = std::move(fused.t);
    e.modalities = modalities_;
    return e;
  }

  /// Chain rule from embedding-level gradients down to the parameter tables.
  ParamGradients backward(const Gradients& grads) const {
    Matrix g_hid = grads.h_id;
    std::vector<Matrix> g_h = grads.h;
    const std::size_t n = adjacency_.size();
    if (n == 0) {
      g_hid += grads.t;
    } else {
      g_hid += 0.5 * grads.t;
      Matrix g_mm = 0.5 * grads.t;
      if (grads.h_mm.size()) g_mm += grads.h_mm;
      g_mm /= static_cast<double>(n);
      for (std::size_t g = 0; g < n; ++g) g_h[g] += g_mm;
    }
    ParamGradients out;
    auto bb = backbone_backward(state_, bipartite_t_, grads.u, g_hid);
    out.user_table = std::move(bb.users);
    out.item_table = std::move(bb.items);
    for (std::size_t g = 0; g < n; ++g) {
      Matrix back = itemgraph_propagate(g_h[g], adjacency_t_[g], state_.config.graph_layers);
      if (state_.config.separate_modality_tables) {
        out.modality_tables.push_back(std::move(back));
      } else {
        out.item_table += back;
      }
    }
    out.user_table += grads.user_table;
    out.item_table += grads.item_table;
    return out;
  }

 private:
  const Matrix& graph_input(std::size_t g) const {
    return state_.config.separate_modality_tables ? state_.modality_tables[g] : state_.item_table;
  }

  ModelState state_;
  SparseMatrix bipartite_, bipartite_t_;
  std::vector<SparseMatrix> adjacency_, adjacency_t_;
  std::vector<std::string> modalities_;
};

}  // namespace damrs
