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

#include <Eigen/SparseCore>

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace damrs {

/// Name of the co-occurrence (behavior) graph in every graph set.
inline const std::string kBehaviorModality = "c";

struct GraphConfig {
  int k = 10;
  int xi_b = 2;
  bool symmetrize = true;
  bool mean_prune = true;
  bool consistency_prune = true;

  void validate() const {
    if (k < 1) throw ConfigError("graph k must be >= 1");
    if (xi_b < 1) throw ConfigError("xi_b must be >= 1");
  }
};

struct Edge {
  int src = 0;
  int dst = 0;
  double weight = 0.0;
  auto operator<=>(const Edge&) const = default;
};

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Item-item adjacency. Edges are kept sorted by (src, dst). After
/// `normalize_adjacency` the `normalized` vector holds w / sqrt(deg_i deg_j)
/// aligned with `edges`.
struct SparseItemGraph {
  std::string modality;
  int num_items = 0;
  std::vector<Edge> edges;
  std::vector<double> degree;
  std::vector<double> normalized;

  bool is_normalized() const { return normalized.size() == edges.size() && !degree.empty(); }

  std::size_t out_degree(int item) const {
    return static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(),
                                                  [&](const Edge& e) { return e.src == item; }));
  }

  double weight(int i, int j) const {
    const auto it = std::lower_bound(edges.begin(), edges.end(), Edge{i, j, -1e300});
    return (it != edges.end() && it->src == i && it->dst == j) ? it->weight : 0.0;
  }

  bool is_symmetric() const {
    for (const auto& e : edges) {
      if (weight(e.dst, e.src) != e.weight) return false;
    }
    return true;
  }

  /// Propagation operator: normalized weights when available, raw otherwise.
  SparseMatrix to_sparse() const {
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(edges.size());
    const bool norm = is_normalized();
    for (std::size_t e = 0; e < edges.size(); ++e) {
      triplets.emplace_back(edges[e].src, edges[e].dst, norm ? normalized[e] : edges[e].weight);
    }
    SparseMatrix m(num_items, num_items);
    m.setFromTriplets(triplets.begin(), triplets.end());
    return m;
  }
};

/// Per-stage bookkeeping for the build report.
struct GraphStats {
  std::string modality;
  double mean_similarity = 0.0;
  std::size_t mean_pruned = 0;         // entries zeroed by the mean threshold
  std::size_t consistency_pruned = 0;  // additional entries zeroed by cross-modal consistency
  std::size_t cooccurrence_pruned = 0; // off-diagonal co-occurrences below xi_b
  std::size_t edges = 0;
};

/// Dense cosine similarity. Rows with zero norm are similar to nothing,
/// including themselves.
inline Matrix modality_similarity(const Matrix& features) {
  Vector norms = features.rowwise().norm();
  Matrix unit = features;
  for (Eigen::Index i = 0; i < unit.rows(); ++i) {
    if (norms[i] > 0) {
      unit.row(i) /= norms[i];
    } else {
      unit.row(i).setZero();
    }
  }
  Matrix s = unit * unit.transpose();
  return s;
}

inline Matrix modality_similarity(const ModalityFeatures& features) { return modality_similarity(features.values); }

inline double mean_entry(const Matrix& s) {
  return s.size() == 0 ? 0.0 : s.sum() / static_cast<double>(s.size());
}

/// Zeros every entry strictly below the mean over all |I|^2 entries.
inline Matrix mean_threshold_prune(const Matrix& s, std::size_t* pruned = nullptr) {
  if (s.rows() != s.cols()) throw DimensionError("similarity matrix must be square");
  const double mean = mean_entry(s);
  Matrix out = s;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      if (out(i, j) < mean) {
        if (out(i, j) != 0.0) ++count;
        out(i, j) = 0.0;
      }
    }
  }
  if (pruned) *pruned = count;
  return out;
}

/// An entry survives in modality m only if it is nonzero in every modality.
inline std::map<std::string, Matrix> consistency_prune(const std::map<std::string, Matrix>& pruned,
                                                       std::map<std::string, std::size_t>* removed = nullptr) {
  if (pruned.empty()) throw ContractError("consistency_prune needs at least one modality");
  const auto rows = pruned.begin()->second.rows();
  const auto cols = pruned.begin()->second.cols();
  for (const auto& [m, s] : pruned) {
    if (s.rows() != rows || s.cols() != cols) {
      throw DimensionError("modality '" + m + "' similarity has mismatched shape");
    }
  }
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> keep =
      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Constant(rows, cols, true);
  for (const auto& [m, s] : pruned) keep = keep && (s.array() != 0.0);
  std::map<std::string, Matrix> out;
  for (const auto& [m, s] : pruned) {
    Matrix kept = keep.select(s, 0.0);
    if (removed) (*removed)[m] = static_cast<std::size_t>(((s.array() != 0.0) && !keep).count());
    out.emplace(m, std::move(kept));
  }
  return out;
}

namespace detail {

/// Top-k columns of `row` by (value desc, index asc) among entries > 0 and
/// not equal to `skip`.
inline std::vector<int> top_k_positive(const double* row, int n, int k, int skip = -1) {
  std::vector<int> cand;
  cand.reserve(n);
  for (int j = 0; j < n; ++j) {
    if (j != skip && row[j] > 0.0) cand.push_back(j);
  }
  auto better = [row](int a, int b) { return row[a] > row[b] || (row[a] == row[b] && a < b); };
  if (static_cast<int>(cand.size()) > k) {
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end(), better);
    cand.resize(k);
  } else {
    std::sort(cand.begin(), cand.end(), better);
  }
  return cand;
}

inline std::vector<Edge> symmetrize_max(const std::vector<Edge>& edges) {
  std::map<std::pair<int, int>, double> w;
  for (const auto& e : edges) {
    auto& a = w[{e.src, e.dst}];
    a = std::max(a, e.weight);
    auto& b = w[{e.dst, e.src}];
    b = std::max(b, e.weight);
  }
  std::vector<Edge> out;
  out.reserve(w.size());
  for (const auto& [key, weight] : w) out.push_back({key.first, key.second, weight});
  return out;
}

inline void finalize(SparseItemGraph& g, bool symmetrize) {
  if (symmetrize) {
    g.edges = symmetrize_max(g.edges);
  } else {
    std::sort(g.edges.begin(), g.edges.end());
  }
}

}  // namespace detail

/// kNN over a (pruned) similarity matrix: each row keeps its top-k positive
/// entries as weight-1 edges. The self entry is eligible and usually takes a
/// slot. With `symmetrize`, A <- max(A, A^T).
inline SparseItemGraph build_iis_graph(const Matrix& pruned, const GraphConfig& config,
                                       const std::string& modality = "m") {
  config.validate();
  if (pruned.rows() != pruned.cols()) throw DimensionError("similarity matrix must be square");
  SparseItemGraph g;
  g.modality = modality;
  g.num_items = static_cast<int>(pruned.rows());
  for (int i = 0; i < g.num_items; ++i) {
    for (const int j : detail::top_k_positive(pruned.row(i).data(), g.num_items, config.k)) {
      g.edges.push_back({i, j, 1.0});
    }
  }
  detail::finalize(g, config.symmetrize);
  return g;
}

/// Co-occurrence counts S^c[i][j] = #users whose train set holds both i and j.
inline Matrix cooccurrence_counts(const InteractionDataset& ds) {
  Matrix c = Matrix::Zero(ds.num_items(), ds.num_items());
  for (int u = 0; u < ds.num_users(); ++u) {
    const auto& items = ds.train_items(u);
    for (std::size_t a = 0; a < items.size(); ++a) {
      for (std::size_t b = a + 1; b < items.size(); ++b) {
        c(items[a], items[b]) += 1.0;
        c(items[b], items[a]) += 1.0;
      }
    }
  }
  return c;
}

/// Behavior graph: counts below xi_b are dropped, each row keeps its top-k
/// off-diagonal counts as raw weights, and every diagonal entry is 1.
inline SparseItemGraph build_iib_graph(const InteractionDataset& ds, const GraphConfig& config,
                                       GraphStats* stats = nullptr) {
  config.validate();
  Matrix counts = cooccurrence_counts(ds);
  std::size_t dropped = 0;
  for (Eigen::Index i = 0; i < counts.rows(); ++i) {
    for (Eigen::Index j = 0; j < counts.cols(); ++j) {
      if (counts(i, j) > 0 && counts(i, j) < config.xi_b) {
        counts(i, j) = 0;
        ++dropped;
      }
    }
  }
  SparseItemGraph g;
  g.modality = kBehaviorModality;
  g.num_items = ds.num_items();
  for (int i = 0; i < g.num_items; ++i) {
    g.edges.push_back({i, i, 1.0});
    for (const int j : detail::top_k_positive(counts.row(i).data(), g.num_items, config.k, i)) {
      g.edges.push_back({i, j, counts(i, j)});
    }
  }
  detail::finalize(g, config.symmetrize);
  if (stats) {
    stats->modality = g.modality;
    stats->cooccurrence_pruned = dropped;
    stats->edges = g.edges.size();
  }
  return g;
}

/// Symmetric normalization with weighted (row-sum) degrees. Isolated nodes keep
/// degree 0 and propagate nothing.
inline SparseItemGraph normalize_adjacency(SparseItemGraph g) {
  g.degree.assign(g.num_items, 0.0);
  for (const auto& e : g.edges) g.degree[e.src] += e.weight;
  g.normalized.resize(g.edges.size());
  for (std::size_t k = 0; k < g.edges.size(); ++k) {
    const double di = g.degree[g.edges[k].src];
    const double dj = g.degree[g.edges[k].dst];
    g.normalized[k] = (di > 0 && dj > 0) ? g.edges[k].weight / (std::sqrt(di) * std::sqrt(dj)) : 0.0;
  }
  return g;
}

/// All item-item graphs of one configuration: one semantic graph per content
/// modality (in input order) followed by the behavior graph.
struct GraphSet {
  GraphConfig config;
  std::vector<SparseItemGraph> graphs;
  std::vector<GraphStats> stats;

  std::vector<std::string> modalities() const {
    std::vector<std::string> out;
    for (const auto& g : graphs) out.push_back(g.modality);
    return out;
  }
};

/// similarity -> mean-threshold prune -> consistency prune -> kNN per content
/// modality. Either prune stage can be turned off (that is the IIG ablation).
inline std::vector<SparseItemGraph> build_semantic_graphs(const std::vector<ModalityFeatures>& features,
                                                          const GraphConfig& config,
                                                          std::vector<GraphStats>* stats = nullptr) {
  config.validate();
  std::map<std::string, Matrix> sims;
  std::vector<GraphStats> local;
  for (const auto& f : features) {
    if (sims.count(f.modality)) throw ConfigError("duplicate modality '" + f.modality + "'");
    GraphStats st;
    st.modality = f.modality;
    Matrix s = modality_similarity(f);
    st.mean_similarity = mean_entry(s);
    if (config.mean_prune) s = mean_threshold_prune(s, &st.mean_pruned);
    sims.emplace(f.modality, std::move(s));
    local.push_back(st);
  }
  if (config.consistency_prune && !sims.empty()) {
    std::map<std::string, std::size_t> removed;
    sims = consistency_prune(sims, &removed);
    for (auto& st : local) st.consistency_pruned = removed[st.modality];
  }
  std::vector<SparseItemGraph> out;
  for (std::size_t m = 0; m < features.size(); ++m) {
    out.push_back(build_iis_graph(sims.at(features[m].modality), config, features[m].modality));
    local[m].edges = out.back().edges.size();
  }
  if (stats) *stats = std::move(local);
  return out;
}

inline GraphSet build_graph_set(const InteractionDataset& ds, const std::vector<ModalityFeatures>& features,
                                const GraphConfig& config) {
  GraphSet set;
  set.config = config;
  auto semantic = build_semantic_graphs(features, config, &set.stats);
  for (auto& g : semantic) set.graphs.push_back(normalize_adjacency(std::move(g)));
  GraphStats bstats;
  set.graphs.push_back(normalize_adjacency(build_iib_graph(ds, config, &bstats)));
  set.stats.push_back(bstats);
  return set;
}

}  // namespace damrs
