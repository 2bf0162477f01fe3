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

// Brute-force reference implementations used to cross-check the library. They
// favor obviousness over speed and share no code with the graph module.

#include "damrs/dataset.hpp"
#include "damrs/graphs.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <tuple>
#include <vector>

namespace damrs::oracle {

using Dense = std::vector<std::vector<double>>;

inline Dense zeros(int n) { return Dense(n, std::vector<double>(n, 0.0)); }

inline Dense cosine(const Matrix& x) {
  const int n = static_cast<int>(x.rows());
  Dense s = zeros(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        dot += x(i, c) * x(j, c);
        ni += x(i, c) * x(i, c);
        nj += x(j, c) * x(j, c);
      }
      s[i][j] = (ni == 0 || nj == 0) ? 0.0 : dot / std::sqrt(ni * nj);
    }
  }
  return s;
}

inline Dense mean_prune(Dense s) {
  const std::size_t n = s.size();
  double total = 0;
  for (const auto& row : s) {
    for (const double v : row) total += v;
  }
  const double mean = total / static_cast<double>(n * n);
  for (auto& row : s) {
    for (auto& v : row) {
      if (v < mean) v = 0.0;
    }
  }
  return s;
}

/// top-k positive entries per row (ties to the lower index), weight `w(i,j)`.
template <typename Weight>
Dense knn(const Dense& s, int k, bool skip_diagonal, Weight w) {
  const int n = static_cast<int>(s.size());
  Dense a = zeros(n);
  for (int i = 0; i < n; ++i) {
    std::vector<std::pair<double, int>> cand;
    for (int j = 0; j < n; ++j) {
      if (skip_diagonal && i == j) continue;
      if (s[i][j] > 0) cand.push_back({-s[i][j], j});
    }
    std::sort(cand.begin(), cand.end());
    for (int r = 0; r < std::min<int>(k, static_cast<int>(cand.size())); ++r) a[i][cand[r].second] = w(i, cand[r].second);
  }
  return a;
}

inline Dense symmetrize(const Dense& a) {
  Dense out = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a.size(); ++j) out[i][j] = std::max(a[i][j], a[j][i]);
  }
  return out;
}

/// Semantic graphs for every modality, in input order.
inline std::vector<Dense> iis(const std::vector<ModalityFeatures>& features, const GraphConfig& cfg) {
  std::vector<Dense> s;
  for (const auto& f : features) {
    Dense m = cosine(f.values);
    if (cfg.mean_prune) m = mean_prune(m);
    s.push_back(std::move(m));
  }
  if (cfg.consistency_prune) {
    std::vector<Dense> kept = s;
    for (std::size_t a = 0; a < s.size(); ++a) {
      for (std::size_t i = 0; i < s[a].size(); ++i) {
        for (std::size_t j = 0; j < s[a].size(); ++j) {
          for (std::size_t b = 0; b < s.size(); ++b) {
            if (s[b][i][j] == 0) kept[a][i][j] = 0;
          }
        }
      }
    }
    s = std::move(kept);
  }
  std::vector<Dense> out;
  for (const auto& m : s) {
    Dense a = knn(m, cfg.k, false, [](int, int) { return 1.0; });
    out.push_back(cfg.symmetrize ? symmetrize(a) : a);
  }
  return out;
}

inline Dense iib(const InteractionDataset& ds, const GraphConfig& cfg) {
  const int n = ds.num_items();
  std::vector<std::set<int>> users_of(n);
  for (const auto& p : ds.train()) users_of[p.item].insert(p.user);
  Dense c = zeros(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      int both = 0;
      for (const int u : users_of[i]) both += static_cast<int>(users_of[j].count(u));
      c[i][j] = both >= cfg.xi_b ? both : 0.0;
    }
  }
  Dense a = knn(c, cfg.k, true, [&c](int i, int j) { return c[i][j]; });
  for (int i = 0; i < n; ++i) a[i][i] = 1.0;
  return cfg.symmetrize ? symmetrize(a) : a;
}

inline Dense dense_of(const SparseItemGraph& g) {
  Dense d = zeros(g.num_items);
  for (const auto& e : g.edges) d[e.src][e.dst] = e.weight;
  return d;
}

/// A random graph-building instance: features for 2-3 modalities and a
/// train split with enough overlap to produce co-occurrences.
struct GraphInstance {
  InteractionDataset ds;
  std::vector<ModalityFeatures> features;
  GraphConfig config;
};

inline GraphInstance random_graph_instance(std::uint64_t seed, int max_items = 100) {
  std::mt19937_64 gen(seed);
  auto uni = [&gen](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen); };
  GraphInstance inst;
  const int items = uni(3, max_items);
  const int users = uni(1, 40);
  const int mods = uni(2, 3);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int m = 0; m < mods; ++m) {
    const int d = uni(2, 8);
    Matrix x(items, d);
    for (int i = 0; i < items; ++i) {
      for (int c = 0; c < d; ++c) x(i, c) = normal(gen);
    }
    inst.features.push_back({"m" + std::to_string(m), x});
  }
  std::vector<Interaction> train;
  for (int u = 0; u < users; ++u) {
    const int n = uni(1, std::min(items, 12));
    std::vector<int> all(items);
    for (int i = 0; i < items; ++i) all[i] = i;
    std::shuffle(all.begin(), all.end(), gen);
    // Bias toward low indices so that counts above xi_b occur.
    std::sort(all.begin(), all.begin() + std::min(items, 2 * n));
    for (int k = 0; k < n; ++k) train.push_back({u, all[k]});
  }
  inst.ds = InteractionDataset(users, items, train, {}, {});
  inst.config.k = uni(1, 12);
  inst.config.xi_b = uni(1, 3);
  inst.config.symmetrize = uni(0, 3) != 0;
  inst.config.mean_prune = uni(0, 4) != 0;
  inst.config.consistency_prune = uni(0, 4) != 0;
  return inst;
}

}  // namespace damrs::oracle
