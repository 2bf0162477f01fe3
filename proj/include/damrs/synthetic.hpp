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

#include <string>
#include <vector>

namespace damrs {

/// Planted-block data: items fall into clusters and every user prefers one
/// cluster. Each modality encodes the cluster as a random centroid, plus a
/// modality-specific nuisance centroid (an item attribute unrelated to
/// preference, drawn independently per modality) and isotropic noise.
struct SyntheticConfig {
  int users = 500;
  int items = 200;
  int clusters = 10;
  std::vector<std::string> modalities{"v", "t"};
  int feature_dim = 16;
  int interactions_per_user = 10;
  double in_cluster = 0.8;
  double feature_noise = 0.6;
  int nuisance_clusters = 0;  // 0 disables the nuisance component
  double nuisance_weight = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (users < 1 || items < 2) throw ConfigError("synthetic data needs >= 1 user and >= 2 items");
    if (clusters < 1 || clusters > items) throw ConfigError("clusters must be in [1, items]");
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (interactions_per_user < 3 || interactions_per_user >= items) {
      throw ConfigError("interactions_per_user must be in [3, items)");
    }
    if (!(in_cluster >= 0 && in_cluster <= 1)) throw ConfigError("in_cluster must be in [0, 1]");
    if (nuisance_clusters < 0) throw ConfigError("nuisance_clusters must be >= 0");
  }
};

/// Item i belongs to cluster i % clusters; user u prefers cluster u % clusters.
/// Each user's items are split 8:1:1 with at least one val and one test item.
inline LoadedData make_planted_blocks(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<std::vector<int>> members(static_cast<std::size_t>(cfg.clusters));
  for (int i = 0; i < cfg.items; ++i) members[static_cast<std::size_t>(i % cfg.clusters)].push_back(i);

  std::vector<Interaction> train, val, test;
  for (int u = 0; u < cfg.users; ++u) {
    const auto& home = members[static_cast<std::size_t>(u % cfg.clusters)];
    std::vector<int> chosen;
    std::vector<char> taken(static_cast<std::size_t>(cfg.items), 0);
    while (static_cast<int>(chosen.size()) < cfg.interactions_per_user) {
      const bool local = rng.uniform01() < cfg.in_cluster;
      const int i = local ? home[rng.uniform_index(home.size())]
                          : static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cfg.items)));
      if (taken[static_cast<std::size_t>(i)]) continue;
      taken[static_cast<std::size_t>(i)] = 1;
      chosen.push_back(i);
    }
    const auto n = chosen.size();
    const std::size_t n_hold = std::max<std::size_t>(1, n / 10);
    for (std::size_t k = 0; k < n; ++k) {
      const Interaction p{u, chosen[k]};
      if (k < n_hold) {
        test.push_back(p);
      } else if (k < 2 * n_hold) {
        val.push_back(p);
      } else {
        train.push_back(p);
      }
    }
  }

  std::vector<ModalityFeatures> features;
  for (const auto& name : cfg.modalities) {
    auto gaussian = [&rng](int rows, int cols) {
      Matrix m(rows, cols);
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal();
      }
      return m;
    };
    const Matrix centroids = gaussian(cfg.clusters, cfg.feature_dim);
    const Matrix nuisance = gaussian(std::max(cfg.nuisance_clusters, 1), cfg.feature_dim);
    std::vector<int> attribute(static_cast<std::size_t>(cfg.items), 0);
    if (cfg.nuisance_clusters > 0) {
      for (auto& a : attribute) a = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cfg.nuisance_clusters)));
    }
    ModalityFeatures f;
    f.modality = name;
    f.values = Matrix(cfg.items, cfg.feature_dim);
    for (int i = 0; i < cfg.items; ++i) {
      for (int c = 0; c < cfg.feature_dim; ++c) {
        double x = centroids(i % cfg.clusters, c) + cfg.feature_noise * rng.normal();
        if (cfg.nuisance_clusters > 0) x += cfg.nuisance_weight * nuisance(attribute[static_cast<std::size_t>(i)], c);
        f.values(i, c) = x;
      }
    }
    features.push_back(std::move(f));
  }
  return {InteractionDataset(cfg.users, cfg.items, std::move(train), std::move(val), std::move(test)),
          std::move(features)};
}

}  // namespace damrs
