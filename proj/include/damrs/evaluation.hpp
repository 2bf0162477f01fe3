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

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

namespace damrs {

struct Metrics {
  double recall = 0;
  double precision = 0;
  double ndcg = 0;
};

/// Items by descending score, ties to the lower index, `excluded` (sorted)
/// removed, truncated to K. A K beyond the candidate pool returns the pool.
inline std::vector<int> rank_items(const Vector& scores, const std::vector<int>& excluded, int k) {
  std::vector<int> cand;
  cand.reserve(scores.size());
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (!std::binary_search(excluded.begin(), excluded.end(), static_cast<int>(i))) cand.push_back(static_cast<int>(i));
  }
  auto better = [&scores](int a, int b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(kk), cand.end(), better);
  cand.resize(kk);
  return cand;
}

inline std::vector<int> rank_items(const Eigen::RowVectorXd& user, const Matrix& items, const std::vector<int>& excluded,
                                   int k) {
  return rank_items(Vector(items * user.transpose()), excluded, k);
}

/// Binary-gain Recall@K, Precision@K and NDCG@K for one user. `truth` is
/// sorted and nonempty.
inline Metrics metrics_at_k(const std::vector<int>& ranked, const std::vector<int>& truth, int k) {
  if (truth.empty()) throw ContractError("metrics_at_k: empty ground truth");
  Metrics m;
  double dcg = 0.0;
  int hits = 0;
  const int depth = std::min<int>(k, static_cast<int>(ranked.size()));
  for (int r = 0; r < depth; ++r) {
    if (std::binary_search(truth.begin(), truth.end(), ranked[r])) {
      ++hits;
      dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
  }
  double idcg = 0.0;
  const int ideal = std::min<int>(k, static_cast<int>(truth.size()));
  for (int r = 0; r < ideal; ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  m.recall = static_cast<double>(hits) / static_cast<double>(truth.size());
  m.precision = static_cast<double>(hits) / static_cast<double>(k);
  m.ndcg = idcg > 0 ? dcg / idcg : 0.0;
  return m;
}

struct UserRanking {
  int user = 0;
  std::vector<int> top;
  std::map<int, Metrics> at;  // K -> metrics
};

struct RankingResult {
  std::vector<UserRanking> users;  // evaluated users only, ascending
  std::map<int, Metrics> mean;     // K -> macro average
  std::size_t evaluated = 0;

  const Metrics& at(int k) const { return mean.at(k); }
};

struct EvalOptions {
  std::vector<int> ks{10, 20};
  /// On the test split, also exclude validation items from the ranking.
  bool exclude_val_at_test = true;
  bool keep_per_user = false;
};

/// Full-catalog ranking on `split` with scores u . t. Users with empty ground
/// truth are skipped and do not count toward the averages.
inline RankingResult evaluate_split(const Matrix& u, const Matrix& t, const InteractionDataset& ds, Split split,
                                    const EvalOptions& opts = {}) {
  if (opts.ks.empty()) throw ConfigError("evaluation needs at least one K");
  const int kmax = *std::max_element(opts.ks.begin(), opts.ks.end());
  RankingResult result;
  for (const int k : opts.ks) result.mean[k] = {};
  std::size_t evaluated = 0;
  for (int user = 0; user < ds.num_users(); ++user) {
    const auto& truth = ds.items_of(split, user);
    if (truth.empty()) continue;
    std::vector<int> excluded = ds.train_items(user);
    if (split == Split::kTest && opts.exclude_val_at_test) {
      const auto& v = ds.val_items(user);
      excluded.insert(excluded.end(), v.begin(), v.end());
      std::sort(excluded.begin(), excluded.end());
    }
    const Vector scores = t * u.row(user).transpose();
    UserRanking ur;
    ur.user = user;
    ur.top = rank_items(scores, excluded, kmax);
    for (const int k : opts.ks) {
      const std::vector<int> prefix(ur.top.begin(), ur.top.begin() + std::min<std::size_t>(k, ur.top.size()));
      const Metrics m = metrics_at_k(prefix, truth, k);
      ur.at[k] = m;
      auto& acc = result.mean[k];
      acc.recall += m.recall;
      acc.precision += m.precision;
      acc.ndcg += m.ndcg;
    }
    ++evaluated;
    if (opts.keep_per_user) result.users.push_back(std::move(ur));
  }
  result.evaluated = evaluated;
  if (evaluated > 0) {
    for (auto& [k, m] : result.mean) {
      m.recall /= static_cast<double>(evaluated);
      m.precision /= static_cast<double>(evaluated);
      m.ndcg /= static_cast<double>(evaluated);
    }
  }
  return result;
}

}  // namespace damrs
