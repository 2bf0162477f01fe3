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

#include <optional>
#include <set>
#include <string>

namespace damrs {

enum class NoiseKind { kFeatureReplace, kFeedbackAdd, kFeedbackRemove };

inline NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "feature-replace") return NoiseKind::kFeatureReplace;
  if (s == "feedback-add") return NoiseKind::kFeedbackAdd;
  if (s == "feedback-remove") return NoiseKind::kFeedbackRemove;
  throw ConfigError("unknown noise kind '" + s + "'");
}

inline std::string noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::kFeatureReplace: return "feature-replace";
    case NoiseKind::kFeedbackAdd: return "feedback-add";
    case NoiseKind::kFeedbackRemove: return "feedback-remove";
  }
  return "?";
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::kFeatureReplace;
  double ratio = 0.0;
  std::optional<std::string> target_modality;
  std::uint64_t seed = 0;
  /// Permits ratios above 0.2 (still capped at 1).
  bool allow_large_ratio = false;

  void validate() const {
    const double cap = allow_large_ratio ? 1.0 : 0.2;
    if (!(ratio >= 0.0 && ratio <= cap + 1e-12)) {
      throw ConfigError("noise ratio " + std::to_string(ratio) + " outside [0, " + std::to_string(cap) + "]");
    }
  }
};

/// Replaces ceil(ratio * |I|) distinct, uniformly sampled rows with the
/// original row of another uniformly sampled item j != i. Sources are drawn
/// from the unmodified input, so an item may serve as a source even if its own
/// row was replaced.
inline ModalityFeatures inject_feature_noise(const ModalityFeatures& features, const NoiseSpec& spec) {
  if (spec.kind != NoiseKind::kFeatureReplace) {
    throw ConfigError("inject_feature_noise requires kind feature-replace");
  }
  spec.validate();
  if (spec.target_modality && *spec.target_modality != features.modality) {
    throw ConfigError("noise targets modality '" + *spec.target_modality + "' but features are '" +
                      features.modality + "'");
  }
  ModalityFeatures out = features;
  const auto n = static_cast<std::size_t>(features.num_items());
  const std::size_t count = ratio_count(spec.ratio, n);
  if (count == 0) return out;
  if (n < 2) {
    throw SaturationError("feature replacement needs at least two items");
  }
  Rng rng(spec.seed);
  for (const std::size_t i : rng.sample_without_replacement(n, count)) {
    // Uniform over the n-1 other items.
    auto j = static_cast<std::size_t>(rng.uniform_index(n - 1));
    if (j >= i) ++j;
    out.values.row(static_cast<Eigen::Index>(i)) = features.values.row(static_cast<Eigen::Index>(j));
  }
  return out;
}

/// Perturbs the train split only. Add-mode inserts ceil(ratio * |train|) pairs
/// absent from all splits; remove-mode deletes as many train pairs, skipping any
/// removal that would leave a val/test user without train interactions.
inline InteractionDataset inject_feedback_noise(const InteractionDataset& ds, const NoiseSpec& spec) {
  if (spec.kind == NoiseKind::kFeatureReplace) {
    throw ConfigError("inject_feedback_noise requires kind feedback-add or feedback-remove");
  }
  spec.validate();
  const std::size_t count = ratio_count(spec.ratio, ds.train().size());
  if (count == 0) return ds;
  Rng rng(spec.seed);
  std::vector<Interaction> train = ds.train();

  if (spec.kind == NoiseKind::kFeedbackRemove) {
    std::vector<std::size_t> remaining(ds.num_users(), 0);
    for (const auto& p : train) ++remaining[p.user];
    std::vector<std::size_t> order(train.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    rng.shuffle(order);
    std::vector<char> drop(train.size(), 0);
    std::size_t removed = 0;
    for (const std::size_t k : order) {
      if (removed == count) break;
      const int u = train[k].user;
      const bool needed = !ds.val_items(u).empty() || !ds.test_items(u).empty();
      if (needed && remaining[u] == 1) continue;
      drop[k] = 1;
      --remaining[u];
      ++removed;
    }
    if (removed < count) {
      throw SaturationError("cannot remove " + std::to_string(count) +
                            " train pairs without orphaning val/test users");
    }
    std::vector<Interaction> kept;
    kept.reserve(train.size() - removed);
    for (std::size_t k = 0; k < train.size(); ++k) {
      if (!drop[k]) kept.push_back(train[k]);
    }
    return InteractionDataset(ds.num_users(), ds.num_items(), std::move(kept), ds.val(), ds.test(),
                              ds.user_ids(), ds.item_ids());
  }

  const std::size_t space = static_cast<std::size_t>(ds.num_users()) * static_cast<std::size_t>(ds.num_items());
  const std::size_t occupied = ds.total_interactions();
  if (occupied + count > space) {
    throw SaturationError("only " + std::to_string(space - occupied) + " absent pairs exist, " +
                          std::to_string(count) + " requested");
  }
  std::vector<Interaction> extra;
  extra.reserve(count);
  if (space - occupied < 4 * count) {
    // Dense regime: enumerate the complement and sample from it.
    std::vector<Interaction> free;
    for (int u = 0; u < ds.num_users(); ++u) {
      for (int i = 0; i < ds.num_items(); ++i) {
        if (!ds.in_any_split(u, i)) free.push_back({u, i});
      }
    }
    for (const std::size_t k : rng.sample_without_replacement(free.size(), count)) extra.push_back(free[k]);
  } else {
    std::set<Interaction> seen;
    while (extra.size() < count) {
      const Interaction p{static_cast<int>(rng.uniform_index(ds.num_users())),
                          static_cast<int>(rng.uniform_index(ds.num_items()))};
      if (ds.in_any_split(p.user, p.item) || !seen.insert(p).second) continue;
      extra.push_back(p);
    }
  }
  train.insert(train.end(), extra.begin(), extra.end());
  return InteractionDataset(ds.num_users(), ds.num_items(), std::move(train), ds.val(), ds.test(),
                            ds.user_ids(), ds.item_ids());
}

}  // namespace damrs
