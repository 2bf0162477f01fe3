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
#include "damrs/io.hpp"

#include <algorithm>
#include <compare>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace damrs {

struct Interaction {
  int user = 0;
  int item = 0;
  auto operator<=>(const Interaction&) const = default;
};

enum class Split { kTrain, kVal, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

/// Implicit-feedback splits over a dense user/item index space.
///
/// Construction validates the invariants: every index in range, no duplicate
/// pair within a split, and every val/test user present in train. The object
/// is immutable afterwards; noise injection returns a new dataset.
class InteractionDataset {
 public:
  InteractionDataset() = default;

  InteractionDataset(int num_users, int num_items, std::vector<Interaction> train,
                     std::vector<Interaction> val, std::vector<Interaction> test,
                     std::vector<std::string> user_ids = {}, std::vector<std::string> item_ids = {})
      : num_users_(num_users),
        num_items_(num_items),
        train_(std::move(train)),
        val_(std::move(val)),
        test_(std::move(test)),
        user_ids_(std::move(user_ids)),
        item_ids_(std::move(item_ids)) {
    if (num_users_ < 0 || num_items_ < 0) {
      throw IntegrityError("negative user or item count");
    }
    if (user_ids_.empty()) user_ids_ = padded_ids('u', num_users_);
    if (item_ids_.empty()) item_ids_ = padded_ids('i', num_items_);
    if (static_cast<int>(user_ids_.size()) != num_users_ ||
        static_cast<int>(item_ids_.size()) != num_items_) {
      throw DimensionError("external id list length does not match index space");
    }
    if (std::adjacent_find(user_ids_.begin(), user_ids_.end(), std::greater_equal<>()) != user_ids_.end() ||
        std::adjacent_find(item_ids_.begin(), item_ids_.end(), std::greater_equal<>()) != item_ids_.end()) {
      throw IntegrityError("external ids must be unique and lexicographically sorted");
    }
    train_items_.assign(num_users_, {});
    val_items_.assign(num_users_, {});
    test_items_.assign(num_users_, {});
    fill(train_, train_items_, "train");
    fill(val_, val_items_, "val");
    fill(test_, test_items_, "test");
    for (int u = 0; u < num_users_; ++u) {
      if (train_items_[u].empty() && (!val_items_[u].empty() || !test_items_[u].empty())) {
        throw IntegrityError("user '" + user_ids_[u] + "' appears in val/test but not in train");
      }
    }
  }

  int num_users() const { return num_users_; }
  int num_items() const { return num_items_; }
  const std::vector<Interaction>& train() const { return train_; }
  const std::vector<Interaction>& val() const { return val_; }
  const std::vector<Interaction>& test() const { return test_; }
  const std::vector<Interaction>& split(Split s) const {
    return s == Split::kTrain ? train_ : (s == Split::kVal ? val_ : test_);
  }
  const std::vector<std::string>& user_ids() const { return user_ids_; }
  const std::vector<std::string>& item_ids() const { return item_ids_; }

  /// Sorted train items of `user`.
  const std::vector<int>& train_items(int user) const { return train_items_[user]; }
  const std::vector<int>& val_items(int user) const { return val_items_[user]; }
  const std::vector<int>& test_items(int user) const { return test_items_[user]; }
  const std::vector<int>& items_of(Split s, int user) const {
    return s == Split::kTrain ? train_items_[user] : (s == Split::kVal ? val_items_[user] : test_items_[user]);
  }

  bool in_train(int user, int item) const { return contains(train_items_[user], item); }
  bool in_any_split(int user, int item) const {
    return contains(train_items_[user], item) || contains(val_items_[user], item) ||
           contains(test_items_[user], item);
  }

  std::size_t total_interactions() const { return train_.size() + val_.size() + test_.size(); }

 private:
  // Zero-padded so that lexicographic order equals index order.
  static std::vector<std::string> padded_ids(char prefix, int n) {
    const std::size_t width = std::to_string(std::max(n - 1, 0)).size();
    std::vector<std::string> ids;
    ids.reserve(n);
    for (int k = 0; k < n; ++k) {
      std::string digits = std::to_string(k);
      ids.push_back(prefix + std::string(width - digits.size(), '0') + digits);
    }
    return ids;
  }

  static bool contains(const std::vector<int>& sorted, int item) {
    return std::binary_search(sorted.begin(), sorted.end(), item);
  }

  void fill(const std::vector<Interaction>& pairs, std::vector<std::vector<int>>& per_user, const char* name) {
    for (const auto& p : pairs) {
      if (p.user < 0 || p.user >= num_users_ || p.item < 0 || p.item >= num_items_) {
        throw IntegrityError(std::string(name) + ": index (" + std::to_string(p.user) + ", " +
                             std::to_string(p.item) + ") out of range");
      }
      per_user[p.user].push_back(p.item);
    }
    for (int u = 0; u < num_users_; ++u) {
      auto& items = per_user[u];
      std::sort(items.begin(), items.end());
      const auto dup = std::adjacent_find(items.begin(), items.end());
      if (dup != items.end()) {
        throw IntegrityError(std::string(name) + ": duplicate pair (" + user_ids_[u] + ", " +
                             item_ids_[*dup] + ")");
      }
    }
  }

  int num_users_ = 0;
  int num_items_ = 0;
  std::vector<Interaction> train_, val_, test_;
  std::vector<std::string> user_ids_, item_ids_;
  std::vector<std::vector<int>> train_items_, val_items_, test_items_;
};

struct ModalityFeatures {
  std::string modality;
  Matrix values;  // num_items x dim

  int num_items() const { return static_cast<int>(values.rows()); }
  int dim() const { return static_cast<int>(values.cols()); }
};

inline void validate_features(const ModalityFeatures& f, int num_items) {
  if (f.num_items() != num_items) {
    throw DimensionError("features '" + f.modality + "' have " + std::to_string(f.num_items()) +
                         " rows but the dataset has " + std::to_string(num_items) + " items");
  }
  if (!f.values.allFinite()) {
    throw IntegrityError("features '" + f.modality + "' contain non-finite values");
  }
}

struct LoadedData {
  InteractionDataset dataset;
  std::vector<ModalityFeatures> features;
};

namespace detail {

inline std::vector<std::string> read_id_list(const std::filesystem::path& path) {
  std::vector<std::string> ids;
  std::istringstream in(io::read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    std::string id = io::trim(line);
    if (!id.empty()) ids.push_back(std::move(id));
  }
  return ids;
}

}  // namespace detail

/// Loads the three splits and the feature matrices. External IDs are mapped to
/// dense indices by lexicographic order. If `user_list` / `item_list` are given
/// they define the universe; otherwise it is the union of IDs in the splits.
inline LoadedData load_dataset(const std::filesystem::path& train_path, const std::filesystem::path& val_path,
                               const std::filesystem::path& test_path,
                               const std::vector<std::pair<std::string, std::filesystem::path>>& feature_paths,
                               const std::optional<std::filesystem::path>& user_list = std::nullopt,
                               const std::optional<std::filesystem::path>& item_list = std::nullopt) {
  const auto train_raw = io::read_pairs(train_path);
  const auto val_raw = io::read_pairs(val_path);
  const auto test_raw = io::read_pairs(test_path);

  std::set<std::string> users, items;
  const bool fixed_users = user_list.has_value();
  const bool fixed_items = item_list.has_value();
  if (fixed_users) {
    for (auto& id : detail::read_id_list(*user_list)) users.insert(id);
  }
  if (fixed_items) {
    for (auto& id : detail::read_id_list(*item_list)) items.insert(id);
  }
  for (const auto* split : {&train_raw, &val_raw, &test_raw}) {
    for (const auto& [u, i] : *split) {
      if (fixed_users && !users.count(u)) throw IntegrityError("user '" + u + "' not in user list");
      if (fixed_items && !items.count(i)) throw IntegrityError("item '" + i + "' not in item list");
      users.insert(u);
      items.insert(i);
    }
  }
  std::vector<std::string> user_ids(users.begin(), users.end());
  std::vector<std::string> item_ids(items.begin(), items.end());
  std::unordered_map<std::string, int> uidx, iidx;
  for (std::size_t k = 0; k < user_ids.size(); ++k) uidx[user_ids[k]] = static_cast<int>(k);
  for (std::size_t k = 0; k < item_ids.size(); ++k) iidx[item_ids[k]] = static_cast<int>(k);
  auto map_split = [&](const std::vector<std::pair<std::string, std::string>>& raw) {
    std::vector<Interaction> out;
    out.reserve(raw.size());
    for (const auto& [u, i] : raw) out.push_back({uidx.at(u), iidx.at(i)});
    return out;
  };

  LoadedData data{InteractionDataset(static_cast<int>(user_ids.size()), static_cast<int>(item_ids.size()),
                                     map_split(train_raw), map_split(val_raw), map_split(test_raw), user_ids,
                                     item_ids),
                  {}};
  for (const auto& [modality, path] : feature_paths) {
    ModalityFeatures f{modality, io::read_matrix(path)};
    validate_features(f, data.dataset.num_items());
    data.features.push_back(std::move(f));
  }
  return data;
}

/// Feature files in a data directory are named `feat_<modality>.bin` (or `.csv`).
inline std::vector<std::pair<std::string, std::filesystem::path>> discover_features(
    const std::filesystem::path& dir) {
  std::map<std::string, std::filesystem::path> found;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    const auto ext = entry.path().extension().string();
    if (name.rfind("feat_", 0) != 0 || (ext != ".bin" && ext != ".csv")) continue;
    const std::string modality = entry.path().stem().string().substr(5);
    if (found.count(modality) && ext == ".csv") continue;  // prefer binary
    found[modality] = entry.path();
  }
  return {found.begin(), found.end()};
}

/// Loads `train.tsv`, `val.tsv`, `test.tsv`, optional `users.txt` / `items.txt`
/// and every `feat_<m>` file in `dir`.
inline LoadedData load_dataset_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error("data directory " + dir.string() + " does not exist");
  }
  auto opt = [&](const char* name) -> std::optional<std::filesystem::path> {
    const auto p = dir / name;
    return std::filesystem::exists(p) ? std::optional(p) : std::nullopt;
  };
  return load_dataset(dir / "train.tsv", dir / "val.tsv", dir / "test.tsv", discover_features(dir),
                      opt("users.txt"), opt("items.txt"));
}

inline std::string format_pairs(const InteractionDataset& ds, const std::vector<Interaction>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += ds.user_ids()[p.user];
    out += '\t';
    out += ds.item_ids()[p.item];
    out += '\n';
  }
  return out;
}

/// Writes a directory readable by `load_dataset_dir`. The id lists are always
/// written so the index space survives a round trip even for items without
/// interactions.
inline void save_dataset_dir(const std::filesystem::path& dir, const InteractionDataset& ds,
                             const std::vector<ModalityFeatures>& features) {
  std::filesystem::create_directories(dir);
  io::write_file(dir / "train.tsv", format_pairs(ds, ds.train()));
  io::write_file(dir / "val.tsv", format_pairs(ds, ds.val()));
  io::write_file(dir / "test.tsv", format_pairs(ds, ds.test()));
  std::string users, items;
  for (const auto& id : ds.user_ids()) users += id + "\n";
  for (const auto& id : ds.item_ids()) items += id + "\n";
  io::write_file(dir / "users.txt", users);
  io::write_file(dir / "items.txt", items);
  for (const auto& f : features) {
    io::write_matrix_bin(dir / ("feat_" + f.modality + ".bin"), f.values);
  }
}

}  // namespace damrs
