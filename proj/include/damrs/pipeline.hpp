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

// Artifact-producing commands: every command reads well-defined inputs,
// writes a directory of outputs and a manifest.json describing them.

#include "damrs/common.hpp"
#include "damrs/dataset.hpp"
#include "damrs/evaluation.hpp"
#include "damrs/graphs.hpp"
#include "damrs/io.hpp"
#include "damrs/noise.hpp"
#include "damrs/synthetic.hpp"
#include "damrs/training.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace damrs::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Manifests

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Hash of a file, or of every regular file directly inside a directory
/// (sorted by name, manifest.json excluded).
inline json hash_input(const fs::path& p) {
  json j;
  j["path"] = p.string();
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(p)) {
      if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    json entries = json::object();
    for (const auto& f : files) entries[f.filename().string()] = hex64(fnv1a(io::read_file(f)));
    j["files"] = entries;
  } else {
    j["fnv1a64"] = hex64(fnv1a(io::read_file(p)));
  }
  return j;
}

class RunManifest {
 public:
  explicit RunManifest(std::string command) : command_(std::move(command)) {}

  void set_config(json c) { config_ = std::move(c); }
  void add_seed(const std::string& name, std::uint64_t seed) { seeds_[name] = seed; }
  void add_input(const fs::path& p) { inputs_.push_back(hash_input(p)); }
  void add_output(const fs::path& p) { outputs_.push_back(p.string()); }
  void add_timing(const std::string& stage, double seconds) { timings_[stage] = seconds; }

  /// Runs `fn` and records its wall-clock time under `stage`.
  template <typename F>
  auto timed(const std::string& stage, F&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      add_timing(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    } else {
      auto r = fn();
      add_timing(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      return r;
    }
  }

  json to_json() const {
    json j;
    j["command"] = command_;
    j["tool_version"] = kToolVersion;
    j["config"] = config_;
    j["seeds"] = seeds_;
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    j["stage_timings"] = timings_;
    return j;
  }

  void write(const fs::path& dir) const { io::write_file(dir / "manifest.json", to_json().dump(2) + "\n"); }

 private:
  std::string command_;
  json config_ = json::object();
  json seeds_ = json::object();
  json inputs_ = json::array();
  json outputs_ = json::array();
  json timings_ = json::object();
};

inline json config_json(const TrainConfig& c) {
  json j = json::object();
  for (const auto& [k, v] : io::parse_key_values(to_text(c), "<config>")) j[k] = v;
  return j;
}

// ---------------------------------------------------------------------------
// Text reports

/// Space-padded columns, first column left-aligned and the rest right-aligned.
inline std::string aligned_table(const std::vector<std::string>& header,
                                 const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size(), 0);
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string cell = c < r.size() ? r[c] : "";
      if (c) os << "  ";
      if (c == 0) {
        os << std::left << std::setw(static_cast<int>(width[c])) << cell;
      } else {
        os << std::right << std::setw(static_cast<int>(width[c])) << cell;
      }
    }
    os << "\n";
  };
  line(header);
  std::size_t total = 0;
  for (const auto w : width) total += w;
  os << std::string(total + 2 * (width.size() - 1), '-') << "\n";
  for (const auto& r : rows) line(r);
  return os.str();
}

inline std::string csv_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream os;
  for (std::size_t c = 0; c < header.size(); ++c) os << (c ? "," : "") << header[c];
  os << "\n";
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) os << (c ? "," : "") << r[c];
    os << "\n";
  }
  return os.str();
}

inline std::string fixed(double x, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << x;
  return os.str();
}

inline std::vector<std::string> metric_header(const std::vector<int>& ks) {
  std::vector<std::string> h;
  for (const int k : ks) {
    h.push_back("R@" + std::to_string(k));
    h.push_back("P@" + std::to_string(k));
    h.push_back("N@" + std::to_string(k));
  }
  return h;
}

inline std::vector<std::string> metric_cells(const std::map<int, Metrics>& m, const std::vector<int>& ks) {
  std::vector<std::string> out;
  for (const int k : ks) {
    const auto it = m.find(k);
    const Metrics v = it == m.end() ? Metrics{} : it->second;
    out.push_back(fixed(v.recall));
    out.push_back(fixed(v.precision));
    out.push_back(fixed(v.ndcg));
  }
  return out;
}

inline json metrics_json(const std::map<int, Metrics>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = {{"recall", v.recall}, {"precision", v.precision}, {"ndcg", v.ndcg}};
  return j;
}

/// Deterministic summary of a training run (no wall-clock values).
inline json report_json(const TrainReport& r) {
  json j;
  j["variant"] = r.variant;
  j["initial_val"] = r.initial_val;
  j["best_epoch"] = r.best_epoch;
  j["best_val"] = r.best_val;
  j["stop_epoch"] = r.stop_epoch;
  j["early_stopped"] = r.early_stopped;
  j["diverged"] = r.diverged;
  j["last_finite_epoch"] = r.last_finite_epoch;
  if (r.diverged) j["divergence"] = r.divergence_message;
  j["val_metrics"] = metrics_json(r.val_metrics);
  j["test_metrics"] = metrics_json(r.test_metrics);
  return j;
}

inline std::string epochs_csv_deterministic(const TrainReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,ranking,regularizer,au,ai_mm,ai_s,total,val_metric\n";
  for (const auto& e : r.epochs) {
    os << e.epoch << ',' << e.loss.ranking << ',' << e.loss.regularizer << ',' << e.loss.au << ',' << e.loss.ai_mm
       << ',' << e.loss.ai_s << ',' << e.loss.total << ',' << e.val_metric << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Graph directories

inline std::string graph_stats_report(const GraphSet& set) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t g = 0; g < set.graphs.size(); ++g) {
    const auto& st = g < set.stats.size() ? set.stats[g] : GraphStats{};
    rows.push_back({set.graphs[g].modality, fixed(st.mean_similarity), std::to_string(st.mean_pruned),
                    std::to_string(st.consistency_pruned), std::to_string(st.cooccurrence_pruned),
                    std::to_string(set.graphs[g].edges.size())});
  }
  return aligned_table({"graph", "mean_sim", "mean_pruned", "consistency_pruned", "cooccurrence_pruned", "edges"}, rows);
}

/// One `graph_<m>.tsv` edge list (raw weights) per graph plus graphs.json.
inline void write_graph_dir(const fs::path& dir, const GraphSet& set) {
  fs::create_directories(dir);
  json meta;
  meta["k"] = set.config.k;
  meta["xi_b"] = set.config.xi_b;
  meta["symmetrize"] = set.config.symmetrize;
  meta["mean_prune"] = set.config.mean_prune;
  meta["consistency_prune"] = set.config.consistency_prune;
  meta["num_items"] = set.graphs.empty() ? 0 : set.graphs.front().num_items;
  json graphs = json::array();
  for (std::size_t g = 0; g < set.graphs.size(); ++g) {
    const auto& gr = set.graphs[g];
    std::ostringstream os;
    os.precision(17);
    for (const auto& e : gr.edges) os << e.src << '\t' << e.dst << '\t' << e.weight << '\n';
    const std::string file = "graph_" + gr.modality + ".tsv";
    io::write_file(dir / file, os.str());
    json gj{{"modality", gr.modality}, {"file", file}, {"edges", gr.edges.size()}};
    if (g < set.stats.size()) {
      const auto& st = set.stats[g];
      gj["mean_similarity"] = st.mean_similarity;
      gj["mean_pruned"] = st.mean_pruned;
      gj["consistency_pruned"] = st.consistency_pruned;
      gj["cooccurrence_pruned"] = st.cooccurrence_pruned;
    }
    graphs.push_back(gj);
  }
  meta["graphs"] = graphs;
  io::write_file(dir / "graphs.json", meta.dump(2) + "\n");
  io::write_file(dir / "stats.txt", graph_stats_report(set));
}

inline GraphSet read_graph_dir(const fs::path& dir) {
  const fs::path meta_path = dir / "graphs.json";
  if (!fs::exists(meta_path)) throw ContractError("'" + dir.string() + "' is not a graph directory (no graphs.json)");
  json meta;
  try {
    meta = json::parse(io::read_file(meta_path));
  } catch (const json::exception& e) {
    throw ParseError(meta_path.string(), 0, e.what());
  }
  GraphSet set;
  set.config.k = meta.at("k").get<int>();
  set.config.xi_b = meta.at("xi_b").get<int>();
  set.config.symmetrize = meta.at("symmetrize").get<bool>();
  set.config.mean_prune = meta.at("mean_prune").get<bool>();
  set.config.consistency_prune = meta.at("consistency_prune").get<bool>();
  const int n = meta.at("num_items").get<int>();
  for (const auto& gj : meta.at("graphs")) {
    SparseItemGraph g;
    g.modality = gj.at("modality").get<std::string>();
    g.num_items = n;
    const fs::path path = dir / gj.at("file").get<std::string>();
    std::istringstream in(io::read_file(path));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (io::trim(line).empty()) continue;
      const auto parts = io::split(line, '\t');
      if (parts.size() != 3) throw ParseError(path.string(), lineno, "expected 'i<TAB>j<TAB>weight'");
      Edge e;
      try {
        e.src = std::stoi(parts[0]);
        e.dst = std::stoi(parts[1]);
        e.weight = std::stod(parts[2]);
      } catch (const std::exception&) {
        throw ParseError(path.string(), lineno, "malformed edge");
      }
      if (e.src < 0 || e.src >= n || e.dst < 0 || e.dst >= n) throw ParseError(path.string(), lineno, "item out of range");
      if (!(e.weight > 0)) throw ParseError(path.string(), lineno, "edge weight must be > 0");
      g.edges.push_back(e);
    }
    std::sort(g.edges.begin(), g.edges.end());
    GraphStats st;
    st.modality = g.modality;
    st.mean_similarity = gj.value("mean_similarity", 0.0);
    st.mean_pruned = gj.value("mean_pruned", std::size_t{0});
    st.consistency_pruned = gj.value("consistency_pruned", std::size_t{0});
    st.cooccurrence_pruned = gj.value("cooccurrence_pruned", std::size_t{0});
    st.edges = g.edges.size();
    set.stats.push_back(st);
    set.graphs.push_back(normalize_adjacency(std::move(g)));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  TrainConfig config;
  Matrix user_embeddings;
  Matrix item_embeddings;
};

/// Parameter tables, final embeddings (u and t) and the config that made them.
inline void save_checkpoint(const fs::path& dir, const TrainResult& result, const TrainConfig& cfg) {
  fs::create_directories(dir);
  io::write_matrix_bin(dir / "user_table.bin", result.state.user_table);
  io::write_matrix_bin(dir / "item_table.bin", result.state.item_table);
  for (std::size_t g = 0; g < result.state.modality_tables.size(); ++g) {
    io::write_matrix_bin(dir / ("modality_table_" + std::to_string(g) + ".bin"), result.state.modality_tables[g]);
  }
  io::write_matrix_bin(dir / "user_embeddings.bin", result.embeddings.u);
  io::write_matrix_bin(dir / "item_embeddings.bin", result.embeddings.t);
  io::write_file(dir / "config.txt", to_text(cfg));
  io::write_file(dir / "report.json", report_json(result.report).dump(2) + "\n");
  io::write_file(dir / "epochs.csv", epochs_csv_deterministic(result.report));
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  for (const char* f : {"user_embeddings.bin", "item_embeddings.bin", "config.txt"}) {
    if (!fs::exists(dir / f)) throw ContractError("checkpoint '" + dir.string() + "' is missing " + f);
  }
  Checkpoint c;
  c.config = load_train_config(dir / "config.txt");
  c.user_embeddings = io::read_matrix_bin(dir / "user_embeddings.bin");
  c.item_embeddings = io::read_matrix_bin(dir / "item_embeddings.bin");
  if (c.user_embeddings.cols() != c.item_embeddings.cols()) {
    throw DimensionError("checkpoint user and item embeddings have different widths");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Worker pool for grid cells

/// DAMRS_THREADS if set (>= 1), else the hardware concurrency.
inline int worker_limit() {
  if (const char* env = std::getenv("DAMRS_THREADS")) {
    const int n = std::atoi(env);
    if (n < 1) throw ConfigError("DAMRS_THREADS must be a positive integer");
    return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Results must be
/// written to per-index slots; the first exception is rethrown after joining.
template <typename F>
void run_cells(std::size_t n, int threads, F&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(threads, static_cast<int>(n))));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Commands

struct PrepareOptions {
  std::optional<fs::path> input;  // an existing dataset directory to validate and normalize
  std::optional<SyntheticConfig> synthetic;
  fs::path out;
};

inline void cmd_prepare(const PrepareOptions& o, std::ostream& log) {
  if (o.input.has_value() == o.synthetic.has_value()) throw ConfigError("prepare needs exactly one of --in or --synthetic");
  RunManifest man("prepare");
  LoadedData data = man.timed("load", [&] {
    if (o.input) {
      man.add_input(*o.input);
      return load_dataset_dir(*o.input);
    }
    man.add_seed("synthetic", o.synthetic->seed);
    return make_planted_blocks(*o.synthetic);
  });
  if (o.synthetic) {
    const auto& s = *o.synthetic;
    man.set_config({{"users", s.users}, {"items", s.items}, {"clusters", s.clusters}, {"modalities", s.modalities},
                    {"feature_dim", s.feature_dim}, {"interactions_per_user", s.interactions_per_user},
                    {"in_cluster", s.in_cluster}, {"feature_noise", s.feature_noise},
                    {"nuisance_clusters", s.nuisance_clusters}, {"nuisance_weight", s.nuisance_weight}});
  }
  man.timed("write", [&] { save_dataset_dir(o.out, data.dataset, data.features); });
  man.add_output(o.out);
  man.write(o.out);
  log << "users " << data.dataset.num_users() << ", items " << data.dataset.num_items() << ", train "
      << data.dataset.train().size() << ", val " << data.dataset.val().size() << ", test " << data.dataset.test().size()
      << ", modalities " << data.features.size() << "\n";
}

struct NoiseOptions {
  NoiseSpec spec;
  fs::path in;
  fs::path out;
};

inline void cmd_inject_noise(const NoiseOptions& o, std::ostream& log) {
  RunManifest man("inject-noise");
  man.add_input(o.in);
  man.add_seed("noise", o.spec.seed);
  LoadedData data = load_dataset_dir(o.in);
  std::vector<ModalityFeatures> features = data.features;
  InteractionDataset ds = data.dataset;
  std::size_t changed = 0;
  man.timed("inject", [&] {
    if (o.spec.kind == NoiseKind::kFeatureReplace) {
      std::string target;
      if (o.spec.target_modality) {
        target = *o.spec.target_modality;
      } else if (features.size() == 1) {
        target = features.front().modality;
      } else {
        throw ConfigError("feature-replace needs --modality when the dataset has several modalities");
      }
      auto it = std::find_if(features.begin(), features.end(), [&](const auto& f) { return f.modality == target; });
      if (it == features.end()) throw ConfigError("dataset has no modality '" + target + "'");
      NoiseSpec spec = o.spec;
      spec.target_modality = target;
      const ModalityFeatures before = *it;
      *it = inject_feature_noise(before, spec);
      for (Eigen::Index r = 0; r < before.values.rows(); ++r) changed += before.values.row(r) != it->values.row(r);
    } else {
      const std::size_t before = ds.train().size();
      ds = inject_feedback_noise(ds, o.spec);
      changed = before > ds.train().size() ? before - ds.train().size() : ds.train().size() - before;
    }
  });
  man.set_config({{"kind", noise_kind_name(o.spec.kind)},
                  {"ratio", o.spec.ratio},
                  {"modality", o.spec.target_modality.value_or("")},
                  {"allow_large_ratio", o.spec.allow_large_ratio},
                  {"changed", changed},
                  {"train", ds.train().size()}});
  man.timed("write", [&] { save_dataset_dir(o.out, ds, features); });
  man.add_output(o.out);
  man.write(o.out);
  log << noise_kind_name(o.spec.kind) << " ratio " << o.spec.ratio << ": " << changed
      << (o.spec.kind == NoiseKind::kFeatureReplace ? " rows replaced" : " train pairs changed") << "\n";
}

inline void cmd_build_graphs(const fs::path& config_path, const fs::path& in, const fs::path& out, std::ostream& log) {
  RunManifest man("build-graphs");
  const TrainConfig cfg = load_train_config(config_path);
  man.add_input(config_path);
  man.add_input(in);
  man.set_config(config_json(cfg));
  const LoadedData data = man.timed("load", [&] { return load_dataset_dir(in); });
  const GraphSet set = man.timed("build", [&] { return build_graph_set(data.dataset, data.features, cfg.graph_config()); });
  man.timed("write", [&] { write_graph_dir(out, set); });
  man.add_output(out);
  man.write(out);
  log << graph_stats_report(set);
}

/// Returns the process exit status: 0 on success, 3 when training diverged.
inline int cmd_train(const fs::path& config_path, const fs::path& data_dir, const std::optional<fs::path>& graphs_dir,
                     const fs::path& out, std::ostream& log) {
  RunManifest man("train");
  const TrainConfig cfg = load_train_config(config_path);
  man.add_input(config_path);
  man.add_input(data_dir);
  man.set_config(config_json(cfg));
  man.add_seed("train", cfg.seed);
  const VariantSpec variant = cfg.variant_spec();
  const LoadedData data = man.timed("load", [&] { return load_dataset_dir(data_dir); });
  std::optional<GraphSet> graphs;
  if (variant.use_graphs) {
    if (!graphs_dir) throw ContractError("variant '" + variant.name + "' needs --graphs (run build-graphs first)");
    man.add_input(*graphs_dir);
    graphs = read_graph_dir(*graphs_dir);
    for (const auto& g : graphs->graphs) {
      if (g.num_items != data.dataset.num_items()) throw DimensionError("graphs were built for a different item count");
    }
  }
  TrainOptions opts;
  opts.on_epoch = [&log](const EpochRecord& e) {
    log << "epoch " << e.epoch << "  loss " << fixed(e.loss.total, 6) << "  val " << fixed(e.val_metric) << "\n";
  };
  const TrainResult result =
      man.timed("train", [&] { return train(data.dataset, graphs ? &*graphs : nullptr, cfg, opts); });
  man.timed("write", [&] { save_checkpoint(out, result, cfg); });
  man.add_output(out);
  man.write(out);
  const auto& r = result.report;
  if (r.diverged) {
    log << "training diverged: " << r.divergence_message << " (last finite epoch " << r.last_finite_epoch << ")\n";
    return 3;
  }
  log << "best epoch " << r.best_epoch << " (val R@" << cfg.val_k << " " << fixed(r.best_val) << "), stopped at "
      << r.stop_epoch << "\n";
  log << aligned_table([&] {
    auto h = metric_header(cfg.eval_ks);
    h.insert(h.begin(), "split");
    return h;
  }(), {[&] {
          auto c = metric_cells(r.test_metrics, cfg.eval_ks);
          c.insert(c.begin(), "test");
          return c;
        }()});
  return 0;
}

struct EvaluateOptions {
  fs::path checkpoint;
  fs::path data;
  std::vector<int> ks{10, 20};
  Split split = Split::kTest;
  bool per_user = false;
  std::optional<fs::path> out;  // default: <checkpoint>/evaluation
};

inline RankingResult cmd_evaluate(const EvaluateOptions& o, std::ostream& log) {
  RunManifest man("evaluate");
  man.add_input(o.checkpoint);
  man.add_input(o.data);
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const LoadedData data = load_dataset_dir(o.data);
  if (ck.user_embeddings.rows() != data.dataset.num_users() || ck.item_embeddings.rows() != data.dataset.num_items()) {
    throw DimensionError("checkpoint does not match the dataset's user/item counts");
  }
  EvalOptions eo;
  eo.ks = o.ks;
  eo.keep_per_user = o.per_user;
  eo.exclude_val_at_test = ck.config.exclude_val_at_test;
  const RankingResult res = man.timed("evaluate", [&] {
    return evaluate_split(ck.user_embeddings, ck.item_embeddings, data.dataset, o.split, eo);
  });
  const fs::path out = o.out.value_or(o.checkpoint / "evaluation");
  std::string ks;
  for (std::size_t i = 0; i < o.ks.size(); ++i) ks += (i ? "," : "") + std::to_string(o.ks[i]);
  man.set_config({{"split", split_name(o.split)}, {"k", ks}, {"per_user", o.per_user}});
  auto header = metric_header(o.ks);
  header.insert(header.begin(), {"split", "users"});
  auto row = metric_cells(res.mean, o.ks);
  row.insert(row.begin(), {split_name(o.split), std::to_string(res.evaluated)});
  io::write_file(out / "metrics.csv", csv_table(header, {row}));
  if (o.per_user) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& ur : res.users) {
      auto r = metric_cells(ur.at, o.ks);
      r.insert(r.begin(), data.dataset.user_ids()[ur.user]);
      rows.push_back(std::move(r));
    }
    auto h = metric_header(o.ks);
    h.insert(h.begin(), "user");
    io::write_file(out / "per_user.csv", csv_table(h, rows));
  }
  man.add_output(out);
  man.write(out);
  log << aligned_table(header, {row});
  return res;
}

// ---------------------------------------------------------------------------
// Grids

/// A TrainConfig plus the lists a grid runs over. Grid files use the config
/// syntax with three extra keys: variants, seeds and ratios.
struct GridSpec {
  TrainConfig base;
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::vector<double> ratios{0.0, 0.05, 0.10, 0.15, 0.20};
  std::optional<std::string> modality;
};

inline GridSpec parse_grid(std::string_view text, const std::string& origin) {
  GridSpec g;
  for (const auto& [key, value] : io::parse_key_values(text, origin)) {
    if (key == "variants") {
      for (const auto& v : io::split(value, ',')) g.variants.push_back(resolve_variant(v).name);
    } else if (key == "seeds") {
      for (const auto& s : io::split(value, ',')) {
        const long long x = detail::parse_integer("seeds", s);
        if (x < 0) throw ConfigError("seeds must be >= 0");
        g.seeds.push_back(static_cast<std::uint64_t>(x));
      }
    } else if (key == "ratios") {
      g.ratios.clear();
      for (const auto& r : io::split(value, ',')) g.ratios.push_back(detail::parse_double("ratios", r));
    } else if (key == "modality") {
      g.modality = value;
    } else {
      apply_setting(g.base, key, value);
    }
  }
  if (g.variants.empty()) g.variants = variant_names();
  g.base.validate();
  return g;
}

inline GridSpec load_grid(const fs::path& path) { return parse_grid(io::read_file(path), path.string()); }

struct CellResult {
  std::string variant;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  TrainReport report;
};

namespace detail {

inline std::string cell_dir_name(double ratio) {
  std::ostringstream os;
  os << "ratio_" << std::fixed << std::setprecision(2) << ratio;
  return os.str();
}

inline Metrics mean_metrics(const std::vector<const CellResult*>& cells, int k) {
  Metrics m;
  for (const auto* c : cells) {
    const auto it = c->report.test_metrics.find(k);
    if (it == c->report.test_metrics.end()) continue;
    m.recall += it->second.recall;
    m.precision += it->second.precision;
    m.ndcg += it->second.ndcg;
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, cells.size()));
  m.recall /= n;
  m.precision /= n;
  m.ndcg /= n;
  return m;
}

inline std::map<int, Metrics> mean_metrics(const std::vector<const CellResult*>& cells, const std::vector<int>& ks) {
  std::map<int, Metrics> out;
  for (const int k : ks) out[k] = mean_metrics(cells, k);
  return out;
}

inline std::string seeds_text(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? ";" : "") + std::to_string(seeds[i]);
  return s;
}

inline void write_cell(const fs::path& dir, const CellResult& c) {
  io::write_file(dir / "report.json", report_json(c.report).dump(2) + "\n");
  io::write_file(dir / "epochs.csv", epochs_csv_deterministic(c.report));
}

}  // namespace detail

/// Trains every variant for every seed; writes ablation.csv (seed-averaged
/// test metrics per variant), ablation_cells.csv and ablation.txt.
inline std::vector<CellResult> cmd_ablate(GridSpec grid, const fs::path& data_dir, const fs::path& out, int threads,
                                          std::ostream& log) {
  if (grid.seeds.empty()) throw ConfigError("ablate needs seeds (grid key 'seeds' or --seeds)");
  RunManifest man("ablate");
  man.add_input(data_dir);
  man.set_config([&] {
    json j = config_json(grid.base);
    j["variants"] = grid.variants;
    return j;
  }());
  for (const auto s : grid.seeds) man.add_seed("seed_" + std::to_string(s), s);
  const LoadedData data = load_dataset_dir(data_dir);

  // Graphs depend only on the pruning flags, so build each flavor once.
  const GraphConfig base_gc = grid.base.graph_config();
  std::map<std::pair<bool, bool>, GraphSet> graph_sets;
  man.timed("graphs", [&] {
    for (const auto& v : grid.variants) {
      const auto spec = resolve_variant(v);
      if (!spec.use_graphs) continue;
      const std::pair<bool, bool> key{spec.mean_prune, spec.consistency_prune};
      if (graph_sets.count(key)) continue;
      GraphConfig gc = base_gc;
      gc.mean_prune = spec.mean_prune;
      gc.consistency_prune = spec.consistency_prune;
      graph_sets.emplace(key, build_graph_set(data.dataset, data.features, gc));
    }
  });

  std::vector<CellResult> cells;
  for (const auto& v : grid.variants) {
    for (const auto s : grid.seeds) cells.push_back({v, 0.0, s, {}});
  }
  man.timed("train", [&] {
    run_cells(cells.size(), threads, [&](std::size_t i) {
      auto& c = cells[i];
      TrainConfig cfg = grid.base;
      cfg.variant = c.variant;
      cfg.seed = c.seed;
      const auto spec = cfg.variant_spec();
      const GraphSet* gs = spec.use_graphs ? &graph_sets.at({spec.mean_prune, spec.consistency_prune}) : nullptr;
      c.report = train(data.dataset, gs, cfg).report;
      detail::write_cell(out / "cells" / c.variant / ("seed_" + std::to_string(c.seed)), c);
    });
  });

  const auto& ks = grid.base.eval_ks;
  std::vector<std::vector<std::string>> rows, cell_rows;
  for (const auto& v : grid.variants) {
    std::vector<const CellResult*> mine;
    for (const auto& c : cells) {
      if (c.variant == v) mine.push_back(&c);
    }
    auto row = metric_cells(detail::mean_metrics(mine, ks), ks);
    row.insert(row.begin(), {v, std::to_string(mine.size())});
    rows.push_back(std::move(row));
  }
  for (const auto& c : cells) {
    auto row = metric_cells(c.report.test_metrics, ks);
    row.insert(row.begin(), {c.variant, std::to_string(c.seed), std::to_string(c.report.best_epoch),
                             c.report.diverged ? "1" : "0"});
    cell_rows.push_back(std::move(row));
  }
  auto header = metric_header(ks);
  header.insert(header.begin(), {"variant", "seeds"});
  auto cell_header = metric_header(ks);
  cell_header.insert(cell_header.begin(), {"variant", "seed", "best_epoch", "diverged"});
  io::write_file(out / "ablation.csv", csv_table(header, rows));
  io::write_file(out / "ablation_cells.csv", csv_table(cell_header, cell_rows));
  const std::string text = aligned_table(header, rows);
  io::write_file(out / "ablation.txt", text);
  man.add_output(out);
  man.write(out);
  log << text;
  return cells;
}

struct RobustnessOptions {
  NoiseKind kind = NoiseKind::kFeatureReplace;
  bool allow_large_ratio = false;
};

/// For each noise ratio and seed, perturbs the data once and trains every
/// variant on it. robustness.csv has one seed-averaged row per (variant,
/// ratio) with the relative drop of R@val_k from ratio 0.
inline std::vector<CellResult> cmd_robustness(GridSpec grid, const RobustnessOptions& ro, const fs::path& data_dir,
                                              const fs::path& out, int threads, std::ostream& log) {
  if (grid.seeds.empty()) throw ConfigError("robustness needs seeds (grid key 'seeds' or --seeds)");
  if (grid.ratios.empty()) throw ConfigError("robustness needs at least one ratio");
  RunManifest man("robustness");
  man.add_input(data_dir);
  man.set_config([&] {
    json j = config_json(grid.base);
    j["variants"] = grid.variants;
    j["ratios"] = grid.ratios;
    j["kind"] = noise_kind_name(ro.kind);
    j["modality"] = grid.modality.value_or("");
    return j;
  }());
  for (const auto s : grid.seeds) man.add_seed("seed_" + std::to_string(s), s);
  const LoadedData data = load_dataset_dir(data_dir);
  std::string target;
  if (ro.kind == NoiseKind::kFeatureReplace) {
    if (grid.modality) {
      target = *grid.modality;
    } else if (!data.features.empty()) {
      target = data.features.front().modality;
    } else {
      throw ConfigError("feature-replace robustness needs a dataset with features");
    }
  }

  // One perturbed dataset per (ratio, seed), shared across variants.
  struct Perturbed {
    double ratio;
    std::uint64_t seed;
    std::optional<LoadedData> data;
    std::map<std::pair<bool, bool>, GraphSet> graphs;
  };
  std::vector<Perturbed> perturbed;
  for (const double r : grid.ratios) {
    for (const auto s : grid.seeds) perturbed.push_back({r, s, std::nullopt, {}});
  }
  man.timed("perturb", [&] {
    run_cells(perturbed.size(), threads, [&](std::size_t i) {
      auto& p = perturbed[i];
      NoiseSpec spec;
      spec.kind = ro.kind;
      spec.ratio = p.ratio;
      spec.allow_large_ratio = ro.allow_large_ratio;
      spec.seed = mix_seed(p.seed, 0x401e + static_cast<std::uint64_t>(std::llround(p.ratio * 1e6)));
      LoadedData d = data;
      if (ro.kind == NoiseKind::kFeatureReplace) {
        spec.target_modality = target;
        auto it = std::find_if(d.features.begin(), d.features.end(), [&](const auto& f) { return f.modality == target; });
        if (it == d.features.end()) throw ConfigError("dataset has no modality '" + target + "'");
        *it = inject_feature_noise(*it, spec);
      } else {
        d.dataset = inject_feedback_noise(d.dataset, spec);
      }
      for (const auto& v : grid.variants) {
        const auto vs = resolve_variant(v);
        if (!vs.use_graphs) continue;
        const std::pair<bool, bool> key{vs.mean_prune, vs.consistency_prune};
        if (p.graphs.count(key)) continue;
        GraphConfig gc = grid.base.graph_config();
        gc.mean_prune = vs.mean_prune;
        gc.consistency_prune = vs.consistency_prune;
        p.graphs.emplace(key, build_graph_set(d.dataset, d.features, gc));
      }
      p.data = std::move(d);
    });
  });

  std::vector<CellResult> cells;
  std::vector<std::size_t> source;
  for (const auto& v : grid.variants) {
    for (std::size_t p = 0; p < perturbed.size(); ++p) {
      cells.push_back({v, perturbed[p].ratio, perturbed[p].seed, {}});
      source.push_back(p);
    }
  }
  man.timed("train", [&] {
    run_cells(cells.size(), threads, [&](std::size_t i) {
      auto& c = cells[i];
      const auto& p = perturbed[source[i]];
      TrainConfig cfg = grid.base;
      cfg.variant = c.variant;
      cfg.seed = c.seed;
      const auto spec = cfg.variant_spec();
      const GraphSet* gs = spec.use_graphs ? &p.graphs.at({spec.mean_prune, spec.consistency_prune}) : nullptr;
      c.report = train(p.data->dataset, gs, cfg).report;
      detail::write_cell(out / "cells" / c.variant / detail::cell_dir_name(c.ratio) / ("seed_" + std::to_string(c.seed)),
                         c);
    });
  });

  const auto& ks = grid.base.eval_ks;
  const int drop_k = grid.base.val_k;
  std::vector<std::vector<std::string>> rows, cell_rows;
  for (const auto& v : grid.variants) {
    double baseline = -1.0;
    for (const double r : grid.ratios) {
      std::vector<const CellResult*> mine;
      for (const auto& c : cells) {
        if (c.variant == v && c.ratio == r) mine.push_back(&c);
      }
      const auto mean = detail::mean_metrics(mine, ks);
      const double headline = detail::mean_metrics(mine, drop_k).recall;
      if (r == grid.ratios.front()) baseline = headline;
      const double drop = baseline > 0 ? 1.0 - headline / baseline : 0.0;
      auto row = metric_cells(mean, ks);
      row.insert(row.begin(), {v, fixed(r, 2), std::to_string(mine.size())});
      row.push_back(fixed(drop));
      rows.push_back(std::move(row));
    }
  }
  for (const auto& c : cells) {
    auto row = metric_cells(c.report.test_metrics, ks);
    row.insert(row.begin(), {c.variant, fixed(c.ratio, 2), std::to_string(c.seed), std::to_string(c.report.best_epoch)});
    cell_rows.push_back(std::move(row));
  }
  auto header = metric_header(ks);
  header.insert(header.begin(), {"variant", "ratio", "seeds"});
  header.push_back("drop_R@" + std::to_string(drop_k));
  auto cell_header = metric_header(ks);
  cell_header.insert(cell_header.begin(), {"variant", "ratio", "seed", "best_epoch"});
  io::write_file(out / "robustness.csv", csv_table(header, rows));
  io::write_file(out / "robustness_cells.csv", csv_table(cell_header, cell_rows));
  const std::string text = aligned_table(header, rows);
  io::write_file(out / "robustness.txt", text);
  man.add_output(out);
  man.write(out);
  log << text;
  return cells;
}

}  // namespace damrs::pipeline
