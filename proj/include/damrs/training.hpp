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
#include "damrs/evaluation.hpp"
#include "damrs/graphs.hpp"
#include "damrs/io.hpp"
#include "damrs/losses.hpp"
#include "damrs/model.hpp"

#include <chrono>
#include <charconv>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace damrs {

// ---------------------------------------------------------------------------
// Variants

/// Which graphs are built and which loss terms are active for one row of the
/// ablation matrix.
struct VariantSpec {
  std::string name;
  bool use_graphs = true;
  bool mean_prune = true;
  bool consistency_prune = true;
  bool denoised = false;
  std::optional<double> f_override;
  std::optional<double> g_override;
  bool use_au = false;
  bool use_ai = false;
  AlignStrategy strategy = AlignStrategy::kAI;
};

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {
      "backbone", "IIG",    "DIIG",     "DIIG+D-BPR", "DIIG+AU", "DIIG+AI",
      "DIIG+AUI", "DA-MRS", "DA-MRS-f", "DA-MRS-g",   "SP",      "MP"};
  return names;
}

inline VariantSpec resolve_variant(std::string tag) {
  // U+2212 MINUS SIGN is accepted in place of '-'.
  for (auto pos = tag.find("\xE2\x88\x92"); pos != std::string::npos; pos = tag.find("\xE2\x88\x92")) {
    tag.replace(pos, 3, "-");
  }
  if (tag == "DIIG+SP") tag = "SP";
  if (tag == "DIIG+MP") tag = "MP";
  VariantSpec v;
  v.name = tag;
  if (tag == "backbone") {
    v.use_graphs = false;
    v.mean_prune = v.consistency_prune = false;
  } else if (tag == "IIG") {
    v.mean_prune = v.consistency_prune = false;
  } else if (tag == "DIIG") {
  } else if (tag == "DIIG+D-BPR") {
    v.denoised = true;
  } else if (tag == "DIIG+AU") {
    v.use_au = true;
  } else if (tag == "DIIG+AI") {
    v.use_ai = true;
  } else if (tag == "DIIG+AUI") {
    v.use_au = v.use_ai = true;
  } else if (tag == "DA-MRS") {
    v.denoised = v.use_au = v.use_ai = true;
  } else if (tag == "DA-MRS-f") {
    v.denoised = v.use_au = v.use_ai = true;
    v.f_override = 1.0;
  } else if (tag == "DA-MRS-g") {
    v.denoised = v.use_au = v.use_ai = true;
    v.g_override = 0.0;
  } else if (tag == "SP") {
    v.use_ai = true;
    v.strategy = AlignStrategy::kSP;
  } else if (tag == "MP") {
    v.use_ai = true;
    v.strategy = AlignStrategy::kMP;
  } else {
    throw ConfigError("unknown variant '" + tag + "'");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Configuration

enum class RankingLoss { kVariant, kBPR, kDBPR };

struct TrainConfig {
  std::string variant = "DA-MRS";
  Backbone backbone = Backbone::kLightGCN;
  int dim = 64;
  int batch_size = 4096;
  double learning_rate = 1e-3;
  double lambda_theta = 1e-4;
  double lambda1 = 0.1;
  double lambda2 = 0.01;
  double alpha = 1.5;
  double beta = 1.5;
  double gamma = 1.0;
  double tau = 0.2;
  int k_align = 10;
  int k = 10;
  int xi_b = 2;
  bool symmetrize = true;
  int backbone_layers = 2;
  int graph_layers = 2;
  bool separate_modality_tables = false;
  int patience = 25;
  int max_epochs = 1000;
  std::uint64_t seed = 0;
  NegativeScope negative_scope = NegativeScope::kBatch;
  bool stop_gradient_weights = false;
  int au_sample_items = 0;
  int val_k = 20;
  std::vector<int> eval_ks{10, 20};
  bool exclude_val_at_test = true;
  RankingLoss ranking_loss = RankingLoss::kVariant;
  std::optional<double> f_override;
  std::optional<double> g_override;

  void validate() const {
    resolve_variant(variant);
    if (dim < 1) throw ConfigError("dim must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (lambda_theta < 0) throw ConfigError("lambda_theta must be >= 0");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
    if (backbone_layers < 0 || graph_layers < 0) throw ConfigError("layer counts must be >= 0");
    if (val_k < 1) throw ConfigError("val_k must be >= 1");
    if (au_sample_items < 0) throw ConfigError("au_sample_items must be >= 0");
    for (const int kk : eval_ks) {
      if (kk < 1) throw ConfigError("eval_ks entries must be >= 1");
    }
    if (eval_ks.empty()) throw ConfigError("eval_ks must not be empty");
    GraphConfig{k, xi_b, symmetrize, true, true}.validate();
    DenoiseConfig d;
    d.alpha = alpha;
    d.beta = beta;
    d.gamma = gamma;
    d.validate();
    AlignConfig a;
    a.tau = tau;
    a.k_align = k_align;
    a.lambda1 = lambda1;
    a.lambda2 = lambda2;
    a.validate();
  }

  VariantSpec variant_spec() const { return resolve_variant(variant); }

  GraphConfig graph_config() const {
    const auto v = variant_spec();
    return GraphConfig{k, xi_b, symmetrize, v.mean_prune, v.consistency_prune};
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.dim = dim;
    m.backbone = backbone;
    m.backbone_layers = backbone_layers;
    m.graph_layers = graph_layers;
    m.separate_modality_tables = separate_modality_tables;
    return m;
  }

  ObjectiveConfig objective_config() const {
    const auto v = variant_spec();
    ObjectiveConfig o;
    o.denoised = ranking_loss == RankingLoss::kVariant ? v.denoised : ranking_loss == RankingLoss::kDBPR;
    o.use_au = v.use_au;
    o.use_ai = v.use_ai;
    o.lambda_theta = lambda_theta;
    o.denoise.alpha = alpha;
    o.denoise.beta = beta;
    o.denoise.gamma = gamma;
    o.denoise.f_override = f_override ? f_override : v.f_override;
    o.denoise.g_override = g_override ? g_override : v.g_override;
    o.denoise.stop_gradient_weights = stop_gradient_weights;
    o.denoise.negative_scope = negative_scope;
    o.align.tau = tau;
    o.align.k_align = k_align;
    o.align.lambda1 = lambda1;
    o.align.lambda2 = lambda2;
    o.align.strategy = v.strategy;
    o.align.au_sample_items = au_sample_items;
    return o;
  }
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("key '" + key + "': not a number: '" + v + "'");
  return out;
}

inline long long parse_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("key '" + key + "': not an integer: '" + v + "'");
  return out;
}

inline int parse_int(const std::string& key, const std::string& v) {
  const long long x = parse_integer(key, v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
    throw ConfigError("key '" + key + "': out of range");
  }
  return static_cast<int>(x);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("key '" + key + "': not a boolean: '" + v + "'");
}

inline std::optional<double> parse_optional(const std::string& key, const std::string& v) {
  if (v == "none" || v.empty()) return std::nullopt;
  return parse_double(key, v);
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, r.ptr);
}

}  // namespace detail

inline std::vector<int> parse_k_list(const std::string& text) {
  std::vector<int> ks;
  for (const auto& piece : io::split(text, ',')) ks.push_back(detail::parse_int("k list", piece));
  if (ks.empty()) throw ConfigError("empty K list");
  return ks;
}

/// Applies one `key = value` setting. Unknown keys are errors.
inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "variant") {
    c.variant = resolve_variant(v).name;
  } else if (key == "backbone") {
    c.backbone = parse_backbone(v);
  } else if (key == "dim") {
    c.dim = parse_int(key, v);
  } else if (key == "batch_size") {
    c.batch_size = parse_int(key, v);
  } else if (key == "learning_rate") {
    c.learning_rate = parse_double(key, v);
  } else if (key == "lambda_theta") {
    c.lambda_theta = parse_double(key, v);
  } else if (key == "lambda1") {
    c.lambda1 = parse_double(key, v);
  } else if (key == "lambda2") {
    c.lambda2 = parse_double(key, v);
  } else if (key == "alpha") {
    c.alpha = parse_double(key, v);
  } else if (key == "beta") {
    c.beta = parse_double(key, v);
  } else if (key == "gamma") {
    c.gamma = parse_double(key, v);
  } else if (key == "tau") {
    c.tau = parse_double(key, v);
  } else if (key == "k_align") {
    c.k_align = parse_int(key, v);
  } else if (key == "k") {
    c.k = parse_int(key, v);
  } else if (key == "xi_b") {
    c.xi_b = parse_int(key, v);
  } else if (key == "symmetrize") {
    c.symmetrize = parse_bool(key, v);
  } else if (key == "backbone_layers") {
    c.backbone_layers = parse_int(key, v);
  } else if (key == "graph_layers") {
    c.graph_layers = parse_int(key, v);
  } else if (key == "separate_modality_tables") {
    c.separate_modality_tables = parse_bool(key, v);
  } else if (key == "patience") {
    c.patience = parse_int(key, v);
  } else if (key == "max_epochs") {
    c.max_epochs = parse_int(key, v);
  } else if (key == "seed") {
    const long long s = parse_integer(key, v);
    if (s < 0) throw ConfigError("seed must be >= 0");
    c.seed = static_cast<std::uint64_t>(s);
  } else if (key == "negative_scope") {
    if (v == "batch") {
      c.negative_scope = NegativeScope::kBatch;
    } else if (v == "user") {
      c.negative_scope = NegativeScope::kUser;
    } else {
      throw ConfigError("negative_scope must be 'batch' or 'user'");
    }
  } else if (key == "stop_gradient_weights") {
    c.stop_gradient_weights = parse_bool(key, v);
  } else if (key == "au_sample_items") {
    c.au_sample_items = parse_int(key, v);
  } else if (key == "val_k") {
    c.val_k = parse_int(key, v);
  } else if (key == "eval_ks") {
    c.eval_ks = parse_k_list(v);
  } else if (key == "exclude_val_at_test") {
    c.exclude_val_at_test = parse_bool(key, v);
  } else if (key == "ranking_loss") {
    if (v == "variant") {
      c.ranking_loss = RankingLoss::kVariant;
    } else if (v == "bpr") {
      c.ranking_loss = RankingLoss::kBPR;
    } else if (v == "dbpr") {
      c.ranking_loss = RankingLoss::kDBPR;
    } else {
      throw ConfigError("ranking_loss must be 'variant', 'bpr' or 'dbpr'");
    }
  } else if (key == "f_override") {
    c.f_override = parse_optional(key, v);
  } else if (key == "g_override") {
    c.g_override = parse_optional(key, v);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

inline TrainConfig parse_train_config(std::string_view text, const std::string& origin = "<config>",
                                      TrainConfig base = {}) {
  for (const auto& [key, value] : io::parse_key_values(text, origin)) apply_setting(base, key, value);
  base.validate();
  return base;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  return parse_train_config(io::read_file(path), path.string());
}

/// Every key, one per line, in a form `parse_train_config` reads back.
inline std::string to_text(const TrainConfig& c) {
  using detail::format_double;
  std::ostringstream os;
  auto opt = [](const std::optional<double>& x) { return x ? format_double(*x) : std::string("none"); };
  std::string ks;
  for (std::size_t i = 0; i < c.eval_ks.size(); ++i) ks += (i ? "," : "") + std::to_string(c.eval_ks[i]);
  const char* scope = c.negative_scope == NegativeScope::kBatch ? "batch" : "user";
  const char* rl = c.ranking_loss == RankingLoss::kVariant ? "variant" : (c.ranking_loss == RankingLoss::kBPR ? "bpr" : "dbpr");
  os << "variant = " << c.variant << "\n"
     << "backbone = " << backbone_name(c.backbone) << "\n"
     << "dim = " << c.dim << "\n"
     << "batch_size = " << c.batch_size << "\n"
     << "learning_rate = " << format_double(c.learning_rate) << "\n"
     << "lambda_theta = " << format_double(c.lambda_theta) << "\n"
     << "lambda1 = " << format_double(c.lambda1) << "\n"
     << "lambda2 = " << format_double(c.lambda2) << "\n"
     << "alpha = " << format_double(c.alpha) << "\n"
     << "beta = " << format_double(c.beta) << "\n"
     << "gamma = " << format_double(c.gamma) << "\n"
     << "tau = " << format_double(c.tau) << "\n"
     << "k_align = " << c.k_align << "\n"
     << "k = " << c.k << "\n"
     << "xi_b = " << c.xi_b << "\n"
     << "symmetrize = " << (c.symmetrize ? "true" : "false") << "\n"
     << "backbone_layers = " << c.backbone_layers << "\n"
     << "graph_layers = " << c.graph_layers << "\n"
     << "separate_modality_tables = " << (c.separate_modality_tables ? "true" : "false") << "\n"
     << "patience = " << c.patience << "\n"
     << "max_epochs = " << c.max_epochs << "\n"
     << "seed = " << c.seed << "\n"
     << "negative_scope = " << scope << "\n"
     << "stop_gradient_weights = " << (c.stop_gradient_weights ? "true" : "false") << "\n"
     << "au_sample_items = " << c.au_sample_items << "\n"
     << "val_k = " << c.val_k << "\n"
     << "eval_ks = " << ks << "\n"
     << "exclude_val_at_test = " << (c.exclude_val_at_test ? "true" : "false") << "\n"
     << "ranking_loss = " << rl << "\n"
     << "f_override = " << opt(c.f_override) << "\n"
     << "g_override = " << opt(c.g_override) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update over every parameter matrix.
inline void optimizer_step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
                           AdamState& st, double lr, const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) throw DimensionError("optimizer_step: parameter and gradient counts differ");
  if (st.m.empty()) {
    for (const auto* p : params) {
      st.m.push_back(Matrix::Zero(p->rows(), p->cols()));
      st.v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (st.m.size() != params.size()) throw DimensionError("optimizer_step: state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k]->rows() != params[k]->rows() || grads[k]->cols() != params[k]->cols()) {
      throw DimensionError("optimizer_step: gradient " + std::to_string(k) + " has the wrong shape");
    }
    if (!grads[k]->allFinite()) {
      const Eigen::Index bad = static_cast<Eigen::Index>(
          std::find_if(grads[k]->data(), grads[k]->data() + grads[k]->size(), [](double x) { return !std::isfinite(x); }) -
          grads[k]->data());
      throw DivergenceError("non-finite gradient in parameter " + std::to_string(k) + " at row " +
                            std::to_string(bad / grads[k]->cols()) + ", step " + std::to_string(st.step + 1));
    }
  }
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto m = st.m[k].array();
    auto v = st.v[k].array();
    const auto g = grads[k]->array();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    params[k]->array() -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
  }
}

inline void optimizer_step(ModelState& state, const ParamGradients& grads, AdamState& st, double lr,
                           const AdamConfig& cfg = {}) {
  std::vector<Matrix*> params{&state.user_table, &state.item_table};
  std::vector<const Matrix*> gs{&grads.user_table, &grads.item_table};
  if (grads.modality_tables.size() != state.modality_tables.size()) {
    throw DimensionError("optimizer_step: modality table gradients do not match");
  }
  for (std::size_t g = 0; g < state.modality_tables.size(); ++g) {
    params.push_back(&state.modality_tables[g]);
    gs.push_back(&grads.modality_tables[g]);
  }
  optimizer_step(params, gs, st, lr, cfg);
  state.step = st.step;
}

// ---------------------------------------------------------------------------
// Sampling

/// Uniform over the items `user` has not interacted with in train.
inline int sample_negative(const InteractionDataset& ds, int user, Rng& rng) {
  if (static_cast<int>(ds.train_items(user).size()) >= ds.num_items()) {
    throw ContractError("user " + std::to_string(user) + " has interacted with every item; no negative exists");
  }
  for (;;) {
    const int j = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(ds.num_items())));
    if (!ds.in_train(user, j)) return j;
  }
}

/// One triple per train positive, in shuffled order. Deterministic in
/// (seed, epoch).
inline std::vector<TrainingTriple> sample_epoch(const InteractionDataset& ds, std::uint64_t seed, int epoch) {
  if (ds.train().empty()) throw ContractError("cannot sample triples from an empty train split");
  Rng rng(mix_seed(seed, 0x5a4d0000ULL + static_cast<std::uint64_t>(epoch)));
  std::vector<std::size_t> order(ds.train().size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  rng.shuffle(order);
  std::vector<TrainingTriple> out;
  out.reserve(order.size());
  for (const std::size_t k : order) {
    const auto& p = ds.train()[k];
    out.push_back({p.user, p.item, sample_negative(ds, p.user, rng)});
  }
  return out;
}

/// The epoch's triples split into consecutive batches of `batch_size`.
inline std::vector<Batch> sample_triples(const InteractionDataset& ds, int batch_size, std::uint64_t seed, int epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const auto all = sample_epoch(ds, seed, epoch);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < all.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(all.size(), start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(start), all.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  int epoch = 0;
  LossTerms loss;  // mean over the epoch's batches
  double val_metric = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::string variant;
  double initial_val = 0.0;  // validation metric before the first update
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val = 0.0;
  int stop_epoch = 0;
  bool early_stopped = false;
  bool diverged = false;
  int last_finite_epoch = 0;
  std::string divergence_message;
  std::map<int, Metrics> val_metrics;
  std::map<int, Metrics> test_metrics;
  double total_seconds = 0.0;
};

struct TrainResult {
  TrainReport report;
  ModelState state;  // best-validation parameters
  Embeddings embeddings;
};

struct TrainOptions {
  std::function<void(const EpochRecord&)> on_epoch;
  bool evaluate_test = true;
};

inline double validation_metric(const Embeddings& e, const InteractionDataset& ds, const TrainConfig& cfg) {
  EvalOptions opts;
  opts.ks = {cfg.val_k};
  return evaluate_split(e.u, e.t, ds, Split::kVal, opts).at(cfg.val_k).recall;
}

/// Patience rule over evaluated epochs. Only a strictly higher metric counts
/// as an improvement.
class EarlyStopping {
 public:
  EarlyStopping(int patience, double initial) : patience_(patience), best_(initial) {}

  /// Records `metric` for `epoch`; true when it is a new best.
  bool observe(int epoch, double metric) {
    if (metric > best_) {
      best_ = metric;
      best_epoch_ = epoch;
      return true;
    }
    return false;
  }

  bool should_stop(int epoch) const { return epoch - best_epoch_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  int patience_;
  double best_;
  int best_epoch_ = 0;
};

namespace detail {

inline void accumulate(LossTerms& acc, const LossTerms& t, double w) {
  acc.ranking += w * t.ranking;
  acc.regularizer += w * t.regularizer;
  acc.au += w * t.au;
  acc.ai_mm += w * t.ai_mm;
  acc.ai_s += w * t.ai_s;
  acc.total += w * t.total;
}

}  // namespace detail

/// Trains one variant. `graphs` must have been built with the variant's
/// pruning flags; it is ignored for the backbone variant. Epoch 0 (the
/// initialization) is evaluated and is itself a checkpoint candidate.
inline TrainResult train(const InteractionDataset& ds, const GraphSet* graphs, const TrainConfig& cfg,
                         const TrainOptions& options = {}) {
  cfg.validate();
  const auto clock_start = std::chrono::steady_clock::now();
  const VariantSpec variant = cfg.variant_spec();
  const GraphSet* used = variant.use_graphs ? graphs : nullptr;
  if (variant.use_graphs) {
    if (!graphs) throw ContractError("variant '" + variant.name + "' needs item-item graphs");
    if (graphs->config.mean_prune != variant.mean_prune ||
        graphs->config.consistency_prune != variant.consistency_prune) {
      throw ContractError("graphs were built with pruning flags that do not match variant '" + variant.name + "'");
    }
  }
  const ObjectiveConfig objective = cfg.objective_config();
  const int num_graphs = used ? static_cast<int>(used->graphs.size()) : 0;
  Model model(init_parameters(ds.num_users(), ds.num_items(), num_graphs, cfg.model_config(), cfg.seed), ds, used);

  TrainResult result;
  TrainReport& rep = result.report;
  rep.variant = variant.name;
  Embeddings emb = model.forward();
  rep.initial_val = validation_metric(emb, ds, cfg);
  rep.best_val = rep.initial_val;
  rep.best_epoch = 0;
  EarlyStopping stopper(cfg.patience, rep.initial_val);
  ModelState best = model.state();

  AdamState adam;
  Rng au_rng(mix_seed(cfg.seed, 0xa11e));
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    const auto batches = sample_triples(ds, cfg.batch_size, cfg.seed, epoch);
    try {
      for (const auto& batch : batches) {
        emb = model.forward();
        Gradients grads = Gradients::zeros_like(emb);
        std::vector<int> au_items;
        const bool sample_au = objective.use_au && cfg.au_sample_items > 0 && cfg.au_sample_items < ds.num_items();
        if (sample_au) {
          for (const auto i : au_rng.sample_without_replacement(static_cast<std::size_t>(ds.num_items()),
                                                                 static_cast<std::size_t>(cfg.au_sample_items))) {
            au_items.push_back(static_cast<int>(i));
          }
          std::sort(au_items.begin(), au_items.end());
        }
        const LossTerms terms =
            evaluate_objective(batch, emb, model.state(), objective, &grads, nullptr, sample_au ? &au_items : nullptr);
        if (!std::isfinite(terms.total)) throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch));
        detail::accumulate(rec.loss, terms, 1.0 / static_cast<double>(batches.size()));
        optimizer_step(model.state(), model.backward(grads), adam, cfg.learning_rate);
        if (!model.state().finite()) throw DivergenceError("non-finite parameters at epoch " + std::to_string(epoch));
      }
    } catch (const DivergenceError& e) {
      rep.diverged = true;
      rep.divergence_message = e.what();
      rep.stop_epoch = epoch;
      break;
    }
    emb = model.forward();
    rec.val_metric = validation_metric(emb, ds, cfg);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.epochs.push_back(rec);
    rep.last_finite_epoch = epoch;
    rep.stop_epoch = epoch;
    if (options.on_epoch) options.on_epoch(rec);
    if (stopper.observe(epoch, rec.val_metric)) {
      rep.best_val = stopper.best();
      rep.best_epoch = epoch;
      best = model.state();
    } else if (stopper.should_stop(epoch)) {
      rep.early_stopped = true;
      break;
    }
  }

  model.state() = best;
  result.embeddings = model.forward();
  result.state = std::move(best);
  EvalOptions eo;
  eo.ks = cfg.eval_ks;
  eo.exclude_val_at_test = cfg.exclude_val_at_test;
  rep.val_metrics = evaluate_split(result.embeddings.u, result.embeddings.t, ds, Split::kVal, eo).mean;
  if (options.evaluate_test) {
    rep.test_metrics = evaluate_split(result.embeddings.u, result.embeddings.t, ds, Split::kTest, eo).mean;
  }
  rep.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  return result;
}

/// Builds the graphs the variant asks for, then trains it.
inline TrainResult run_variant(const InteractionDataset& ds, const std::vector<ModalityFeatures>& features,
                               const TrainConfig& cfg, const TrainOptions& options = {}) {
  cfg.validate();
  if (!cfg.variant_spec().use_graphs) return train(ds, nullptr, cfg, options);
  const GraphSet graphs = build_graph_set(ds, features, cfg.graph_config());
  return train(ds, &graphs, cfg, options);
}

inline std::string epochs_csv(const TrainReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,ranking,regularizer,au,ai_mm,ai_s,total,val_metric,seconds\n";
  for (const auto& e : r.epochs) {
    os << e.epoch << ',' << e.loss.ranking << ',' << e.loss.regularizer << ',' << e.loss.au << ',' << e.loss.ai_mm
       << ',' << e.loss.ai_s << ',' << e.loss.total << ',' << e.val_metric << ',' << e.seconds << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

enum class LossSelector { kBPR, kDBPR, kDBPRStopGrad, kAU, kAIMM, kAIS, kTotal, kConstant };

inline std::string loss_selector_name(LossSelector s) {
  switch (s) {
    case LossSelector::kBPR: return "bpr";
    case LossSelector::kDBPR: return "dbpr";
    case LossSelector::kDBPRStopGrad: return "dbpr-stopgrad";
    case LossSelector::kAU: return "au";
    case LossSelector::kAIMM: return "ai-mm";
    case LossSelector::kAIS: return "ai-s";
    case LossSelector::kTotal: return "total";
    case LossSelector::kConstant: return "constant";
  }
  return "?";
}

struct GradCheckSize {
  int users = 8;
  int items = 12;
  int dim = 6;
  int modalities = 2;
  int batch = 12;
  Backbone backbone = Backbone::kLightGCN;
  bool separate_tables = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t parameters = 0;
  int attempts = 0;
};

namespace detail {

struct GradInstance {
  InteractionDataset ds{1, 2, {{0, 0}}, {}, {}};
  GraphSet graphs;
  ModelState state;
  Batch batch;
};

inline GradInstance make_grad_instance(const GradCheckSize& size, std::uint64_t seed, bool constant) {
  Rng rng(seed);
  std::vector<Interaction> train;
  for (int u = 0; u < size.users; ++u) {
    const int n = 2 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(std::max(1, size.items / 3))));
    for (const auto i : rng.sample_without_replacement(static_cast<std::size_t>(size.items),
                                                       static_cast<std::size_t>(std::min(n, size.items - 1)))) {
      train.push_back({u, static_cast<int>(i)});
    }
  }
  GradInstance inst;
  inst.ds = InteractionDataset(size.users, size.items, train, {}, {});
  std::vector<ModalityFeatures> features;
  for (int m = 0; m < size.modalities; ++m) {
    ModalityFeatures f;
    f.modality = "m" + std::to_string(m);
    f.values = Matrix(size.items, 4);
    for (Eigen::Index r = 0; r < f.values.rows(); ++r) {
      for (Eigen::Index c = 0; c < f.values.cols(); ++c) f.values(r, c) = rng.normal();
    }
    features.push_back(std::move(f));
  }
  // Without consistency pruning the modality graphs stay distinct, so the
  // argmax over modality scores is rarely tied.
  GraphConfig gc{3, 1, true, true, false};
  inst.graphs = build_graph_set(inst.ds, features, gc);
  ModelConfig mc;
  mc.dim = size.dim;
  mc.backbone = size.backbone;
  mc.separate_modality_tables = size.separate_tables;
  inst.state = init_parameters(size.users, size.items, static_cast<int>(inst.graphs.graphs.size()), mc,
                               mix_seed(seed, 1));
  inst.state.user_table *= 2.0;
  inst.state.item_table *= 2.0;
  for (auto& t : inst.state.modality_tables) t *= 2.0;
  for (int b = 0; b < size.batch; ++b) {
    const auto& p = inst.ds.train()[static_cast<std::size_t>(rng.uniform_index(inst.ds.train().size()))];
    const int neg = constant ? p.item : sample_negative(inst.ds, p.user, rng);
    inst.batch.push_back({p.user, p.item, neg});
  }
  return inst;
}

/// True when every D-BPR gate and argmax is at least `margin` away from a tie.
inline bool away_from_kinks(const Batch& batch, const Embeddings& emb, const DenoiseConfig& cfg, double margin) {
  std::vector<DenoisedTripleInfo> info;
  dbpr_loss(batch, emb, cfg, {}, nullptr, &info);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (std::abs(info[b].mean_negative - info[b].mu) < margin) return false;
    std::vector<double> ys;
    for (const auto& h : emb.h) ys.push_back(emb.u.row(batch[b].user).dot(h.row(batch[b].pos)));
    std::sort(ys.begin(), ys.end(), std::greater<>());
    if (ys.size() > 1 && ys[0] - ys[1] < margin) return false;
  }
  return true;
}

}  // namespace detail

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-6) over every
/// parameter. Numeric derivatives are Richardson-extrapolated central
/// differences. Graded sets are frozen at the base point; instances with a
/// D-BPR gate or argmax within 1e-3 of a tie are regenerated.
inline GradCheckResult grad_check(LossSelector selector, const GradCheckSize& size, std::uint64_t seed,
                                  double step = 1e-3) {
  if (size.users < 1 || size.items < 3 || size.dim < 1 || size.batch < 1) {
    throw ConfigError("grad_check instance too small");
  }
  ObjectiveConfig obj;
  obj.lambda_theta = 1e-2;
  obj.align.lambda1 = 0.5;
  obj.align.lambda2 = 0.5;
  obj.align.k_align = 2;
  obj.align.tau = 0.5;
  const bool constant = selector == LossSelector::kConstant;
  if (constant) obj.lambda_theta = 0.0;

  GradCheckResult out;
  detail::GradInstance inst;
  for (;;) {
    ++out.attempts;
    inst = detail::make_grad_instance(size, mix_seed(seed, static_cast<std::uint64_t>(out.attempts)), constant);
    Model m(inst.state, inst.ds, &inst.graphs);
    if (constant || detail::away_from_kinks(inst.batch, m.forward(), obj.denoise, 1e-3)) break;
    if (out.attempts >= 1000) throw ContractError("grad_check could not find a kink-free instance");
  }
  const std::vector<int> items = detail::distinct_items(inst.batch);
  GradedSetTable sets;
  std::vector<DenoisedTripleInfo> frozen_weights;
  {
    Model m(inst.state, inst.ds, &inst.graphs);
    const Embeddings e = m.forward();
    sets = build_graded_sets(e.h, items, obj.align.k_align);
    dbpr_loss(inst.batch, e, obj.denoise, {}, nullptr, &frozen_weights);
  }

  // `analytic` selects the stop-gradient mode for the D-BPR check; the
  // numeric side evaluates the loss with those weights held constant.
  auto loss = [&](const ModelState& st, Gradients* grads, const Embeddings& e, bool analytic) {
    const Regularization reg{&st.user_table, &st.item_table, obj.lambda_theta};
    switch (selector) {
      case LossSelector::kBPR:
      case LossSelector::kConstant:
        return bpr_loss(inst.batch, e.u, e.t, reg, grads);
      case LossSelector::kDBPR:
        return dbpr_loss(inst.batch, e, obj.denoise, reg, grads);
      case LossSelector::kDBPRStopGrad: {
        DenoiseConfig dc = obj.denoise;
        dc.stop_gradient_weights = true;
        return analytic ? dbpr_loss(inst.batch, e, dc, reg, grads)
                        : dbpr_loss(inst.batch, e, obj.denoise, reg, grads, nullptr, &frozen_weights);
      }
      case LossSelector::kAU:
        return align_user_loss(inst.batch, e, grads);
      case LossSelector::kAIMM:
        return align_item_losses(items, e.h, sets, obj.align, grads, ItemAlignPart::kMultiOnly).mm;
      case LossSelector::kAIS:
        return align_item_losses(items, e.h, sets, obj.align, grads, ItemAlignPart::kSingleOnly).s;
      case LossSelector::kTotal:
        return evaluate_objective(inst.batch, e, st, obj, grads, &sets).total;
    }
    return 0.0;
  };
  auto value_at = [&](const ModelState& st) {
    Model model(st, inst.ds, &inst.graphs);
    return loss(st, nullptr, model.forward(), false);
  };

  Model model(inst.state, inst.ds, &inst.graphs);
  const Embeddings e = model.forward();
  Gradients g = Gradients::zeros_like(e);
  loss(inst.state, &g, e, true);
  const ParamGradients pg = model.backward(g);

  std::vector<Matrix*> params{&inst.state.user_table, &inst.state.item_table};
  std::vector<const Matrix*> analytic{&pg.user_table, &pg.item_table};
  for (std::size_t k = 0; k < inst.state.modality_tables.size(); ++k) {
    params.push_back(&inst.state.modality_tables[k]);
    analytic.push_back(&pg.modality_tables[k]);
  }
  auto central = [&](double& x, double h) {
    const double x0 = x;
    x = x0 + h;
    const double up = value_at(inst.state);
    x = x0 - h;
    const double down = value_at(inst.state);
    x = x0;
    return (up - down) / (2.0 * h);
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Eigen::Index idx = 0; idx < params[k]->size(); ++idx) {
      double& x = params[k]->data()[idx];
      const double d1 = central(x, step);
      const double d2 = central(x, step / 2.0);
      const double numeric = (4.0 * d2 - d1) / 3.0;
      const double a = analytic[k]->data()[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
      ++out.parameters;
    }
  }
  return out;
}

}  // namespace damrs
