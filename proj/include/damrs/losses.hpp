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
#include "damrs/model.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace damrs {

/// <u, i, j>: i observed for u in train, j not.
struct TrainingTriple {
  int user = 0;
  int pos = 0;
  int neg = 0;
  auto operator<=>(const TrainingTriple&) const = default;
};

using Batch = std::vector<TrainingTriple>;

/// Which negatives enter the per-user mean negative score of the contradiction
/// weight: every negative item of the batch, or only those sampled for u.
enum class NegativeScope { kBatch, kUser };

struct DenoiseConfig {
  double alpha = 1.5;
  double beta = 1.5;
  double gamma = 1.0;
  std::optional<double> f_override;  // "-f" ablation sets f = 1
  std::optional<double> g_override;  // "-g" ablation sets g = 0
  bool stop_gradient_weights = false;
  NegativeScope negative_scope = NegativeScope::kBatch;

  void validate() const {
    if (!(alpha > 0 && beta > 0 && gamma > 0)) throw ConfigError("alpha, beta, gamma must be > 0");
  }
};

enum class AlignStrategy { kAI, kSP, kMP };

inline AlignStrategy parse_align_strategy(const std::string& s) {
  if (s == "AI" || s == "ai") return AlignStrategy::kAI;
  if (s == "SP" || s == "sp") return AlignStrategy::kSP;
  if (s == "MP" || s == "mp") return AlignStrategy::kMP;
  throw ConfigError("unknown alignment strategy '" + s + "'");
}

inline std::string align_strategy_name(AlignStrategy s) {
  switch (s) {
    case AlignStrategy::kAI: return "AI";
    case AlignStrategy::kSP: return "SP";
    case AlignStrategy::kMP: return "MP";
  }
  return "?";
}

struct AlignConfig {
  double tau = 0.2;
  int k_align = 10;
  double lambda1 = 0.1;
  double lambda2 = 0.01;
  AlignStrategy strategy = AlignStrategy::kAI;
  /// 0 = softmax over the full catalog; otherwise the user-preference
  /// distributions are restricted to this many uniformly sampled items.
  int au_sample_items = 0;

  void validate() const {
    if (!(tau > 0)) throw ConfigError("tau must be > 0");
    if (k_align < 1) throw ConfigError("k_align must be >= 1");
    if (lambda1 < 0 || lambda2 < 0) throw ConfigError("lambda1, lambda2 must be >= 0");
  }
};

struct Regularization {
  const Matrix* user_table = nullptr;
  const Matrix* item_table = nullptr;
  double lambda = 0.0;
};

/// lambda * mean over triples of ||U_u||^2 + ||I_i||^2 + ||I_j||^2, on the raw
/// parameter rows touched by the batch.
inline double l2_regularizer(const Batch& batch, const Regularization& reg, Gradients* grads) {
  if (reg.lambda == 0.0 || batch.empty() || !reg.user_table || !reg.item_table) return 0.0;
  const double scale = reg.lambda / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& tr : batch) {
    const auto uu = reg.user_table->row(tr.user);
    const auto ii = reg.item_table->row(tr.pos);
    const auto jj = reg.item_table->row(tr.neg);
    total += uu.squaredNorm() + ii.squaredNorm() + jj.squaredNorm();
    if (grads) {
      grads->user_table.row(tr.user) += 2.0 * scale * uu;
      grads->item_table.row(tr.pos) += 2.0 * scale * ii;
      grads->item_table.row(tr.neg) += 2.0 * scale * jj;
    }
  }
  return scale * total;
}

/// -(1/|B|) sum ln sigmoid(u_u . (t_i - t_j)) + L2 term.
inline double bpr_loss(const Batch& batch, const Matrix& u, const Matrix& t, const Regularization& reg,
                       Gradients* grads) {
  if (batch.empty()) return 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& tr : batch) {
    const auto uu = u.row(tr.user);
    const Eigen::RowVectorXd diff = t.row(tr.pos) - t.row(tr.neg);
    const double x = uu.dot(diff);
    total -= log_sigmoid(x);
    if (grads) {
      const double dx = -sigmoid(-x) * inv_b;
      grads->u.row(tr.user) += dx * diff;
      grads->t.row(tr.pos) += dx * uu;
      grads->t.row(tr.neg) -= dx * uu;
    }
  }
  return total * inv_b + l2_regularizer(batch, reg, grads);
}

// ---------------------------------------------------------------------------
// Reliability and contradiction weights

struct Reliability {
  double mu = 0;
  double s2 = 0;
  double f = 0;
  std::vector<double> sig;  // sigmoid of each modality score
};

/// f = mu^alpha * exp(-s^2)^beta over sigmoid(modality scores); s^2 uses the
/// population denominator.
inline Reliability reliability_from_scores(std::span<const double> modality_scores, double alpha, double beta) {
  if (modality_scores.empty()) throw ContractError("reliability needs at least one modality score");
  Reliability r;
  const double n = static_cast<double>(modality_scores.size());
  for (const double y : modality_scores) r.sig.push_back(sigmoid(y));
  for (const double s : r.sig) r.mu += s;
  r.mu /= n;
  for (const double s : r.sig) r.s2 += (s - r.mu) * (s - r.mu);
  r.s2 /= n;
  r.f = std::pow(r.mu, alpha) * std::pow(std::exp(-r.s2), beta);
  return r;
}

template <typename U>
std::vector<double> modality_scores(const Eigen::MatrixBase<U>& user, const std::vector<Eigen::RowVectorXd>& item_h) {
  std::vector<double> ys;
  for (const auto& h : item_h) ys.push_back(modality_score(user, h));
  return ys;
}

inline double reliability_f(const Eigen::RowVectorXd& user, const std::vector<Eigen::RowVectorXd>& item_h,
                            const DenoiseConfig& cfg) {
  if (cfg.f_override) return *cfg.f_override;
  const auto ys = modality_scores(user, item_h);
  return reliability_from_scores(ys, cfg.alpha, cfg.beta).f;
}

/// sigmoid(max_m y^m - mean_neg)^gamma when mean_neg > mu, else 0.
inline double contradiction_from_scores(double max_modality_score, double mean_negative, double mu, double gamma) {
  if (!(mean_negative > mu)) return 0.0;
  return std::pow(sigmoid(max_modality_score - mean_negative), gamma);
}

/// `negatives` are the fused representations t_j of the negatives that enter
/// the mean negative score.
inline double contradiction_g(const Eigen::RowVectorXd& user, const std::vector<Eigen::RowVectorXd>& item_h,
                              const std::vector<Eigen::RowVectorXd>& negatives, const DenoiseConfig& cfg) {
  if (cfg.g_override) return *cfg.g_override;
  if (negatives.empty()) throw ContractError("contradiction_g needs at least one negative");
  double mean_neg = 0.0;
  for (const auto& t : negatives) mean_neg += sigmoid(score(user, t));
  mean_neg /= static_cast<double>(negatives.size());
  const auto ys = modality_scores(user, item_h);
  const auto rel = reliability_from_scores(ys, cfg.alpha, cfg.beta);
  return contradiction_from_scores(*std::max_element(ys.begin(), ys.end()), mean_neg, rel.mu, cfg.gamma);
}

namespace detail {

/// Distinct users of a batch in ascending order.
inline std::vector<int> distinct_users(const Batch& batch) {
  std::vector<int> users;
  for (const auto& tr : batch) users.push_back(tr.user);
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  return users;
}

inline std::vector<int> distinct_items(const Batch& batch) {
  std::vector<int> items;
  for (const auto& tr : batch) {
    items.push_back(tr.pos);
    items.push_back(tr.neg);
  }
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());
  return items;
}

inline Vector log_softmax(const Vector& x) {
  const double mx = x.maxCoeff();
  const double lse = mx + std::log((x.array() - mx).exp().sum());
  return (x.array() - lse).matrix();
}

}  // namespace detail

/// Per-triple diagnostics of the denoised objective.
struct DenoisedTripleInfo {
  double f = 0;
  double g = 0;
  double mu = 0;
  double mean_negative = 0;
};

/// -(1/|B|) sum ln( f sigma(x) + g (1 - sigma(x)) ) + L2 term, x = u_u . (t_i - t_j).
/// Gradients flow through f and g unless `stop_gradient_weights` is set.
/// `frozen` supplies per-triple f and g as constants (the function whose
/// gradient the stop-gradient mode computes).
inline double dbpr_loss(const Batch& batch, const Embeddings& emb, const DenoiseConfig& cfg,
                        const Regularization& reg, Gradients* grads,
                        std::vector<DenoisedTripleInfo>* info = nullptr,
                        const std::vector<DenoisedTripleInfo>* frozen = nullptr) {
  cfg.validate();
  if (batch.empty()) return 0.0;
  if (frozen && frozen->size() != batch.size()) throw DimensionError("frozen weights do not match the batch");
  const std::size_t n_mod = emb.h.size();
  const bool need_modalities = !cfg.f_override || !cfg.g_override;
  if (need_modalities && n_mod == 0) {
    throw ContractError("denoised BPR needs item-item graph embeddings unless f and g are both fixed");
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const Eigen::Index d = emb.u.cols();

  // Mean sigmoid negative score per distinct user, as one matrix product.
  const std::vector<int> users = detail::distinct_users(batch);
  std::map<int, int> user_row;
  for (std::size_t k = 0; k < users.size(); ++k) user_row[users[k]] = static_cast<int>(k);
  Matrix ud(users.size(), d);
  for (std::size_t k = 0; k < users.size(); ++k) ud.row(k) = emb.u.row(users[k]);
  Matrix tn(batch.size(), d);
  for (std::size_t b = 0; b < batch.size(); ++b) tn.row(b) = emb.t.row(batch[b].neg);
  Matrix sig_neg = (ud * tn.transpose()).unaryExpr([](double x) { return sigmoid(x); });
  // mask[k][b] = 1 if negative b counts for user k
  Matrix mask = Matrix::Ones(users.size(), batch.size());
  if (cfg.negative_scope == NegativeScope::kUser) {
    mask.setZero();
    for (std::size_t b = 0; b < batch.size(); ++b) mask(user_row[batch[b].user], b) = 1.0;
  }
  const Vector neg_count = mask.rowwise().sum();
  const Vector mean_neg = (sig_neg.cwiseProduct(mask)).rowwise().sum().cwiseQuotient(neg_count);
  Vector dmean_neg = Vector::Zero(users.size());

  if (info) info->assign(batch.size(), {});
  double total = 0.0;
  std::vector<double> ys(n_mod);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& tr = batch[b];
    const auto uu = emb.u.row(tr.user);
    const Eigen::RowVectorXd diff = emb.t.row(tr.pos) - emb.t.row(tr.neg);
    const double x = uu.dot(diff);
    const double s = sigmoid(x);
    const int urow = user_row[tr.user];

    Reliability rel;
    std::size_t argmax = 0;
    if (n_mod > 0) {
      for (std::size_t m = 0; m < n_mod; ++m) ys[m] = uu.dot(emb.h[m].row(tr.pos));
      rel = reliability_from_scores(ys, cfg.alpha, cfg.beta);
      argmax = static_cast<std::size_t>(std::max_element(ys.begin(), ys.end()) - ys.begin());
    }
    double f = cfg.f_override ? *cfg.f_override : rel.f;
    const bool gate = n_mod > 0 && mean_neg[urow] > rel.mu;
    const double sz = n_mod > 0 ? sigmoid(ys[argmax] - mean_neg[urow]) : 0.0;
    double g = cfg.g_override ? *cfg.g_override : (gate ? std::pow(sz, cfg.gamma) : 0.0);
    if (frozen) {
      f = (*frozen)[b].f;
      g = (*frozen)[b].g;
    }
    // log(f s + g (1 - s)) as a log-sum-exp of the two branches, so that f = 1,
    // g = 0 reproduces log_sigmoid exactly even when s saturates.
    const double neg_inf = -std::numeric_limits<double>::infinity();
    const double la = f > 0 ? std::log(f) + log_sigmoid(x) : neg_inf;
    const double lb = g > 0 ? std::log(g) + log_sigmoid(-x) : neg_inf;
    const double hi = std::max(la, lb);
    const double lp = hi == neg_inf ? neg_inf : hi + std::log1p(std::exp(std::min(la, lb) - hi));
    const bool floored = lp == neg_inf;  // f = g = 0: the triple carries no signal
    total -= floored ? std::log(kLogFloor) : lp;
    if (info) (*info)[b] = {f, g, rel.mu, mean_neg[urow]};
    if (!grads || floored) continue;

    // Shares of the two branches in p: wf = f s / p, wg = g (1 - s) / p.
    const double wf = la == neg_inf ? 0.0 : std::exp(la - lp);
    const double wg = lb == neg_inf ? 0.0 : std::exp(lb - lp);
    const double dx = -inv_b * (wf * (1.0 - s) - wg * s);
    grads->u.row(tr.user) += dx * diff;
    grads->t.row(tr.pos) += dx * uu;
    grads->t.row(tr.neg) -= dx * uu;
    if (cfg.stop_gradient_weights || frozen) continue;

    std::vector<double> dy(n_mod, 0.0);
    if (!cfg.f_override) {
      // dL/df = -s / (|B| p); df/dmu = alpha f / mu and df/ds2 = -beta f.
      const double dmu = -inv_b * wf * cfg.alpha / rel.mu;
      const double ds2 = inv_b * wf * cfg.beta;
      const double nm = static_cast<double>(n_mod);
      for (std::size_t m = 0; m < n_mod; ++m) {
        const double dsig = dmu / nm + ds2 * 2.0 * (rel.sig[m] - rel.mu) / nm;
        dy[m] += dsig * rel.sig[m] * (1.0 - rel.sig[m]);
      }
    }
    if (!cfg.g_override && gate) {
      // dL/dg = -(1 - s) / (|B| p) and dg/dz = gamma g (1 - sz).
      const double dz = -inv_b * wg * cfg.gamma * (1.0 - sz);
      dy[argmax] += dz;
      dmean_neg[urow] -= dz;
    }
    for (std::size_t m = 0; m < n_mod; ++m) {
      if (dy[m] == 0.0) continue;
      grads->u.row(tr.user) += dy[m] * emb.h[m].row(tr.pos);
      grads->h[m].row(tr.pos) += dy[m] * uu;
    }
  }

  if (grads && !cfg.stop_gradient_weights && !frozen) {
    // d mean_neg[k] / d score[k][b] = mask * sig (1 - sig) / count
    Matrix w = sig_neg.cwiseProduct((1.0 - sig_neg.array()).matrix()).cwiseProduct(mask);
    for (std::size_t k = 0; k < users.size(); ++k) w.row(k) *= dmean_neg[k] / neg_count[k];
    const Matrix gud = w * tn;
    const Matrix gtn = w.transpose() * ud;
    for (std::size_t k = 0; k < users.size(); ++k) grads->u.row(users[k]) += gud.row(k);
    for (std::size_t b = 0; b < batch.size(); ++b) grads->t.row(batch[b].neg) += gtn.row(b);
  }
  return total * inv_b + l2_regularizer(batch, reg, grads);
}

// ---------------------------------------------------------------------------
// Alignment guided by user preference

/// (P_mm, P_id): softmax over all items of u.h_mm and u.h_id.
inline std::pair<Vector, Vector> user_pref_distributions(const Eigen::RowVectorXd& user, const Matrix& h_mm,
                                                         const Matrix& h_id) {
  const Vector a = h_mm * user.transpose();
  const Vector b = h_id * user.transpose();
  return {detail::log_softmax(a).array().exp().matrix(), detail::log_softmax(b).array().exp().matrix()};
}

inline double kl_divergence(const Vector& p, const Vector& q) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) kl += p[i] * (safe_log(p[i]) - safe_log(q[i]));
  return kl;
}

inline double symmetric_kl(const Vector& p, const Vector& q) { return kl_divergence(p, q) + kl_divergence(q, p); }

/// sum over distinct batch users of KL(P_mm || P_id) + KL(P_id || P_mm).
/// `item_subset`, when given, restricts both softmaxes to those items.
inline double align_user_loss(const Batch& batch, const Embeddings& emb, Gradients* grads,
                              const std::vector<int>* item_subset = nullptr) {
  if (emb.h_mm.size() == 0) throw ContractError("user-preference alignment needs multi-modal embeddings");
  const std::vector<int> users = detail::distinct_users(batch);
  if (users.empty()) return 0.0;
  const Eigen::Index d = emb.u.cols();
  Matrix ud(users.size(), d);
  for (std::size_t k = 0; k < users.size(); ++k) ud.row(k) = emb.u.row(users[k]);
  Matrix hmm, hid;
  if (item_subset) {
    hmm.resize(item_subset->size(), d);
    hid.resize(item_subset->size(), d);
    for (std::size_t k = 0; k < item_subset->size(); ++k) {
      hmm.row(k) = emb.h_mm.row((*item_subset)[k]);
      hid.row(k) = emb.h_id.row((*item_subset)[k]);
    }
  }
  const Matrix& mm = item_subset ? hmm : emb.h_mm;
  const Matrix& id = item_subset ? hid : emb.h_id;
  const Matrix a = ud * mm.transpose();
  const Matrix b = ud * id.transpose();
  const double log_floor = std::log(kLogFloor);
  Matrix ga(a.rows(), a.cols()), gb(b.rows(), b.cols());
  double total = 0.0;
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    const Vector lp = detail::log_softmax(a.row(k).transpose()).cwiseMax(log_floor);
    const Vector lq = detail::log_softmax(b.row(k).transpose()).cwiseMax(log_floor);
    const Vector p = lp.array().exp().matrix();
    const Vector q = lq.array().exp().matrix();
    const Vector diff = lp - lq;
    const double kl_pq = p.dot(diff);
    const double kl_qp = -q.dot(diff);
    total += kl_pq + kl_qp;
    ga.row(k) = (p.array() * (diff.array() - kl_pq) + p.array() - q.array()).matrix().transpose();
    gb.row(k) = (q.array() * (-diff.array() - kl_qp) + q.array() - p.array()).matrix().transpose();
  }
  if (grads) {
    const Matrix gud = ga * mm + gb * id;
    for (std::size_t k = 0; k < users.size(); ++k) grads->u.row(users[k]) += gud.row(k);
    const Matrix gmm = ga.transpose() * ud;
    const Matrix gid = gb.transpose() * ud;
    if (item_subset) {
      for (std::size_t k = 0; k < item_subset->size(); ++k) {
        grads->h_mm.row((*item_subset)[k]) += gmm.row(k);
        grads->h_id.row((*item_subset)[k]) += gid.row(k);
      }
    } else {
      grads->h_mm += gmm;
      grads->h_id += gid;
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Alignment guided by graded item relations

/// Multi-modal similar (R), single-modal similar (T) and dissimilar (N)
/// items of one item in one modality. R and T are in rank order; N ascending.
struct GradedSets {
  std::vector<int> multi;
  std::vector<int> single;
  std::vector<int> dissimilar;
};

namespace detail {

inline Vector cosine_row(const Matrix& h, int item) {
  const Vector norms = h.rowwise().norm();
  const double ni = norms[item];
  Vector row = h * h.row(item).transpose();
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    const double denom = ni * norms[j];
    row[j] = denom > 0 ? row[j] / denom : 0.0;
  }
  return row;
}

inline Vector softmax(const Vector& x) { return log_softmax(x).array().exp().matrix(); }

/// Top-k indices by (value desc, index asc), skipping `skip` and entries <= 0.
inline std::vector<int> top_k(const Vector& v, int k, int skip) {
  std::vector<int> cand;
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    if (static_cast<int>(j) != skip && v[j] > 0.0) cand.push_back(static_cast<int>(j));
  }
  auto better = [&v](int a, int b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(kk), cand.end(), better);
  cand.resize(kk);
  return cand;
}

}  // namespace detail

/// Graded sets of `item` for every modality at once (the aggregated softmax
/// similarity is shared). Self is never a member of any set.
inline std::vector<GradedSets> graded_sets_all(const std::vector<Matrix>& h, int item, int k_align,
                                               const std::vector<int>& batch_items) {
  std::vector<Vector> soft;
  for (const auto& hm : h) soft.push_back(detail::softmax(detail::cosine_row(hm, item)));
  Vector sum = Vector::Zero(soft.empty() ? 0 : soft.front().size());
  for (const auto& s : soft) sum += s;
  std::vector<GradedSets> out;
  for (std::size_t m = 0; m < h.size(); ++m) {
    GradedSets gs;
    gs.multi = detail::top_k(soft[m] + sum, k_align, item);
    Vector rest = soft[m];
    for (const int j : gs.multi) rest[j] = 0.0;
    gs.single = detail::top_k(rest, k_align, item);
    for (const int j : batch_items) {
      if (j == item) continue;
      if (std::find(gs.multi.begin(), gs.multi.end(), j) != gs.multi.end()) continue;
      if (std::find(gs.single.begin(), gs.single.end(), j) != gs.single.end()) continue;
      gs.dissimilar.push_back(j);
    }
    std::sort(gs.dissimilar.begin(), gs.dissimilar.end());
    gs.dissimilar.erase(std::unique(gs.dissimilar.begin(), gs.dissimilar.end()), gs.dissimilar.end());
    out.push_back(std::move(gs));
  }
  return out;
}

inline GradedSets graded_sets(const std::vector<Matrix>& h, int item, std::size_t modality, int k_align,
                              const std::vector<int>& batch_items) {
  if (modality >= h.size()) throw ContractError("graded_sets: modality index out of range");
  return graded_sets_all(h, item, k_align, batch_items)[modality];
}

/// Graded sets for every item in `items`, indexed [item position][modality].
using GradedSetTable = std::vector<std::vector<GradedSets>>;

inline GradedSetTable build_graded_sets(const std::vector<Matrix>& h, const std::vector<int>& items, int k_align) {
  GradedSetTable table;
  table.reserve(items.size());
  for (const int i : items) table.push_back(graded_sets_all(h, i, k_align, items));
  return table;
}

/// Restricts the AI strategy to one of its two ratios (used for per-term
/// gradient checks).
enum class ItemAlignPart { kBoth, kMultiOnly, kSingleOnly };

struct ItemAlignTerms {
  double mm = 0.0;  // L_AI-MM (AI), or the single SP / MP ratio
  double s = 0.0;   // L_AI-S (AI only)
  std::size_t skipped = 0;
};

namespace detail {

/// Accumulates d cos(a, b) into the gradients of rows a and b.
inline void add_cosine_grad(const Matrix& h, int a, int b, double coef, Matrix& grad) {
  const auto ha = h.row(a);
  const auto hb = h.row(b);
  const double na = ha.norm();
  const double nb = hb.norm();
  if (na == 0.0 || nb == 0.0) return;
  const double c = ha.dot(hb) / (na * nb);
  grad.row(a) += coef * (hb / (na * nb) - c * ha / (na * na));
  grad.row(b) += coef * (ha / (na * nb) - c * hb / (nb * nb));
}

inline double cosine(const Matrix& h, int a, int b) {
  const double na = h.row(a).norm();
  const double nb = h.row(b).norm();
  return (na == 0.0 || nb == 0.0) ? 0.0 : h.row(a).dot(h.row(b)) / (na * nb);
}

/// -log( sum_P phi / sum_(P u O) phi ) with phi = exp(cos / tau), computed in
/// log-sum-exp form. Returns nullopt when P is empty.
inline std::optional<double> contrastive_ratio(const Matrix& h, int anchor, const std::vector<int>& positives,
                                               const std::vector<const std::vector<int>*>& others, double tau,
                                               Matrix* grad) {
  if (positives.empty()) return std::nullopt;
  std::vector<int> all = positives;
  for (const auto* o : others) all.insert(all.end(), o->begin(), o->end());
  std::vector<double> logits(all.size());
  for (std::size_t k = 0; k < all.size(); ++k) logits[k] = cosine(h, anchor, all[k]) / tau;
  auto lse = [&](std::size_t begin, std::size_t end) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = begin; k < end; ++k) mx = std::max(mx, logits[k]);
    double acc = 0.0;
    for (std::size_t k = begin; k < end; ++k) acc += std::exp(logits[k] - mx);
    return mx + std::log(acc);
  };
  const std::size_t np = positives.size();
  const double lse_pos = lse(0, np);
  const double lse_all = lse(0, all.size());
  if (grad) {
    for (std::size_t k = 0; k < all.size(); ++k) {
      double coef = std::exp(logits[k] - lse_all);
      if (k < np) coef -= std::exp(logits[k] - lse_pos);
      add_cosine_grad(h, anchor, all[k], coef / tau, *grad);
    }
  }
  return lse_all - lse_pos;
}

}  // namespace detail

/// Contrastive alignment over graded sets, summed over `items` and modalities.
///  AI: L_AI-MM = -log R/(R+T+N) and L_AI-S = -log T/(T+N)
///  SP: -log (R+T)/(R+T+N) in `mm`
///  MP: -log R/(R+T+N) in `mm`
/// A ratio whose positive set is empty contributes nothing and is counted in
/// `skipped`.
inline ItemAlignTerms align_item_losses(const std::vector<int>& items, const std::vector<Matrix>& h,
                                        const GradedSetTable& sets, const AlignConfig& cfg, Gradients* grads,
                                        ItemAlignPart part = ItemAlignPart::kBoth) {
  cfg.validate();
  if (sets.size() != items.size()) throw DimensionError("graded set table does not match item list");
  ItemAlignTerms out;
  for (std::size_t p = 0; p < items.size(); ++p) {
    const int i = items[p];
    for (std::size_t m = 0; m < h.size(); ++m) {
      const auto& gs = sets[p][m];
      Matrix* g = grads ? &grads->h[m] : nullptr;
      auto add = [&](double& slot, const std::optional<double>& v) {
        if (v) {
          slot += *v;
        } else {
          ++out.skipped;
        }
      };
      switch (cfg.strategy) {
        case AlignStrategy::kAI:
          if (part != ItemAlignPart::kSingleOnly) {
            add(out.mm, detail::contrastive_ratio(h[m], i, gs.multi, {&gs.single, &gs.dissimilar}, cfg.tau, g));
          }
          if (part != ItemAlignPart::kMultiOnly) {
            add(out.s, detail::contrastive_ratio(h[m], i, gs.single, {&gs.dissimilar}, cfg.tau, g));
          }
          break;
        case AlignStrategy::kSP: {
          std::vector<int> pos = gs.multi;
          pos.insert(pos.end(), gs.single.begin(), gs.single.end());
          add(out.mm, detail::contrastive_ratio(h[m], i, pos, {&gs.dissimilar}, cfg.tau, g));
          break;
        }
        case AlignStrategy::kMP:
          add(out.mm, detail::contrastive_ratio(h[m], i, gs.multi, {&gs.single, &gs.dissimilar}, cfg.tau, g));
          break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composition

struct LossTerms {
  double ranking = 0;      // BPR or D-BPR, including the L2 term
  double regularizer = 0;  // the L2 term alone, for reporting
  double au = 0;
  double ai_mm = 0;
  double ai_s = 0;
  double total = 0;
};

/// L = L_rank + lambda1 * L_AU + lambda2 * (L_AI-MM + L_AI-S)
inline double total_loss(double ranking, double au, double ai_mm, double ai_s, double lambda1, double lambda2) {
  return ranking + lambda1 * au + lambda2 * (ai_mm + ai_s);
}

struct ObjectiveConfig {
  bool denoised = true;
  bool use_au = true;
  bool use_ai = true;
  double lambda_theta = 1e-4;
  DenoiseConfig denoise;
  AlignConfig align;
};

/// Evaluates every enabled term on one batch. Each term writes its own
/// gradient, and the total gradient is their lambda-weighted sum.
/// `frozen_sets` (indexed like the distinct batch items) replaces the
/// on-the-fly graded-set construction, which the gradient checker needs.
inline LossTerms evaluate_objective(const Batch& batch, const Embeddings& emb, const ModelState& state,
                                    const ObjectiveConfig& cfg, Gradients* grads,
                                    const GradedSetTable* frozen_sets = nullptr,
                                    const std::vector<int>* au_items = nullptr) {
  LossTerms terms;
  const Regularization reg{&state.user_table, &state.item_table, cfg.lambda_theta};
  {
    Gradients g = grads ? Gradients::zeros_like(emb) : Gradients{};
    Gradients* gp = grads ? &g : nullptr;
    terms.regularizer = l2_regularizer(batch, reg, nullptr);
    terms.ranking = cfg.denoised ? dbpr_loss(batch, emb, cfg.denoise, reg, gp) : bpr_loss(batch, emb.u, emb.t, reg, gp);
    if (grads) grads->add_scaled(g, 1.0);
  }
  if (cfg.use_au && cfg.align.lambda1 != 0.0) {
    Gradients g = grads ? Gradients::zeros_like(emb) : Gradients{};
    terms.au = align_user_loss(batch, emb, grads ? &g : nullptr, au_items);
    if (grads) grads->add_scaled(g, cfg.align.lambda1);
  }
  if (cfg.use_ai && cfg.align.lambda2 != 0.0 && !emb.h.empty()) {
    const std::vector<int> items = detail::distinct_items(batch);
    GradedSetTable local;
    if (!frozen_sets) local = build_graded_sets(emb.h, items, cfg.align.k_align);
    const GradedSetTable& sets = frozen_sets ? *frozen_sets : local;
    Gradients g = grads ? Gradients::zeros_like(emb) : Gradients{};
    const auto ai = align_item_losses(items, emb.h, sets, cfg.align, grads ? &g : nullptr);
    terms.ai_mm = ai.mm;
    terms.ai_s = ai.s;
    if (grads) grads->add_scaled(g, cfg.align.lambda2);
  }
  terms.total = total_loss(terms.ranking, terms.au, terms.ai_mm, terms.ai_s,
                           cfg.use_au ? cfg.align.lambda1 : 0.0, cfg.use_ai ? cfg.align.lambda2 : 0.0);
  return terms;
}

}  // namespace damrs
