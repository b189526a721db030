#pragma once

// The erasure objectives and their closed-form logit gradients. Each loss has
// two independent routes: a direct evaluator / closed-form gradient here, and
// a tape composition (build_*_loss) whose gradient comes from generic
// primitives. Tests hold the two routes against each other.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "umlb/model.hpp"
#include "umlb/tensor.hpp"
#include "umlb/util.hpp"

namespace umlb {

enum class LossKind : uint8_t { EM, NLL, LS, GA, DI };

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::EM: return "EM";
    case LossKind::NLL: return "NLL";
    case LossKind::LS: return "LS";
    case LossKind::GA: return "GA";
    case LossKind::DI: return "DI";
  }
  return "?";
}

struct LossConfig {
  LossKind kind = LossKind::EM;
  std::optional<double> gamma;  // LS and DI only

  void validate() const {
    bool needs_gamma = kind == LossKind::LS || kind == LossKind::DI;
    if (needs_gamma && (!gamma || *gamma < 0.0))
      throw InvalidInput("loss config: LS/DI require nonnegative gamma");
    if (!needs_gamma && gamma) throw InvalidInput("loss config: gamma only valid for LS/DI");
  }
};

// One erasure request: token ids with a prefix/continuation split.
struct ForgetSequence {
  std::vector<int> tokens;
  int prefix_len = 0;       // p >= 1
  int continuation_len = 0;  // q >= 1

  void validate(int context) const {
    if (prefix_len < 1 || continuation_len < 1)
      throw InvalidInput("sequence: prefix and continuation must be nonempty");
    if (prefix_len + continuation_len != static_cast<int>(tokens.size()))
      throw InvalidInput("sequence: p + q must equal token count");
    if (static_cast<int>(tokens.size()) > context)
      throw InvalidInput("sequence: longer than model context");
  }

  std::vector<int> prefix() const {
    return {tokens.begin(), tokens.begin() + prefix_len};
  }
  std::vector<int> continuation() const {
    return {tokens.begin() + prefix_len, tokens.end()};
  }
};

using SequenceBatch = std::vector<ForgetSequence>;

// Logit rows whose next-token predictions are the continuation: rows
// p-1 .. p+q-2 of the full [seq, V] logits.
template <typename T>
Tensor<T> continuation_logits(const Tensor<T>& full_logits, const ForgetSequence& s) {
  int p = s.prefix_len, q = s.continuation_len;
  Tensor<T> out({q, full_logits.cols()});
  std::copy(full_logits.data.data() + static_cast<size_t>(p - 1) * full_logits.cols(),
            full_logits.data.data() + static_cast<size_t>(p - 1 + q) * full_logits.cols(),
            out.data.data());
  return out;
}

// ---------------------------------------------------------------------------
// direct evaluators (double accumulation, stable log-probabilities)

// (1/q) sum_i sum_y p log p over continuation positions. In [-log|V|, 0];
// minimized exactly at the per-position uniform distribution.
template <typename T>
double em_loss(const Tensor<T>& logits) {
  if (logits.rows() < 1) throw InvalidInput("em_loss: no positions");
  Tensor<T> lp = log_softmax(logits);
  double acc = 0.0;
  for (size_t i = 0; i < lp.data.size(); ++i) {
    double l = static_cast<double>(lp.data[i]);
    acc += std::exp(l) * l;
  }
  return acc / logits.rows();
}

// Mean negative log-likelihood of the target tokens.
template <typename T>
double nll_loss(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (static_cast<int>(targets.size()) != logits.rows())
    throw InvalidInput("nll_loss: one target per logit row required");
  Tensor<T> lp = log_softmax(logits);
  double acc = 0.0;
  for (int i = 0; i < logits.rows(); ++i) {
    if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= logits.cols())
      throw InvalidInput("nll_loss: target id out of vocabulary");
    acc -= static_cast<double>(lp.at(i, targets[static_cast<size_t>(i)]));
  }
  return acc / logits.rows();
}

// -gamma * sum_j log p_ij per position, averaged over positions.
template <typename T>
double ls_loss(const Tensor<T>& logits, double gamma) {
  if (gamma <= 0.0) throw InvalidInput("ls_loss: gamma must be positive");
  Tensor<T> lp = log_softmax(logits);
  double acc = 0.0;
  for (T v : lp.data) acc += static_cast<double>(v);
  return -gamma * acc / logits.rows();
}

// Distillation toward the frozen teacher with +gamma added to every
// non-target teacher logit, per continuation position.
template <typename T>
double di_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
               const std::vector<int>& targets, double gamma) {
  if (!student_logits.same_shape(teacher_logits)) throw InvalidInput("di_loss: shape mismatch");
  if (static_cast<int>(targets.size()) != student_logits.rows())
    throw InvalidInput("di_loss: one target per row required");
  if (gamma < 0.0) throw InvalidInput("di_loss: gamma must be nonnegative");
  Tensor<T> lp = log_softmax(student_logits);
  Tensor<T> mod = teacher_logits;
  for (int i = 0; i < mod.rows(); ++i)
    for (int j = 0; j < mod.cols(); ++j)
      if (j != targets[static_cast<size_t>(i)]) mod.at(i, j) += static_cast<T>(gamma);
  Tensor<T> tp = softmax(mod);
  double acc = 0.0;
  for (size_t i = 0; i < lp.data.size(); ++i)
    acc -= static_cast<double>(tp.data[i]) * static_cast<double>(lp.data[i]);
  return acc / student_logits.rows();
}

// ---------------------------------------------------------------------------
// closed-form logit gradients

namespace detail {
inline void check_probability_vector(const std::vector<double>& p) {
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("probability vector entries must be in [0,1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw InvalidInput("probability vector must sum to 1 within 1e-6");
}
}  // namespace detail

// d L_ls / d h_k = -gamma (1 - |V| p_k)
inline std::vector<double> grad_ls_logits(const std::vector<double>& p, double gamma) {
  detail::check_probability_vector(p);
  std::vector<double> g(p.size());
  double v = static_cast<double>(p.size());
  for (size_t k = 0; k < p.size(); ++k) g[k] = -gamma * (1.0 - v * p[k]);
  return g;
}

// d L_em / d h_k = p_k (log p_k + H(p)), H(p) = -sum p log p
inline std::vector<double> grad_em_logits(const std::vector<double>& p) {
  detail::check_probability_vector(p);
  double entropy = 0.0;
  for (double v : p)
    if (v > 0.0) entropy -= v * std::log(v);
  std::vector<double> g(p.size());
  for (size_t k = 0; k < p.size(); ++k)
    g[k] = p[k] > 0.0 ? p[k] * (std::log(p[k]) + entropy) : 0.0;
  return g;
}

// d L_nll / d h_k = p_k - 1[k == target]
inline std::vector<double> grad_nll_logits(const std::vector<double>& p, int target) {
  detail::check_probability_vector(p);
  if (target < 0 || target >= static_cast<int>(p.size()))
    throw InvalidInput("grad_nll_logits: target out of range");
  std::vector<double> g = p;
  g[static_cast<size_t>(target)] -= 1.0;
  return g;
}

// ---------------------------------------------------------------------------
// gradient-scale comparison

// Magnitude of the probability-dependent gradient factor per loss family:
// 1/p for LS and GA, |log p + 1| for EM. The LS/GA factor is unbounded as
// p -> 0 while the EM factor stays below 1 + |log p_min|.
struct ScaleProfilePoint {
  double p = 0.0;
  double ls_ga_factor = 0.0;
  double em_factor = 0.0;
};

inline std::vector<ScaleProfilePoint> gradient_scale_profile(const std::vector<double>& grid) {
  std::vector<ScaleProfilePoint> out;
  out.reserve(grid.size());
  for (double p : grid) {
    if (!(p > 0.0 && p < 1.0)) throw InvalidInput("gradient_scale_profile: grid values must be in (0,1)");
    out.push_back({p, 1.0 / p, std::abs(std::log(p) + 1.0)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// tape compositions (generic primitives only; no closed forms)

template <typename T>
typename Graph<T>::Id build_em_loss(Graph<T>& g, typename Graph<T>::Id cont_logits, int q) {
  auto lp = g.log_softmax_rows(cont_logits);
  auto plp = g.mul(g.exp(lp), lp);
  return g.scale(g.sum(plp), T(1) / static_cast<T>(q));
}

template <typename T>
typename Graph<T>::Id build_nll_loss(Graph<T>& g, typename Graph<T>::Id cont_logits,
                                     const std::vector<int>& targets) {
  auto lp = g.log_softmax_rows(cont_logits);
  std::vector<int32_t> rows, cols;
  for (size_t i = 0; i < targets.size(); ++i) {
    rows.push_back(static_cast<int32_t>(i));
    cols.push_back(static_cast<int32_t>(targets[i]));
  }
  auto picked = g.pick(lp, std::move(rows), std::move(cols));
  return g.scale(g.sum(picked), -T(1) / static_cast<T>(targets.size()));
}

template <typename T>
typename Graph<T>::Id build_ls_loss(Graph<T>& g, typename Graph<T>::Id cont_logits, int q,
                                    double gamma) {
  auto lp = g.log_softmax_rows(cont_logits);
  return g.scale(g.sum(lp), -static_cast<T>(gamma) / static_cast<T>(q));
}

// weights: precomputed teacher probabilities (frozen), same shape as logits
template <typename T>
typename Graph<T>::Id build_soft_ce_loss(Graph<T>& g, typename Graph<T>::Id cont_logits,
                                         const Tensor<T>& weights) {
  auto lp = g.log_softmax_rows(cont_logits);
  auto w = g.input(weights, false);
  int q = weights.rows();
  return g.scale(g.sum(g.mul(w, lp)), -T(1) / static_cast<T>(q));
}

// Teacher distribution used by DI: softmax of teacher logits with +gamma on
// all non-target coordinates.
template <typename T>
Tensor<T> di_teacher_probs(const Tensor<T>& teacher_logits, const std::vector<int>& targets,
                           double gamma) {
  Tensor<T> mod = teacher_logits;
  for (int i = 0; i < mod.rows(); ++i)
    for (int j = 0; j < mod.cols(); ++j)
      if (j != targets[static_cast<size_t>(i)]) mod.at(i, j) += static_cast<T>(gamma);
  return softmax(mod);
}

}  // namespace umlb
