#pragma once

// Contrastive-gradient block scoring and the masked update: per block,
// M = cos(grad_NLL, grad_EM) * |grad_EM|_1 / sqrt(D), and the k blocks with
// the smallest M are the erase candidates.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "umlb/losses.hpp"
#include "umlb/model.hpp"
#include "umlb/optim.hpp"
#include "umlb/tensor.hpp"

namespace umlb {

// Per-block flattened gradients of one loss over one batch.
template <typename T>
struct GradientSnapshot {
  LossKind provenance = LossKind::EM;
  uint64_t batch_seed = 0;
  std::vector<BlockId> ids;            // canonical order
  std::vector<std::vector<T>> grads;   // aligned with ids, flattened
  double loss = 0.0;
};

struct BlockScore {
  BlockId id;
  double cosine = 0.0;     // in [-1, 1]; 0 for a zero gradient
  double scaled_l1 = 0.0;  // |grad_EM|_1 / sqrt(D)
  double m = 0.0;          // cosine * scaled_l1
};

struct SelectionMask {
  std::vector<BlockId> selected;  // canonical order
  int k = 0;
  bool clamped = false;  // k exceeded the number of blocks

  bool contains(const BlockId& id) const {
    return std::find(selected.begin(), selected.end(), id) != selected.end();
  }
};

// One graph holding the mean-over-sequences loss of a whole batch, every
// forward sharing the same parameter bindings.
template <typename T>
struct BatchLoss {
  Graph<T> graph;
  BoundParams<T> bound;
  typename Graph<T>::Id loss_id = -1;
  double value = 0.0;
};

template <typename T>
BatchLoss<T> batch_loss_graph(const ModelParams<T>& params, const SequenceBatch& batch,
                              const LossConfig& loss, bool with_grad = true) {
  if (batch.empty()) throw InvalidInput("batch loss: empty batch");
  loss.validate();
  BatchLoss<T> out;
  out.bound = bind_params(out.graph, params, with_grad);
  Graph<T>& g = out.graph;
  typename Graph<T>::Id total = -1;
  for (const ForgetSequence& s : batch) {
    s.validate(params.cfg.context);
    auto fp = forward_graph(g, out.bound, params.cfg, s.tokens);
    auto cont = g.slice_rows(fp.logits, s.prefix_len - 1, s.prefix_len - 1 + s.continuation_len);
    typename Graph<T>::Id li = -1;
    switch (loss.kind) {
      case LossKind::EM:
        li = build_em_loss(g, cont, s.continuation_len);
        break;
      case LossKind::NLL:
        li = build_nll_loss(g, cont, s.continuation());
        break;
      case LossKind::GA:
        li = g.scale(build_nll_loss(g, cont, s.continuation()), T(-1));
        break;
      case LossKind::LS:
        li = build_ls_loss(g, cont, s.continuation_len, *loss.gamma);
        break;
      case LossKind::DI:
        throw InvalidInput("batch loss: DI needs teacher logits, use the eraser path");
    }
    total = total < 0 ? li : g.add(total, li);
  }
  out.loss_id = g.scale(total, T(1) / static_cast<T>(batch.size()));
  out.value = static_cast<double>(g.val(out.loss_id).data[0]);
  return out;
}

// Per-block flattened gradient of the chosen loss over exactly this batch.
// Deterministic given (params, batch).
template <typename T>
GradientSnapshot<T> snapshot_gradients(const ModelParams<T>& params, const SequenceBatch& batch,
                                       LossKind kind, uint64_t batch_seed = 0) {
  if (kind != LossKind::EM && kind != LossKind::NLL)
    throw InvalidInput("snapshot_gradients: provenance must be EM or NLL");
  LossConfig lc;
  lc.kind = kind;
  BatchLoss<T> bl = batch_loss_graph(params, batch, lc, true);
  bl.graph.backward(bl.loss_id);
  GradientSnapshot<T> snap;
  snap.provenance = kind;
  snap.batch_seed = batch_seed;
  snap.loss = bl.value;
  snap.ids = params.block_ids();
  snap.grads.reserve(snap.ids.size());
  for (size_t i = 0; i < snap.ids.size(); ++i) {
    const Tensor<T>& gt = bl.graph.grad(bl.bound.flat[i]);
    snap.grads.push_back(gt.data);
  }
  return snap;
}

template <typename T>
std::vector<BlockScore> score_blocks(const GradientSnapshot<T>& em, const GradientSnapshot<T>& nll) {
  if (em.ids != nll.ids) throw InvalidInput("score_blocks: snapshots cover different registries");
  std::vector<BlockScore> scores;
  scores.reserve(em.ids.size());
  for (size_t i = 0; i < em.ids.size(); ++i) {
    const auto& ge = em.grads[i];
    const auto& gn = nll.grads[i];
    if (ge.size() != gn.size()) throw InvalidInput("score_blocks: block dimension mismatch");
    double dot = 0.0, ne = 0.0, nn = 0.0, l1 = 0.0;
    for (size_t j = 0; j < ge.size(); ++j) {
      double a = static_cast<double>(ge[j]);
      double b = static_cast<double>(gn[j]);
      dot += a * b;
      ne += a * a;
      nn += b * b;
      l1 += std::abs(a);
    }
    BlockScore s;
    s.id = em.ids[i];
    s.cosine = (ne > 0.0 && nn > 0.0) ? dot / (std::sqrt(ne) * std::sqrt(nn)) : 0.0;
    s.scaled_l1 = l1 / std::sqrt(static_cast<double>(ge.size()));
    s.m = s.cosine * s.scaled_l1;
    scores.push_back(s);
  }
  return scores;
}

// k blocks with the smallest M (most forget-aligned and salient). Ties break
// by canonical block order. k beyond the registry selects everything.
inline SelectionMask build_mask(const std::vector<BlockScore>& scores, int k) {
  if (k < 1) throw InvalidInput("build_mask: k must be >= 1");
  SelectionMask mask;
  mask.k = k;
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (scores[a].m != scores[b].m) return scores[a].m < scores[b].m;
    return a < b;  // scores arrive in canonical order
  });
  size_t take = std::min<size_t>(static_cast<size_t>(k), scores.size());
  mask.clamped = static_cast<size_t>(k) > scores.size();
  for (size_t i = 0; i < take; ++i) mask.selected.push_back(scores[order[i]].id);
  std::sort(mask.selected.begin(), mask.selected.end());
  return mask;
}

// Applies the optimizer step to the selected blocks only. All updates are
// staged and checked before any parameter is written, so a non-finite update
// leaves the model untouched.
template <typename T>
void masked_update(ModelParams<T>& params, const SelectionMask& mask,
                   const GradientSnapshot<T>& gradients, Optimizer<T>& opt) {
  std::vector<std::pair<const BlockId*, Tensor<T>>> staged;
  staged.reserve(mask.selected.size());
  for (const BlockId& id : mask.selected) {
    auto it = std::find(gradients.ids.begin(), gradients.ids.end(), id);
    if (it == gradients.ids.end()) throw InvalidInput("masked_update: gradient missing for block");
    size_t gi = static_cast<size_t>(it - gradients.ids.begin());
    Tensor<T> updated = params.block(id);
    opt.apply(id.name(), updated, gradients.grads[gi].data());
    if (!updated.finite()) throw NumericError("masked_update: non-finite update for " + id.name());
    staged.emplace_back(&id, std::move(updated));
  }
  for (auto& [id, updated] : staged) params.block(*id) = std::move(updated);
}

}  // namespace umlb
