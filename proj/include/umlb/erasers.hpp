#pragma once

// End-to-end erasure procedures: memorization induction, the selective
// entropy-maximization loop with early stopping, the reference-based and
// retain-based baselines, and the ablation variants, all sharing one epoch
// driver so runs differ only in mask rule and objective.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "umlb/losses.hpp"
#include "umlb/metrics.hpp"
#include "umlb/model.hpp"
#include "umlb/optim.hpp"
#include "umlb/selection.hpp"
#include "umlb/tensor.hpp"
#include "umlb/util.hpp"

namespace umlb {

enum class EraseMethod : uint8_t {
  EMSO,
  GA,
  DI,
  GD,
  KL,
  TA,
  CD,
  SelectNLL,  // contrastive mask, NLL-ascent objective
  RandomEM,   // random mask, entropy objective
  NoDir,      // magnitude-only mask, entropy objective
  FullEM,     // every registry block, entropy objective
};

inline const char* erase_method_name(EraseMethod m) {
  switch (m) {
    case EraseMethod::EMSO: return "emso";
    case EraseMethod::GA: return "ga";
    case EraseMethod::DI: return "di";
    case EraseMethod::GD: return "gd";
    case EraseMethod::KL: return "kl";
    case EraseMethod::TA: return "ta";
    case EraseMethod::CD: return "cd";
    case EraseMethod::SelectNLL: return "select-nll";
    case EraseMethod::RandomEM: return "random-em";
    case EraseMethod::NoDir: return "no-dir";
    case EraseMethod::FullEM: return "full-em";
  }
  return "?";
}

inline EraseMethod erase_method_from_name(const std::string& s) {
  for (EraseMethod m : {EraseMethod::EMSO, EraseMethod::GA, EraseMethod::DI, EraseMethod::GD,
                        EraseMethod::KL, EraseMethod::TA, EraseMethod::CD, EraseMethod::SelectNLL,
                        EraseMethod::RandomEM, EraseMethod::NoDir, EraseMethod::FullEM})
    if (s == erase_method_name(m)) return m;
  throw InvalidInput("unknown erase method '" + s + "'");
}

struct EraseRunConfig {
  EraseMethod method = EraseMethod::EMSO;
  int k = 2;
  double lr = 1e-3;
  std::string optimizer = "adamw";  // "adamw" | "sgd"
  int batch_size = 8;
  int max_epochs = 20;
  double tau = 1.03;  // early-stop perplexity ratio; infinity disables
  std::optional<double> gamma;
  uint64_t seed = 1;
  bool recompute_mask_each_epoch = false;
  double gd_retain_weight = 1.0;
  double kl_retain_weight = 1.0;
  int memo_epochs = 10;  // reference model training for TA/CD
  double stop_at_ma = -1.0;  // stop once forget MA falls to this level (<0: off)
  bool stop_on_collapse = true;
  double collapse_rep2 = 0.9;
  double collapse_ppl_ratio = 10.0;
  // per-epoch logging
  int log_el_sample = 4;  // sequences for EL_3 in the run log (0: skip)
  int log_el_n = 3;
  int log_prompts = 8;
  int gen_max_new = 48;
  int prompt_tokens = 8;

  double resolved_gamma() const {
    if (gamma) return *gamma;
    switch (method) {
      case EraseMethod::TA: return 0.05;
      case EraseMethod::CD: return 0.3;
      case EraseMethod::DI: return 3.0;
      default: return 0.0;
    }
  }

  void validate() const {
    if (k < 1) throw InvalidInput("erase config: k must be >= 1");
    if (lr < 0.0) throw InvalidInput("erase config: learning rate must be nonnegative");
    if (batch_size < 1) throw InvalidInput("erase config: batch size must be >= 1");
    if (max_epochs < 0) throw InvalidInput("erase config: max epochs must be >= 0");
    if (!(tau > 1.0)) throw InvalidInput("erase config: tau must exceed 1");
    if (optimizer != "adamw" && optimizer != "sgd")
      throw InvalidInput("erase config: unknown optimizer '" + optimizer + "'");
    if (gamma && *gamma < 0.0) throw InvalidInput("erase config: gamma must be nonnegative");
  }
};

struct CorpusSplits {
  SequenceBatch forget;
  SequenceBatch retain_train;
  SequenceBatch retain_val;
  std::vector<std::vector<int>> utility_prompts;
};

inline std::vector<std::vector<int>> token_seqs(const SequenceBatch& b) {
  std::vector<std::vector<int>> out;
  out.reserve(b.size());
  for (const auto& s : b) out.push_back(s.tokens);
  return out;
}

// Stop iff at least one epoch is done and perplexity grew beyond tau.
inline bool early_stop_check(double ppl_now, double ppl_baseline, double tau, int epochs_done) {
  if (!(ppl_now > 0.0) || !(ppl_baseline > 0.0))
    throw InvalidInput("early_stop_check: perplexities must be positive");
  return epochs_done >= 1 && ppl_now / ppl_baseline > tau;
}

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double ma = 0.0;
  double el3 = std::numeric_limits<double>::quiet_NaN();
  double ppl = 0.0;
  double ppl_ratio = 1.0;
  double rep2 = 0.0;
  bool collapse_degeneration = false;
  bool collapse_gibberish = false;
  bool stopped_early = false;
  std::vector<std::string> mask;  // selected block names at this epoch
};

template <typename T>
struct EraseRun {
  ModelParams<T> model;
  std::vector<EpochLog> epochs;
  double baseline_ppl = 0.0;
  bool aborted_non_finite = false;
  bool collapsed = false;
  SelectionMask mask;                                // last mask (masked methods)
  std::vector<std::vector<std::string>> mask_rounds; // every selection round
  std::optional<ModelParams<T>> decode_reference;    // CD: paired memorized model
  double decode_gamma = 0.0;
};

// ---------------------------------------------------------------------------
// decode-time contrastive adjustment

// z - gamma * max(0, z_memo - z): coordinates the memorized model prefers
// get pushed down, everything else is untouched.
template <typename T>
Tensor<T> contrastive_decode_logits(const Tensor<T>& z, const Tensor<T>& z_memo, double gamma) {
  if (!z.same_shape(z_memo)) throw InvalidInput("contrastive_decode_logits: shape mismatch");
  Tensor<T> out = z;
  for (size_t i = 0; i < out.data.size(); ++i) {
    T d = z_memo.data[i] - z.data[i];
    if (d > T(0)) out.data[i] -= static_cast<T>(gamma) * d;
  }
  return out;
}

template <typename T>
struct ContrastiveDecodeModel {
  const ModelParams<T>* base = nullptr;
  const ModelParams<T>* memo = nullptr;
  double gamma = 0.3;

  int vocab() const { return base->cfg.vocab_size; }
  int context() const { return base->cfg.context; }

  Tensor<T> full_logits(const std::vector<int>& tokens) const {
    return contrastive_decode_logits(forward_logits(*base, tokens), forward_logits(*memo, tokens),
                                     gamma);
  }

  std::vector<T> last_logits(const std::vector<int>& tokens) const {
    TransformerModel<T> b{base}, m{memo};
    std::vector<T> zb = b.last_logits(tokens);
    std::vector<T> zm = m.last_logits(tokens);
    for (size_t i = 0; i < zb.size(); ++i) {
      T d = zm[i] - zb[i];
      if (d > T(0)) zb[i] -= static_cast<T>(gamma) * d;
    }
    return zb;
  }
};

// theta_o - gamma * theta_memo, elementwise over every learnable tensor.
template <typename T>
ModelParams<T> task_arithmetic(const ModelParams<T>& origin, const ModelParams<T>& memo,
                               double gamma) {
  if (!(origin.cfg == memo.cfg)) throw InvalidInput("task_arithmetic: incompatible checkpoints");
  ModelParams<T> out = origin;
  std::vector<const Tensor<T>*> memo_tensors;
  memo.visit([&](const std::string&, const Tensor<T>& t) { memo_tensors.push_back(&t); });
  size_t i = 0;
  out.visit([&](const std::string&, Tensor<T>& t) {
    const Tensor<T>& m = *memo_tensors[i++];
    if (!t.same_shape(m)) throw InvalidInput("task_arithmetic: tensor shape mismatch");
    for (size_t j = 0; j < t.data.size(); ++j)
      t.data[j] -= static_cast<T>(gamma) * m.data[j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// training steps

namespace detail {

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const EraseRunConfig& cfg) {
  if (cfg.optimizer == "sgd") return std::make_unique<SgdOptimizer<T>>(cfg.lr);
  return std::make_unique<AdamWOptimizer<T>>(cfg.lr);
}

template <typename T>
void full_model_step(ModelParams<T>& params, BatchLoss<T>& bl, Optimizer<T>& opt) {
  bl.graph.backward(bl.loss_id);
  size_t i = 0;
  params.visit([&](const std::string& name, Tensor<T>& t) {
    const Tensor<T>& g = bl.graph.grad(bl.bound.flat[i++]);
    opt.apply(name, t, g.data.data());
    if (!t.finite()) throw NumericError("full_model_step: non-finite parameters after update");
  });
}

template <typename T>
void masked_step(ModelParams<T>& params, BatchLoss<T>& bl, const SelectionMask& mask,
                 LossKind kind, Optimizer<T>& opt) {
  bl.graph.backward(bl.loss_id);
  GradientSnapshot<T> snap;
  snap.provenance = kind;
  std::vector<BlockId> all = params.block_ids();
  for (size_t i = 0; i < all.size(); ++i) {
    if (!mask.contains(all[i])) continue;
    snap.ids.push_back(all[i]);
    snap.grads.push_back(bl.graph.grad(bl.bound.flat[i]).data);
  }
  masked_update(params, mask, snap, opt);
}

inline std::vector<std::vector<size_t>> batch_indices(size_t n, int batch_size, Rng& rng) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  deterministic_shuffle(order, rng);
  std::vector<std::vector<size_t>> chunks;
  for (size_t i = 0; i < n; i += static_cast<size_t>(batch_size)) {
    chunks.emplace_back(order.begin() + i,
                        order.begin() + std::min(n, i + static_cast<size_t>(batch_size)));
  }
  return chunks;
}

inline SequenceBatch gather(const SequenceBatch& all, const std::vector<size_t>& idx) {
  SequenceBatch out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(all[i]);
  return out;
}

// Mean over sequences of full-sequence NLL (every next-token position).
template <typename T>
BatchLoss<T> lm_loss_graph(const ModelParams<T>& params, const SequenceBatch& batch,
                           bool with_grad) {
  SequenceBatch shifted;
  shifted.reserve(batch.size());
  for (const auto& s : batch) {
    if (s.tokens.size() < 2) throw InvalidInput("lm loss: sequence needs at least 2 tokens");
    ForgetSequence f;
    f.tokens = s.tokens;
    f.prefix_len = 1;
    f.continuation_len = static_cast<int>(s.tokens.size()) - 1;
    shifted.push_back(std::move(f));
  }
  LossConfig lc;
  lc.kind = LossKind::NLL;
  return batch_loss_graph(params, shifted, lc, with_grad);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// base training and memorization induction

// Plain language-model training over full sequences; returns final epoch loss.
template <typename T>
double train_lm(ModelParams<T>& params, const SequenceBatch& data, int epochs, double lr,
                int batch_size, uint64_t seed) {
  if (data.empty()) throw InvalidInput("train_lm: empty dataset");
  AdamWOptimizer<T> opt(lr);
  double last = 0.0;
  for (int e = 0; e < epochs; ++e) {
    Rng order(substream_seed(seed, "batch_order", static_cast<uint64_t>(e)));
    double acc = 0.0;
    size_t nb = 0;
    for (const auto& idx : detail::batch_indices(data.size(), batch_size, order)) {
      auto bl = detail::lm_loss_graph(params, detail::gather(data, idx), true);
      detail::full_model_step(params, bl, opt);
      acc += bl.value;
      ++nb;
    }
    last = acc / static_cast<double>(nb);
  }
  return last;
}

struct MemorizeConfig {
  double lr = 1e-3;
  std::string optimizer = "adamw";  // "adamw" | "sgd"
  int batch_size = 8;
  int max_epochs = 400;
  int check_every = 5;
  uint64_t seed = 1;
};

template <typename T>
double forget_ma(const ModelParams<T>& params, const SequenceBatch& forget) {
  TransformerModel<T> m{&params};
  double acc = 0.0;
  for (const auto& s : forget) acc += ma(m, s);
  return forget.empty() ? 0.0 : acc / static_cast<double>(forget.size());
}

// NLL descent on continuation tokens until memorization accuracy reaches
// target_ma. Throws if the epoch cap is hit, reporting the final MA.
template <typename T>
ModelParams<T> induce_memorization(const ModelParams<T>& origin, const SequenceBatch& forget,
                                   double target_ma, const MemorizeConfig& cfg = {}) {
  if (!(target_ma >= 0.0 && target_ma <= 1.0))
    throw InvalidInput("induce_memorization: target must be in [0,1]");
  ModelParams<T> params = origin;
  if (target_ma == 0.0) return params;
  if (forget.empty()) throw InvalidInput("induce_memorization: empty forget set");
  std::unique_ptr<Optimizer<T>> opt_holder;
  if (cfg.optimizer == "sgd")
    opt_holder = std::make_unique<SgdOptimizer<T>>(cfg.lr);
  else
    opt_holder = std::make_unique<AdamWOptimizer<T>>(cfg.lr);
  Optimizer<T>& opt = *opt_holder;
  LossConfig lc;
  lc.kind = LossKind::NLL;
  double current = forget_ma(params, forget);
  if (current >= target_ma) return params;
  for (int e = 0; e < cfg.max_epochs; ++e) {
    Rng order(substream_seed(cfg.seed, "memorize_order", static_cast<uint64_t>(e)));
    for (const auto& idx : detail::batch_indices(forget.size(), cfg.batch_size, order)) {
      auto bl = batch_loss_graph(params, detail::gather(forget, idx), lc, true);
      detail::full_model_step(params, bl, opt);
    }
    if ((e + 1) % cfg.check_every == 0 || e + 1 == cfg.max_epochs) {
      current = forget_ma(params, forget);
      if (current >= target_ma) return params;
    }
  }
  throw Error("induce_memorization: target MA " + std::to_string(target_ma) +
              " not reached within " + std::to_string(cfg.max_epochs) +
              " epochs (final MA " + std::to_string(current) + ")");
}

// ---------------------------------------------------------------------------
// the erasure driver

namespace detail {

template <typename T>
SelectionMask compute_mask(const ModelParams<T>& params, const SequenceBatch& forget,
                           const EraseRunConfig& cfg, int round,
                           std::vector<BlockScore>* scores_out = nullptr) {
  const int nb = params.n_blocks();
  if (cfg.method == EraseMethod::FullEM) {
    SelectionMask m;
    m.k = nb;
    m.selected = params.block_ids();
    return m;
  }
  if (cfg.method == EraseMethod::RandomEM) {
    Rng rng(substream_seed(cfg.seed, "random_mask", static_cast<uint64_t>(round)));
    std::vector<BlockId> ids = params.block_ids();
    deterministic_shuffle(ids, rng);
    SelectionMask m;
    m.k = cfg.k;
    m.clamped = cfg.k > nb;
    ids.resize(static_cast<size_t>(std::min(cfg.k, nb)));
    std::sort(ids.begin(), ids.end());
    m.selected = std::move(ids);
    return m;
  }
  // gradient-based masks share the one-random-batch protocol
  Rng rng(substream_seed(cfg.seed, "mask_batch", static_cast<uint64_t>(round)));
  std::vector<size_t> order(forget.size());
  std::iota(order.begin(), order.end(), size_t{0});
  deterministic_shuffle(order, rng);
  order.resize(std::min<size_t>(order.size(), static_cast<size_t>(cfg.batch_size)));
  SequenceBatch mask_batch = gather(forget, order);
  uint64_t batch_seed = substream_seed(cfg.seed, "mask_batch", static_cast<uint64_t>(round));
  auto em = snapshot_gradients(params, mask_batch, LossKind::EM, batch_seed);
  std::vector<BlockScore> scores;
  if (cfg.method == EraseMethod::NoDir) {
    // magnitude only: most salient by scaled l1
    scores = score_blocks(em, em);
    for (auto& s : scores) s.m = -s.scaled_l1;
  } else {
    auto nll = snapshot_gradients(params, mask_batch, LossKind::NLL, batch_seed);
    scores = score_blocks(em, nll);
  }
  if (scores_out) *scores_out = scores;
  return build_mask(scores, cfg.k);
}

template <typename T>
double epoch_rep2(const ModelParams<T>& params, const CorpusSplits& splits,
                  const EraseRunConfig& cfg) {
  if (splits.utility_prompts.empty() || cfg.log_prompts <= 0) return 0.0;
  TransformerModel<T> m{&params};
  std::vector<std::vector<int>> gens;
  size_t n = std::min<size_t>(splits.utility_prompts.size(), static_cast<size_t>(cfg.log_prompts));
  for (size_t i = 0; i < n; ++i) {
    std::vector<int> prefix = splits.utility_prompts[i];
    if (cfg.prompt_tokens > 0 && static_cast<int>(prefix.size()) > cfg.prompt_tokens)
      prefix.resize(static_cast<size_t>(cfg.prompt_tokens));
    gens.push_back(greedy_continuation(m, prefix, cfg.gen_max_new));
  }
  return rep_div(gens, 2).rep;
}

}  // namespace detail

// Shared epoch loop. theta_o is the erasure input; the run owns a working
// copy. On a non-finite loss or update the epoch is rolled back and the run
// aborts with the last coherent checkpoint.
template <typename T>
EraseRun<T> erase_run(const ModelParams<T>& origin, const CorpusSplits& splits,
                      const EraseRunConfig& cfg) {
  cfg.validate();
  const bool masked = cfg.method == EraseMethod::EMSO || cfg.method == EraseMethod::SelectNLL ||
                      cfg.method == EraseMethod::RandomEM || cfg.method == EraseMethod::NoDir ||
                      cfg.method == EraseMethod::FullEM;
  const bool needs_retain = cfg.method == EraseMethod::GD || cfg.method == EraseMethod::KL;
  if (needs_retain && splits.retain_train.empty())
    throw InvalidInput("erase: GD/KL require a retain training split");
  if (splits.forget.empty() && cfg.method != EraseMethod::KL)
    throw InvalidInput("erase: empty forget set");

  EraseRun<T> run;
  run.model = origin;

  // reference-model methods produce their result without an epoch loop
  if (cfg.method == EraseMethod::TA || cfg.method == EraseMethod::CD) {
    MemorizeConfig mc;
    mc.lr = cfg.lr;
    mc.batch_size = cfg.batch_size;
    mc.max_epochs = cfg.memo_epochs;
    mc.check_every = cfg.memo_epochs + 1;  // fixed-epoch training, no target
    mc.seed = substream_seed(cfg.seed, "memo_model");
    ModelParams<T> memo = origin;
    AdamWOptimizer<T> opt(cfg.lr);
    LossConfig lc;
    lc.kind = LossKind::NLL;
    for (int e = 0; e < cfg.memo_epochs; ++e) {
      Rng order(substream_seed(mc.seed, "memorize_order", static_cast<uint64_t>(e)));
      for (const auto& idx : detail::batch_indices(splits.forget.size(), cfg.batch_size, order)) {
        auto bl = batch_loss_graph(memo, detail::gather(splits.forget, idx), lc, true);
        detail::full_model_step(memo, bl, opt);
      }
    }
    if (cfg.method == EraseMethod::TA) {
      run.model = task_arithmetic(origin, memo, cfg.resolved_gamma());
    } else {
      run.decode_reference = std::move(memo);
      run.decode_gamma = cfg.resolved_gamma();
    }
    return run;
  }

  ModelParams<T>& work = run.model;
  std::optional<ModelParams<T>> teacher;  // frozen original for DI / KL
  if (cfg.method == EraseMethod::DI || cfg.method == EraseMethod::KL) teacher = origin;

  auto val_seqs = token_seqs(splits.retain_val);
  const bool track_ppl = !val_seqs.empty();
  if (track_ppl) run.baseline_ppl = perplexity(TransformerModel<T>{&work}, val_seqs);

  auto opt = detail::make_optimizer<T>(cfg);
  SelectionMask mask;
  int mask_round = 0;
  if (masked && cfg.max_epochs > 0) {
    mask = detail::compute_mask(work, splits.forget, cfg, mask_round++);
    run.mask_rounds.emplace_back();
    for (const auto& id : mask.selected) run.mask_rounds.back().push_back(id.name());
  }

  const double gamma = cfg.resolved_gamma();
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    if (masked && cfg.recompute_mask_each_epoch && epoch > 0) {
      mask = detail::compute_mask(work, splits.forget, cfg, mask_round++);
      run.mask_rounds.emplace_back();
      for (const auto& id : mask.selected) run.mask_rounds.back().push_back(id.name());
      opt->reset();  // moment state does not survive a mask change
    }

    ModelParams<T> backup = work;
    double epoch_loss = 0.0;
    size_t steps = 0;
    bool failed = false;
    try {
      Rng order(substream_seed(cfg.seed, "batch_order", static_cast<uint64_t>(epoch)));
      auto fchunks = detail::batch_indices(std::max<size_t>(splits.forget.size(), 1),
                                           cfg.batch_size, order);
      if (splits.forget.empty()) fchunks.clear();
      std::vector<std::vector<size_t>> rchunks;
      if (needs_retain) {
        Rng rorder(substream_seed(cfg.seed, "retain_order", static_cast<uint64_t>(epoch)));
        rchunks = detail::batch_indices(splits.retain_train.size(), cfg.batch_size, rorder);
      }
      size_t n_steps = fchunks.empty() ? rchunks.size() : fchunks.size();
      for (size_t b = 0; b < n_steps; ++b) {
        SequenceBatch fb = b < fchunks.size() ? detail::gather(splits.forget, fchunks[b])
                                              : SequenceBatch{};
        double step_loss = 0.0;
        if (masked) {
          LossConfig lc;
          lc.kind = cfg.method == EraseMethod::SelectNLL ? LossKind::GA : LossKind::EM;
          auto bl = batch_loss_graph(work, fb, lc, true);
          detail::masked_step(work, bl, mask, lc.kind, *opt);
          step_loss = bl.value;
        } else if (cfg.method == EraseMethod::GA) {
          LossConfig lc;
          lc.kind = LossKind::GA;
          auto bl = batch_loss_graph(work, fb, lc, true);
          detail::full_model_step(work, bl, *opt);
          step_loss = bl.value;
        } else if (cfg.method == EraseMethod::DI) {
          BatchLoss<T> bl;
          bl.bound = bind_params(bl.graph, work, true);
          typename Graph<T>::Id total = -1;
          for (const auto& s : fb) {
            auto teacher_logits =
                continuation_logits(forward_logits(*teacher, s.tokens), s);
            auto probs = di_teacher_probs(teacher_logits, s.continuation(), gamma);
            auto fp = forward_graph(bl.graph, bl.bound, work.cfg, s.tokens);
            auto cont = bl.graph.slice_rows(fp.logits, s.prefix_len - 1,
                                            s.prefix_len - 1 + s.continuation_len);
            auto li = build_soft_ce_loss(bl.graph, cont, probs);
            total = total < 0 ? li : bl.graph.add(total, li);
          }
          bl.loss_id = bl.graph.scale(total, T(1) / static_cast<T>(fb.size()));
          bl.value = static_cast<double>(bl.graph.val(bl.loss_id).data[0]);
          detail::full_model_step(work, bl, *opt);
          step_loss = bl.value;
        } else if (cfg.method == EraseMethod::GD || cfg.method == EraseMethod::KL) {
          const auto& rc = rchunks[b % rchunks.size()];
          SequenceBatch rb = detail::gather(splits.retain_train, rc);
          BatchLoss<T> bl;
          bl.bound = bind_params(bl.graph, work, true);
          typename Graph<T>::Id total = -1;
          if (!fb.empty()) {
            // forget term: NLL ascent
            typename Graph<T>::Id facc = -1;
            for (const auto& s : fb) {
              auto fp = forward_graph(bl.graph, bl.bound, work.cfg, s.tokens);
              auto cont = bl.graph.slice_rows(fp.logits, s.prefix_len - 1,
                                              s.prefix_len - 1 + s.continuation_len);
              auto li = build_nll_loss(bl.graph, cont, s.continuation());
              facc = facc < 0 ? li : bl.graph.add(facc, li);
            }
            total = bl.graph.scale(facc, -T(1) / static_cast<T>(fb.size()));
          }
          typename Graph<T>::Id racc = -1;
          for (const auto& s : rb) {
            auto fp = forward_graph(bl.graph, bl.bound, work.cfg, s.tokens);
            typename Graph<T>::Id li = -1;
            if (cfg.method == EraseMethod::GD) {
              auto cont = bl.graph.slice_rows(fp.logits, 0, static_cast<int>(s.tokens.size()) - 1);
              std::vector<int> targets(s.tokens.begin() + 1, s.tokens.end());
              li = build_nll_loss(bl.graph, cont, targets);
            } else {
              // KL(P_orig || P_cur) over every position, mean per token
              auto olp = log_softmax(forward_logits(*teacher, s.tokens));
              auto op = olp;
              for (auto& v : op.data) v = std::exp(v);
              auto lp = bl.graph.log_softmax_rows(fp.logits);
              auto diff = bl.graph.add(bl.graph.input(olp, false), bl.graph.scale(lp, T(-1)));
              li = bl.graph.scale(bl.graph.sum(bl.graph.mul(bl.graph.input(op, false), diff)),
                                  T(1) / static_cast<T>(olp.rows()));
            }
            racc = racc < 0 ? li : bl.graph.add(racc, li);
          }
          double w = cfg.method == EraseMethod::GD ? cfg.gd_retain_weight : cfg.kl_retain_weight;
          auto rterm = bl.graph.scale(racc, static_cast<T>(w) / static_cast<T>(rb.size()));
          total = total < 0 ? rterm : bl.graph.add(total, rterm);
          bl.loss_id = total;
          bl.value = static_cast<double>(bl.graph.val(bl.loss_id).data[0]);
          detail::full_model_step(work, bl, *opt);
          step_loss = bl.value;
        }
        epoch_loss += step_loss;
        ++steps;
      }
    } catch (const NumericError&) {
      // non-finite loss or update is collapse; hand back the last coherent
      // checkpoint
      work = std::move(backup);
      run.aborted_non_finite = true;
      run.collapsed = true;
      failed = true;
    }

    EpochLog log;
    log.epoch = epoch;
    log.loss = steps ? epoch_loss / static_cast<double>(steps) : 0.0;
    log.ma = forget_ma(work, splits.forget);
    if (cfg.log_el_sample > 0 && !splits.forget.empty()) {
      TransformerModel<T> m{&work};
      size_t n = std::min<size_t>(splits.forget.size(), static_cast<size_t>(cfg.log_el_sample));
      double acc = 0.0;
      for (size_t i = 0; i < n; ++i) acc += el_n(m, splits.forget[i], cfg.log_el_n);
      log.el3 = acc / static_cast<double>(n);
    }
    if (track_ppl) {
      log.ppl = perplexity(TransformerModel<T>{&work}, val_seqs);
      log.ppl_ratio = log.ppl / run.baseline_ppl;
    }
    log.rep2 = detail::epoch_rep2(work, splits, cfg);
    log.collapse_degeneration = log.rep2 > cfg.collapse_rep2;
    log.collapse_gibberish =
        track_ppl && log.ppl_ratio > cfg.collapse_ppl_ratio && !log.collapse_degeneration;
    for (const auto& id : mask.selected) log.mask.push_back(id.name());
    if (failed) {
      run.epochs.push_back(std::move(log));
      break;
    }
    bool stop = track_ppl && early_stop_check(log.ppl, run.baseline_ppl, cfg.tau, epoch + 1);
    log.stopped_early = stop;
    bool collapse_now = log.collapse_degeneration || log.collapse_gibberish;
    run.collapsed = run.collapsed || collapse_now;
    run.epochs.push_back(std::move(log));
    if (stop) break;
    if (cfg.stop_on_collapse && collapse_now) break;
    if (cfg.stop_at_ma >= 0.0 && run.epochs.back().ma <= cfg.stop_at_ma) break;
  }
  run.mask = mask;
  return run;
}

}  // namespace umlb
