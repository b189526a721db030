#pragma once

// Toy pre-norm decoder-only transformer with a block registry: every
// attention-head matrix (W_k/W_q/W_v/W_o per head) and MLP matrix
// (C_fc/C_proj per layer) is addressable as a named block for selective
// updates. Embeddings and layer norms are deliberately outside the registry.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "umlb/tensor.hpp"
#include "umlb/util.hpp"

namespace umlb {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 258;
  int context = 128;

  int d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1)
      throw InvalidInput("model config: dimensions must be positive");
    if (d_model % n_heads != 0) throw InvalidInput("model config: d_model not divisible by n_heads");
    if (vocab_size < 2) throw InvalidInput("model config: vocab_size must be >= 2");
    if (context < 2) throw InvalidInput("model config: context must be >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

enum class BlockKind : uint8_t { Wk, Wq, Wv, Wo, Cfc, Cproj };

inline const char* block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::Wk: return "Wk";
    case BlockKind::Wq: return "Wq";
    case BlockKind::Wv: return "Wv";
    case BlockKind::Wo: return "Wo";
    case BlockKind::Cfc: return "Cfc";
    case BlockKind::Cproj: return "Cproj";
  }
  return "?";
}

inline bool block_kind_is_head(BlockKind k) {
  return k == BlockKind::Wk || k == BlockKind::Wq || k == BlockKind::Wv || k == BlockKind::Wo;
}

// Canonical name: L{layer}{kind}H{head} for attention matrices, L{layer}{kind}
// for MLP matrices, e.g. "L0WvH3", "L1Cproj".
struct BlockId {
  int layer = 0;
  BlockKind kind = BlockKind::Wk;
  int head = -1;  // -1 for MLP kinds

  std::string name() const {
    std::string s = "L" + std::to_string(layer) + block_kind_name(kind);
    if (block_kind_is_head(kind)) s += "H" + std::to_string(head);
    return s;
  }

  bool operator==(const BlockId&) const = default;

  // Canonical order: layer, then kind in declaration order, then head.
  friend bool operator<(const BlockId& a, const BlockId& b) {
    if (a.layer != b.layer) return a.layer < b.layer;
    if (a.kind != b.kind) return static_cast<int>(a.kind) < static_cast<int>(b.kind);
    return a.head < b.head;
  }
};

// Byte-level vocabulary: ids 0..255 are raw bytes, then BOS and PAD.
struct Vocabulary {
  static constexpr int kBos = 256;
  static constexpr int kPad = 257;
  static constexpr int kSize = 258;

  static std::vector<int> encode(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char ch : text) ids.push_back(static_cast<int>(ch));
    return ids;
  }

  static std::string decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || id >= kSize) throw InvalidInput("vocabulary: id out of range");
      if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
  }
};

template <typename T>
struct ModelParams {
  struct Layer {
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    std::vector<Tensor<T>> wq, wk, wv, wo;  // per head: [d_model,d_head] (wo: [d_head,d_model])
    Tensor<T> c_fc, c_proj;                 // [d_model,d_ff], [d_ff,d_model]
  };

  ModelConfig cfg;
  Tensor<T> tok_emb;  // [V, d_model]; also the tied output head
  Tensor<T> pos_emb;  // [context, d_model]
  std::vector<Layer> layers;
  Tensor<T> lnf_g, lnf_b;

  std::vector<BlockId> block_ids() const {
    std::vector<BlockId> out;
    for (int l = 0; l < cfg.n_layers; ++l) {
      for (BlockKind k : {BlockKind::Wk, BlockKind::Wq, BlockKind::Wv, BlockKind::Wo})
        for (int h = 0; h < cfg.n_heads; ++h) out.push_back({l, k, h});
      out.push_back({l, BlockKind::Cfc, -1});
      out.push_back({l, BlockKind::Cproj, -1});
    }
    return out;
  }

  int n_blocks() const { return cfg.n_layers * (4 * cfg.n_heads + 2); }

  Tensor<T>& block(const BlockId& id) {
    return const_cast<Tensor<T>&>(static_cast<const ModelParams*>(this)->block(id));
  }

  const Tensor<T>& block(const BlockId& id) const {
    if (id.layer < 0 || id.layer >= cfg.n_layers) throw InvalidInput("block: layer out of range");
    const Layer& L = layers[static_cast<size_t>(id.layer)];
    if (block_kind_is_head(id.kind)) {
      if (id.head < 0 || id.head >= cfg.n_heads) throw InvalidInput("block: head out of range");
      switch (id.kind) {
        case BlockKind::Wk: return L.wk[static_cast<size_t>(id.head)];
        case BlockKind::Wq: return L.wq[static_cast<size_t>(id.head)];
        case BlockKind::Wv: return L.wv[static_cast<size_t>(id.head)];
        default: return L.wo[static_cast<size_t>(id.head)];
      }
    }
    return id.kind == BlockKind::Cfc ? L.c_fc : L.c_proj;
  }

  // Visits every learnable tensor in checkpoint order: registry blocks in
  // canonical order first, then embeddings and norms.
  template <typename F>
  void visit(F&& f) {
    for (const BlockId& id : block_ids()) f(id.name(), block(id));
    f("tok_emb", tok_emb);
    f("pos_emb", pos_emb);
    for (int l = 0; l < cfg.n_layers; ++l) {
      auto& L = layers[static_cast<size_t>(l)];
      std::string p = "L" + std::to_string(l) + ".";
      f(p + "ln1_g", L.ln1_g);
      f(p + "ln1_b", L.ln1_b);
      f(p + "ln2_g", L.ln2_g);
      f(p + "ln2_b", L.ln2_b);
    }
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<ModelParams*>(this)->visit([&](const std::string& n, Tensor<T>& t) {
      f(n, static_cast<const Tensor<T>&>(t));
    });
  }

  size_t total_parameters() const {
    size_t n = 0;
    visit([&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
    return n;
  }
};

// Deterministic init: weights from N(0, 0.02^2), norm gains 1, biases 0.
template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelParams<T> p;
  p.cfg = cfg;
  Rng rng(substream_seed(seed, "init"));
  const T std_dev = T(0.02);
  auto randn = [&](std::vector<int> shape) { return random_normal<T>(std::move(shape), std_dev, rng); };
  auto ones = [&](int n) {
    Tensor<T> t({n});
    std::fill(t.data.begin(), t.data.end(), T(1));
    return t;
  };
  p.tok_emb = randn({cfg.vocab_size, cfg.d_model});
  p.pos_emb = randn({cfg.context, cfg.d_model});
  p.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& L : p.layers) {
    L.ln1_g = ones(cfg.d_model);
    L.ln1_b = Tensor<T>({cfg.d_model});
    L.ln2_g = ones(cfg.d_model);
    L.ln2_b = Tensor<T>({cfg.d_model});
    for (int h = 0; h < cfg.n_heads; ++h) {
      L.wq.push_back(randn({cfg.d_model, cfg.d_head()}));
      L.wk.push_back(randn({cfg.d_model, cfg.d_head()}));
      L.wv.push_back(randn({cfg.d_model, cfg.d_head()}));
      L.wo.push_back(randn({cfg.d_head(), cfg.d_model}));
    }
    L.c_fc = randn({cfg.d_model, cfg.d_ff});
    L.c_proj = randn({cfg.d_ff, cfg.d_model});
  }
  p.lnf_g = ones(cfg.d_model);
  p.lnf_b = Tensor<T>({cfg.d_model});
  return p;
}

// Graph bindings for one forward pass. `flat` is aligned with visit() order so
// gradient extraction can address blocks by registry position.
template <typename T>
struct BoundParams {
  using Id = typename Graph<T>::Id;
  struct Layer {
    Id ln1_g, ln1_b, ln2_g, ln2_b;
    std::vector<Id> wq, wk, wv, wo;
    Id c_fc, c_proj;
  };
  Id tok_emb, pos_emb, lnf_g, lnf_b;
  std::vector<Layer> layers;
  std::vector<Id> flat;
};

template <typename T>
BoundParams<T> bind_params(Graph<T>& g, const ModelParams<T>& p, bool with_grad) {
  BoundParams<T> b;
  // registry blocks first, in canonical order, to mirror visit()
  b.layers.resize(p.layers.size());
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    auto& BL = b.layers[l];
    auto bind_vec = [&](const std::vector<Tensor<T>>& ts, std::vector<typename Graph<T>::Id>& out) {
      for (const auto& t : ts) {
        out.push_back(g.param(t, with_grad));
        b.flat.push_back(out.back());
      }
    };
    bind_vec(L.wk, BL.wk);
    bind_vec(L.wq, BL.wq);
    bind_vec(L.wv, BL.wv);
    bind_vec(L.wo, BL.wo);
    BL.c_fc = g.param(L.c_fc, with_grad);
    b.flat.push_back(BL.c_fc);
    BL.c_proj = g.param(L.c_proj, with_grad);
    b.flat.push_back(BL.c_proj);
  }
  b.tok_emb = g.param(p.tok_emb, with_grad);
  b.flat.push_back(b.tok_emb);
  b.pos_emb = g.param(p.pos_emb, with_grad);
  b.flat.push_back(b.pos_emb);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    auto& BL = b.layers[l];
    BL.ln1_g = g.param(L.ln1_g, with_grad);
    b.flat.push_back(BL.ln1_g);
    BL.ln1_b = g.param(L.ln1_b, with_grad);
    b.flat.push_back(BL.ln1_b);
    BL.ln2_g = g.param(L.ln2_g, with_grad);
    b.flat.push_back(BL.ln2_g);
    BL.ln2_b = g.param(L.ln2_b, with_grad);
    b.flat.push_back(BL.ln2_b);
  }
  b.lnf_g = g.param(p.lnf_g, with_grad);
  b.flat.push_back(b.lnf_g);
  b.lnf_b = g.param(p.lnf_b, with_grad);
  b.flat.push_back(b.lnf_b);
  return b;
}

struct ForwardOptions {
  bool last_row_only = false;     // compute logits for the final position only
  bool capture_attention = false;
};

template <typename T>
struct ForwardPass {
  using Id = typename Graph<T>::Id;
  Id logits = -1;                        // [seq, V] (or [1, V] with last_row_only)
  std::vector<std::vector<Id>> attention;  // [layer][head] row-stochastic patterns
};

template <typename T>
ForwardPass<T> forward_graph(Graph<T>& g, const BoundParams<T>& b, const ModelConfig& cfg,
                             const std::vector<int>& tokens, const ForwardOptions& opt = {}) {
  using Id = typename Graph<T>::Id;
  const int t = static_cast<int>(tokens.size());
  if (t < 1) throw InvalidInput("forward: empty token sequence");
  if (t > cfg.context) throw InvalidInput("forward: sequence longer than context");
  std::vector<int32_t> ids, pos;
  for (int x : tokens) {
    if (x < 0 || x >= cfg.vocab_size) throw InvalidInput("forward: token id out of vocabulary");
    ids.push_back(x);
  }
  for (int i = 0; i < t; ++i) pos.push_back(i);

  ForwardPass<T> fp;
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(cfg.d_head()));
  Id x = g.add(g.rows(b.tok_emb, ids), g.rows(b.pos_emb, pos));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& BL = b.layers[static_cast<size_t>(l)];
    Id a = g.layer_norm(x, BL.ln1_g, BL.ln1_b);
    Id attn_out = -1;
    std::vector<Id> pats;
    for (int h = 0; h < cfg.n_heads; ++h) {
      Id q = g.matmul(a, BL.wq[static_cast<size_t>(h)]);
      Id k = g.matmul(a, BL.wk[static_cast<size_t>(h)]);
      Id v = g.matmul(a, BL.wv[static_cast<size_t>(h)]);
      Id s = g.scale(g.matmul_nt(q, k), inv_sqrt_dh);
      Id pat = g.causal_softmax(s);
      if (opt.capture_attention) pats.push_back(pat);
      Id o = g.matmul(g.matmul(pat, v), BL.wo[static_cast<size_t>(h)]);
      attn_out = (attn_out < 0) ? o : g.add(attn_out, o);
    }
    if (opt.capture_attention) fp.attention.push_back(std::move(pats));
    x = g.add(x, attn_out);
    Id m = g.layer_norm(x, BL.ln2_g, BL.ln2_b);
    m = g.matmul(g.gelu(g.matmul(m, BL.c_fc)), BL.c_proj);
    x = g.add(x, m);
  }
  Id f = g.layer_norm(x, b.lnf_g, b.lnf_b);
  if (opt.last_row_only && t > 1) f = g.slice_rows(f, t - 1, t);
  fp.logits = g.matmul_nt(f, b.tok_emb);  // tied output head
  return fp;
}

// Pure function of (params, tokens): per-position next-token logits [seq, V].
template <typename T>
Tensor<T> forward_logits(const ModelParams<T>& params, const std::vector<int>& tokens) {
  Graph<T> g;
  auto b = bind_params(g, params, /*with_grad=*/false);
  auto fp = forward_graph(g, b, params.cfg, tokens);
  return g.val(fp.logits);
}

// argmax with ties broken by lowest token id
template <typename T>
int argmax_token(const T* row, int n) {
  int best = 0;
  for (int j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

// Greedy decoding; emits exactly max_new tokens unless the context limit
// truncates the run.
template <typename T>
std::vector<int> generate_greedy(const ModelParams<T>& params, const std::vector<int>& prefix,
                                 int max_new) {
  if (prefix.empty()) throw InvalidInput("generate: empty prefix");
  if (static_cast<int>(prefix.size()) > params.cfg.context)
    throw InvalidInput("generate: prefix longer than context");
  std::vector<int> seq = prefix;
  std::vector<int> out;
  for (int i = 0; i < max_new; ++i) {
    if (static_cast<int>(seq.size()) >= params.cfg.context) break;
    Graph<T> g;
    auto b = bind_params(g, params, false);
    ForwardOptions opt;
    opt.last_row_only = true;
    auto fp = forward_graph(g, b, params.cfg, seq, opt);
    const Tensor<T>& logits = g.val(fp.logits);
    int next = argmax_token(logits.data.data() + logits.numel() - logits.cols(), logits.cols());
    seq.push_back(next);
    out.push_back(next);
  }
  return out;
}

// Causal key-query attention pattern of one head: lower-triangular,
// row-stochastic [seq, seq].
template <typename T>
Tensor<T> attention_pattern(const ModelParams<T>& params, const std::vector<int>& tokens,
                            int layer, int head) {
  if (layer < 0 || layer >= params.cfg.n_layers) throw InvalidInput("attention_pattern: bad layer");
  if (head < 0 || head >= params.cfg.n_heads) throw InvalidInput("attention_pattern: bad head");
  Graph<T> g;
  auto b = bind_params(g, params, false);
  ForwardOptions opt;
  opt.capture_attention = true;
  auto fp = forward_graph(g, b, params.cfg, tokens, opt);
  return g.val(fp.attention[static_cast<size_t>(layer)][static_cast<size_t>(head)]);
}

}  // namespace umlb
