#pragma once

// Memorization metrics (extraction likelihood, memorization accuracy, exact
// match) and utility metrics (perplexity, repetition, diversity). Everything
// is a pure function of a model interface: any type with full_logits /
// last_logits / vocab / context works, so decode-time wrappers and test
// models evaluate through the same code path.

#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "umlb/losses.hpp"
#include "umlb/model.hpp"
#include "umlb/tensor.hpp"

namespace umlb {

template <typename T>
struct TransformerModel {
  const ModelParams<T>* params = nullptr;

  int vocab() const { return params->cfg.vocab_size; }
  int context() const { return params->cfg.context; }

  Tensor<T> full_logits(const std::vector<int>& tokens) const {
    return forward_logits(*params, tokens);
  }

  std::vector<T> last_logits(const std::vector<int>& tokens) const {
    Graph<T> g;
    auto b = bind_params(g, *params, false);
    ForwardOptions opt;
    opt.last_row_only = true;
    auto fp = forward_graph(g, b, params->cfg, tokens, opt);
    const Tensor<T>& lg = g.val(fp.logits);
    return {lg.data.end() - lg.cols(), lg.data.end()};
  }
};

template <typename M>
std::vector<int> greedy_continuation(const M& model, const std::vector<int>& prefix, int max_new) {
  if (prefix.empty()) throw InvalidInput("greedy_continuation: empty prefix");
  std::vector<int> seq = prefix;
  std::vector<int> out;
  for (int i = 0; i < max_new; ++i) {
    if (static_cast<int>(seq.size()) >= model.context()) break;
    auto logits = model.last_logits(seq);
    int next = argmax_token(logits.data(), static_cast<int>(logits.size()));
    seq.push_back(next);
    out.push_back(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// n-gram overlap

namespace detail {
inline std::set<std::vector<int>> ngram_set(const std::vector<int>& ids, int n) {
  std::set<std::vector<int>> out;
  if (static_cast<int>(ids.size()) >= n)
    for (size_t i = 0; i + n <= ids.size(); ++i)
      out.insert(std::vector<int>(ids.begin() + i, ids.begin() + i + n));
  return out;
}
}  // namespace detail

// |distinct n-grams of a present in b| / |distinct n-grams of a|, 0 when a
// has no n-grams.
inline double overlap_n(const std::vector<int>& a, const std::vector<int>& b, int n) {
  if (n < 1) throw InvalidInput("overlap_n: n must be >= 1");
  auto ga = detail::ngram_set(a, n);
  if (ga.empty()) return 0.0;
  auto gb = detail::ngram_set(b, n);
  size_t hits = 0;
  for (const auto& g : ga)
    if (gb.count(g)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(ga.size());
}

// Extraction likelihood: mean over prefixes i = 1..p+q-n of the n-gram
// overlap between the greedy generation from x_{1:i} (length p+q-i) and the
// true suffix x_{i:p+q}.
template <typename M>
double el_n(const M& model, const ForgetSequence& s, int n) {
  int total = s.prefix_len + s.continuation_len;
  if (total - n < 1) throw InvalidInput("el_n: sequence too short for n");
  double acc = 0.0;
  for (int i = 1; i <= total - n; ++i) {
    std::vector<int> prefix(s.tokens.begin(), s.tokens.begin() + i);
    std::vector<int> gen = greedy_continuation(model, prefix, total - i);
    std::vector<int> suffix(s.tokens.begin() + (i - 1), s.tokens.end());
    acc += overlap_n(gen, suffix, n);
  }
  return acc / static_cast<double>(total - n);
}

// Memorization accuracy: teacher-forced argmax accuracy over continuation
// positions p+1 .. p+q-1 (q-1 scored positions).
template <typename M>
double ma(const M& model, const ForgetSequence& s) {
  int p = s.prefix_len, q = s.continuation_len;
  if (q < 2) throw InvalidInput("ma: continuation must have at least 2 tokens");
  auto logits = model.full_logits(s.tokens);
  int correct = 0;
  for (int i = p; i < p + q - 1; ++i) {
    // logits row i-1 predicts token at position i
    const auto* row = logits.data.data() + static_cast<size_t>(i - 1) * logits.cols();
    if (argmax_token(row, logits.cols()) == s.tokens[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(q - 1);
}

// Length of the matching prefix between the greedy decode and ground truth,
// stopping at the first mismatch.
template <typename M>
int exact_match(const M& model, const std::vector<int>& prefix,
                const std::vector<int>& ground_truth) {
  std::vector<int> gen = greedy_continuation(model, prefix, static_cast<int>(ground_truth.size()));
  int match = 0;
  for (size_t i = 0; i < gen.size() && i < ground_truth.size(); ++i) {
    if (gen[i] != ground_truth[i]) break;
    ++match;
  }
  return match;
}

// exp(mean token NLL), teacher-forced over every position after the first.
template <typename M>
double perplexity(const M& model, const std::vector<std::vector<int>>& corpus) {
  if (corpus.empty()) throw InvalidInput("perplexity: empty corpus");
  double nll = 0.0;
  size_t count = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    auto logits = model.full_logits(seq);
    auto lp = log_softmax(logits);
    for (size_t i = 1; i < seq.size(); ++i) {
      nll -= static_cast<double>(lp.at(static_cast<int>(i - 1), seq[i]));
      ++count;
    }
  }
  if (count == 0) throw InvalidInput("perplexity: no scorable positions");
  return std::exp(nll / static_cast<double>(count));
}

// rep_n = mean over generations of 1 - unique/total n-grams; div_n = 1 - rep_n.
// Generations with no n-grams are excluded from the mean.
struct RepDiv {
  double rep = 0.0;
  double div = 1.0;
  int counted = 0;
};

inline RepDiv rep_div(const std::vector<std::vector<int>>& generations, int n) {
  if (n < 1) throw InvalidInput("rep_div: n must be >= 1");
  RepDiv out;
  double acc = 0.0;
  for (const auto& g : generations) {
    int total = static_cast<int>(g.size()) - n + 1;
    if (total < 1) continue;
    auto uniq = detail::ngram_set(g, n);
    acc += 1.0 - static_cast<double>(uniq.size()) / static_cast<double>(total);
    ++out.counted;
  }
  if (out.counted > 0) out.rep = acc / out.counted;
  out.div = 1.0 - out.rep;
  return out;
}

// ---------------------------------------------------------------------------
// corpus-level evaluation

struct MetricSettings {
  std::vector<int> el_ns = {3};
  std::vector<int> rep_ns = {2};
  std::vector<int> div_ns = {3};
  int ematch_len = 0;        // 0: use each sequence's full continuation
  int el_max_sequences = 0;  // 0: all forget sequences
  int gen_max_new = 48;
  int prompt_tokens = 8;
};

struct MetricReport {
  std::map<int, double> el;
  double ma = 0.0;
  double ematch_mean = 0.0;
  int ematch_max = 0;
  double ppl = 1.0;
  std::map<int, double> rep;
  std::map<int, double> div;
  int n_forget = 0;
  int n_val = 0;
  int n_prompts = 0;

  std::string to_text() const {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    for (const auto& [n, v] : el) os << "el_" << n << " " << v << "\n";
    os << "ma " << ma << "\n";
    os << "ematch_mean " << ematch_mean << "\n";
    os << "ematch_max " << ematch_max << "\n";
    os << "ppl " << ppl << "\n";
    for (const auto& [n, v] : rep) os << "rep_" << n << " " << v << "\n";
    for (const auto& [n, v] : div) os << "div_" << n << " " << v << "\n";
    os << "n_forget " << n_forget << "\n";
    os << "n_val " << n_val << "\n";
    os << "n_prompts " << n_prompts << "\n";
    return os.str();
  }

  static MetricReport from_text(const std::string& text) {
    MetricReport r;
    std::istringstream is(text);
    std::string key;
    while (is >> key) {
      double v = 0.0;
      if (!(is >> v)) throw InvalidInput("metric report: malformed line at '" + key + "'");
      if (key.rfind("el_", 0) == 0) r.el[std::stoi(key.substr(3))] = v;
      else if (key == "ma") r.ma = v;
      else if (key == "ematch_mean") r.ematch_mean = v;
      else if (key == "ematch_max") r.ematch_max = static_cast<int>(v);
      else if (key == "ppl") r.ppl = v;
      else if (key.rfind("rep_", 0) == 0) r.rep[std::stoi(key.substr(4))] = v;
      else if (key.rfind("div_", 0) == 0) r.div[std::stoi(key.substr(4))] = v;
      else if (key == "n_forget") r.n_forget = static_cast<int>(v);
      else if (key == "n_val") r.n_val = static_cast<int>(v);
      else if (key == "n_prompts") r.n_prompts = static_cast<int>(v);
      else throw InvalidInput("metric report: unknown field '" + key + "'");
    }
    return r;
  }
};

template <typename M>
std::vector<std::vector<int>> prompt_generations(const M& model,
                                                 const std::vector<std::vector<int>>& prompts,
                                                 const MetricSettings& st) {
  std::vector<std::vector<int>> gens;
  gens.reserve(prompts.size());
  for (const auto& p : prompts) {
    std::vector<int> prefix = p;
    if (st.prompt_tokens > 0 && static_cast<int>(prefix.size()) > st.prompt_tokens)
      prefix.resize(static_cast<size_t>(st.prompt_tokens));
    gens.push_back(greedy_continuation(model, prefix, st.gen_max_new));
  }
  return gens;
}

template <typename M>
MetricReport evaluate_model(const M& model, const SequenceBatch& forget,
                            const std::vector<std::vector<int>>& retain_val,
                            const std::vector<std::vector<int>>& prompts,
                            const MetricSettings& st = {}) {
  MetricReport r;
  r.n_forget = static_cast<int>(forget.size());
  r.n_val = static_cast<int>(retain_val.size());
  r.n_prompts = static_cast<int>(prompts.size());

  if (!forget.empty()) {
    double ma_acc = 0.0, em_acc = 0.0;
    for (const auto& s : forget) {
      ma_acc += ma(model, s);
      std::vector<int> truth = s.continuation();
      if (st.ematch_len > 0 && static_cast<int>(truth.size()) > st.ematch_len)
        truth.resize(static_cast<size_t>(st.ematch_len));
      int m = exact_match(model, s.prefix(), truth);
      em_acc += m;
      r.ematch_max = std::max(r.ematch_max, m);
    }
    r.ma = ma_acc / static_cast<double>(forget.size());
    r.ematch_mean = em_acc / static_cast<double>(forget.size());

    size_t el_count = forget.size();
    if (st.el_max_sequences > 0)
      el_count = std::min<size_t>(el_count, static_cast<size_t>(st.el_max_sequences));
    for (int n : st.el_ns) {
      double acc = 0.0;
      for (size_t i = 0; i < el_count; ++i) acc += el_n(model, forget[i], n);
      r.el[n] = el_count ? acc / static_cast<double>(el_count) : 0.0;
    }
  }

  if (!retain_val.empty()) r.ppl = perplexity(model, retain_val);

  if (!prompts.empty()) {
    auto gens = prompt_generations(model, prompts, st);
    for (int n : st.rep_ns) r.rep[n] = rep_div(gens, n).rep;
    for (int n : st.div_ns) r.div[n] = rep_div(gens, n).div;
  }
  return r;
}

}  // namespace umlb
