#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracle.hpp"
#include "testutil.hpp"
#include "umlb/metrics.hpp"

using namespace umlb;
using testutil::TableModel;
using Catch::Approx;

namespace {

// uniform next-token distribution at every position
struct UniformModel {
  int v = 258;
  int ctx = 64;
  int vocab() const { return v; }
  int context() const { return ctx; }
  Tensor<float> full_logits(const std::vector<int>& tokens) const {
    return Tensor<float>({static_cast<int>(tokens.size()), v});
  }
  std::vector<float> last_logits(const std::vector<int>&) const {
    return std::vector<float>(static_cast<size_t>(v), 0.f);
  }
};

}  // namespace

TEST_CASE("overlap_n on hand-enumerated cases") {
  REQUIRE(overlap_n({1, 2, 3, 4}, {1, 2, 3, 4}, 2) == 1.0);
  REQUIRE(overlap_n({1, 2, 3}, {2, 3, 4}, 2) == 0.5);
  REQUIRE(overlap_n({1, 2, 3}, {7, 8, 9}, 1) == 0.0);
  REQUIRE(overlap_n({1}, {1, 2}, 2) == 0.0);  // no bigram in a
  REQUIRE(overlap_n({}, {1, 2}, 1) == 0.0);
  REQUIRE_THROWS_AS(overlap_n({1}, {1}, 0), InvalidInput);
}

TEST_CASE("ma counts q-1 teacher-forced positions") {
  TableModel<float> identity{4, {0, 1, 2, 3}};
  // predictions repeat the previous token; exactly 2 of 4 scored positions hit
  ForgetSequence s{{0, 0, 1, 1, 2, 2}, 1, 5};
  REQUIRE(ma(identity, s) == 0.5);

  TableModel<float> cycle{3, {1, 2, 0}};
  ForgetSequence perfect{{0, 1, 2, 0, 1}, 2, 3};
  REQUIRE(ma(cycle, perfect) == 1.0);
  ForgetSequence wrong{{0, 0, 0, 0, 0}, 2, 3};
  REQUIRE(ma(cycle, wrong) == 0.0);

  ForgetSequence tiny{{0, 1}, 1, 1};
  REQUIRE_THROWS_AS(ma(cycle, tiny), InvalidInput);
}

TEST_CASE("exact_match stops at the first mismatch") {
  TableModel<float> cycle{3, {1, 2, 0}};
  // greedy decode from 0 is 1,2,0,1,2,...
  REQUIRE(exact_match(cycle, {0}, {1, 2, 0, 1, 2}) == 5);
  REQUIRE(exact_match(cycle, {0}, {2, 2, 0}) == 0);
  REQUIRE(exact_match(cycle, {0}, {1, 2, 0, 0, 0}) == 3);
}

TEST_CASE("exact_match is non-increasing under decode corruption") {
  TableModel<float> m{4, {2, 0, 3, 1}};
  std::vector<int> prefix = {1};
  std::vector<int> truth = oracle::generate(m, prefix, 8);
  REQUIRE(exact_match(m, prefix, truth) == 8);
  for (int j = 0; j < 8; ++j) {
    auto corrupted = truth;
    corrupted[static_cast<size_t>(j)] = (corrupted[static_cast<size_t>(j)] + 1) % 4;
    REQUIRE(exact_match(m, prefix, corrupted) == j);
  }
}

TEST_CASE("el_n endpoints") {
  // a sequence that follows the table exactly is fully extractable
  TableModel<float> cycle{3, {1, 2, 0}};
  ForgetSequence memorized{{0, 1, 2, 0, 1, 2, 0}, 3, 4};
  REQUIRE(el_n(cycle, memorized, 2) == 1.0);

  // constant emission of a token absent from the sequence extracts nothing
  TableModel<float> constant{4, {3, 3, 3, 3}};
  ForgetSequence seq{{0, 1, 2, 0, 1, 2}, 3, 3};
  REQUIRE(el_n(constant, seq, 2) == 0.0);

  ForgetSequence shorty{{0, 1}, 1, 1};
  REQUIRE_THROWS_AS(el_n(cycle, shorty, 3), InvalidInput);
}

TEST_CASE("metrics equal brute-force enumeration on exhaustive toy models") {
  // vocab 2: every table and every sequence up to length 8, every split
  for (int t0 = 0; t0 < 2; ++t0)
    for (int t1 = 0; t1 < 2; ++t1) {
      TableModel<float> m{2, {t0, t1}};
      for (int len = 3; len <= 8; ++len) {
        for (int bits = 0; bits < (1 << len); ++bits) {
          std::vector<int> tokens;
          for (int i = 0; i < len; ++i) tokens.push_back((bits >> i) & 1);
          for (int p = 1; p <= len - 2; ++p) {
            ForgetSequence s{tokens, p, len - p};
            REQUIRE(ma(m, s) == oracle::ma(m, tokens, p, len - p));
            REQUIRE(exact_match(m, s.prefix(), s.continuation()) ==
                    oracle::ematch(m, s.prefix(), s.continuation()));
          }
          for (int n = 1; n <= 3 && len - n >= 1; ++n) {
            ForgetSequence s{tokens, 1, len - 1};
            REQUIRE(el_n(m, s, n) == oracle::el(m, tokens, n));
          }
        }
      }
    }
}

TEST_CASE("metrics equal brute-force enumeration on sampled vocab-3 and 4 models") {
  Rng rng(33);
  for (int v : {3, 4}) {
    int tables = 1;
    for (int i = 0; i < v; ++i) tables *= v;
    for (int ti = 0; ti < tables; ++ti) {
      TableModel<float> m{v, {}};
      int x = ti;
      for (int i = 0; i < v; ++i) {
        m.table.push_back(x % v);
        x /= v;
      }
      for (int trial = 0; trial < 6; ++trial) {
        int len = 4 + rng.next_below(5);
        std::vector<int> tokens;
        for (int i = 0; i < len; ++i) tokens.push_back(rng.next_below(v));
        int p = 1 + rng.next_below(len - 2);
        ForgetSequence s{tokens, p, len - p};
        REQUIRE(ma(m, s) == oracle::ma(m, tokens, p, len - p));
        REQUIRE(exact_match(m, s.prefix(), s.continuation()) ==
                oracle::ematch(m, s.prefix(), s.continuation()));
        for (int n = 1; n <= 3 && len - n >= 1; ++n)
          REQUIRE(el_n(m, s, n) == oracle::el(m, tokens, n));
      }
    }
  }
}

TEST_CASE("perplexity endpoints and hand evaluation") {
  UniformModel uniform;
  std::vector<std::vector<int>> corpus = {{0, 5, 9, 200}, {3, 3, 3}};
  REQUIRE(perplexity(uniform, corpus) == Approx(258.0).epsilon(1e-6));

  // hard argmax with overwhelming logits is a perfect predictor on its orbit
  TableModel<float> cycle{3, {1, 2, 0}};
  for (auto& t : cycle.table) (void)t;
  TableModel<float> strong = cycle;
  // scale logits so off-target probability vanishes in double
  struct Strong {
    TableModel<float> base;
    int vocab() const { return base.vocab(); }
    int context() const { return base.context(); }
    Tensor<float> full_logits(const std::vector<int>& toks) const {
      auto l = base.full_logits(toks);
      for (auto& x : l.data) x *= 50.f;
      return l;
    }
    std::vector<float> last_logits(const std::vector<int>& toks) const {
      auto l = base.last_logits(toks);
      for (auto& x : l) x *= 50.f;
      return l;
    }
  } perfect{strong};
  REQUIRE(perplexity(perfect, {{0, 1, 2, 0, 1}}) == Approx(1.0).margin(1e-9));

  // hand-computed mixed corpus: logit 8 at the table target, 0 elsewhere
  double p_hit = std::exp(8.0) / (std::exp(8.0) + 2.0);
  double p_miss = 1.0 / (std::exp(8.0) + 2.0);
  std::vector<std::vector<int>> two = {{0, 1, 2}, {0, 0, 1}};
  // seq1 scores hit,hit ; seq2 scores miss,hit
  double mean_nll = -(std::log(p_hit) * 3.0 + std::log(p_miss)) / 4.0;
  REQUIRE(perplexity(cycle, two) == Approx(std::exp(mean_nll)).epsilon(1e-6));

  REQUIRE_THROWS_AS(perplexity(uniform, {}), InvalidInput);
}

TEST_CASE("repetition and diversity of generations") {
  // "a a a a": 3 bigrams, 1 unique
  auto rd = rep_div({{7, 7, 7, 7}}, 2);
  REQUIRE(rd.rep == Approx(2.0 / 3.0).epsilon(1e-12));
  REQUIRE(rd.div == Approx(1.0 / 3.0).epsilon(1e-12));

  auto distinct = rep_div({{1, 2, 3, 4, 5}}, 2);
  REQUIRE(distinct.rep == 0.0);
  REQUIRE(distinct.div == 1.0);

  auto long_run = rep_div({std::vector<int>(100, 3)}, 2);
  REQUIRE(long_run.rep > 0.98);

  // too-short generations are excluded from the mean
  auto mixed = rep_div({{1}, {2, 2, 2, 2}}, 2);
  REQUIRE(mixed.counted == 1);
  REQUIRE(mixed.rep == Approx(2.0 / 3.0).epsilon(1e-12));

  REQUIRE_THROWS_AS(rep_div({{1, 2}}, 0), InvalidInput);
}

TEST_CASE("bounded metrics stay in range on fuzzed inputs") {
  Rng rng(91);
  for (int trial = 0; trial < 60; ++trial) {
    int v = 2 + rng.next_below(3);
    TableModel<float> m{v, {}};
    for (int i = 0; i < v; ++i) m.table.push_back(rng.next_below(v));
    int len = 4 + rng.next_below(5);
    std::vector<int> tokens;
    for (int i = 0; i < len; ++i) tokens.push_back(rng.next_below(v));
    int p = 1 + rng.next_below(len - 2);
    ForgetSequence s{tokens, p, len - p};
    double m_ma = ma(m, s);
    REQUIRE((m_ma >= 0.0 && m_ma <= 1.0));
    double m_el = el_n(m, s, 2);
    REQUIRE((m_el >= 0.0 && m_el <= 1.0));
    int m_em = exact_match(m, s.prefix(), s.continuation());
    REQUIRE((m_em >= 0 && m_em <= s.continuation_len));
    auto rd = rep_div({oracle::generate(m, {0}, 12)}, 2);
    REQUIRE((rd.rep >= 0.0 && rd.rep <= 1.0));
    REQUIRE((rd.div >= 0.0 && rd.div <= 1.0));
  }
}

TEST_CASE("metric report serialization is bit-stable and parseable") {
  MetricReport r;
  r.el[3] = 0.123456789;
  r.ma = 0.95;
  r.ematch_mean = 12.5;
  r.ematch_max = 16;
  r.ppl = 8.25;
  r.rep[2] = 0.0625;
  r.div[3] = 0.9375;
  r.n_forget = 50;
  r.n_val = 20;
  r.n_prompts = 20;
  std::string a = r.to_text();
  std::string b = r.to_text();
  REQUIRE(a == b);
  REQUIRE(a.find("el_3 0.123457\n") != std::string::npos);
  REQUIRE(a.find("ppl 8.250000\n") != std::string::npos);
  auto parsed = MetricReport::from_text(a);
  REQUIRE(parsed.ma == Approx(0.95));
  REQUIRE(parsed.ematch_max == 16);
  REQUIRE(parsed.rep.at(2) == Approx(0.0625));
  REQUIRE_THROWS_AS(MetricReport::from_text("bogus_field 1.0"), InvalidInput);
}

TEST_CASE("evaluate_model aggregates every family") {
  TableModel<float> cycle{3, {1, 2, 0}};
  SequenceBatch forget = {{{0, 1, 2, 0, 1, 2}, 3, 3}, {{0, 0, 0, 0, 0}, 2, 3}};
  std::vector<std::vector<int>> val = {{0, 1, 2, 0}, {1, 2, 0, 1}};
  std::vector<std::vector<int>> prompts = {{0, 1}, {2, 0}};
  MetricSettings st;
  st.el_ns = {2};
  st.gen_max_new = 12;
  st.prompt_tokens = 2;
  auto rep = evaluate_model(cycle, forget, val, prompts, st);
  REQUIRE(rep.n_forget == 2);
  REQUIRE(rep.ma == Approx(0.5 * (1.0 + 0.0)));
  REQUIRE(rep.el.at(2) >= 0.0);
  REQUIRE(rep.ematch_max == 3);
  REQUIRE(rep.ppl >= 1.0);
  REQUIRE(rep.rep.count(2) == 1);
  REQUIRE(rep.div.count(3) == 1);
}
