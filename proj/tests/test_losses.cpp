#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "testutil.hpp"
#include "umlb/losses.hpp"

using namespace umlb;
using Catch::Approx;

namespace {

// random logits -> 64-bit probability vector
std::vector<double> random_probs(int v, Rng& rng, double spread = 3.0) {
  Tensor<double> l({1, v});
  for (auto& x : l.data) x = rng.next_normal() * spread;
  return softmax(l).data;
}

Tensor<double> logits_from_probs(const std::vector<double>& p) {
  Tensor<double> l({1, static_cast<int>(p.size())});
  for (size_t i = 0; i < p.size(); ++i) l.data[i] = std::log(p[i]);
  return l;
}

}  // namespace

TEST_CASE("em_loss values") {
  // near one-hot: p log p -> 0
  Tensor<double> hot({1, 4}, {50.0, 0.0, 0.0, 0.0});
  REQUIRE(em_loss(hot) == Approx(0.0).margin(1e-6));

  // uniform over 258
  Tensor<double> uni({1, 258});
  REQUIRE(em_loss(uni) == Approx(-std::log(258.0)).margin(1e-9));
  REQUIRE(em_loss(uni) == Approx(-5.5530).margin(1e-4));

  // hand evaluation at p = (0.9, 0.1)
  Tensor<double> two = logits_from_probs({0.9, 0.1});
  double expected = 0.9 * std::log(0.9) + 0.1 * std::log(0.1);
  REQUIRE(em_loss(two) == Approx(expected).margin(1e-12));
  REQUIRE(em_loss(two) == Approx(-0.3251).margin(1e-4));

  Tensor<double> bad({1, 2}, {std::numeric_limits<double>::infinity(), 0.0});
  REQUIRE_THROWS_AS(em_loss(bad), NumericError);
}

TEST_CASE("em_loss stays in range and ignores logit shifts") {
  Rng rng(31);
  for (int t = 0; t < 100; ++t) {
    int v = 2 + rng.next_below(20);
    Tensor<double> l({2, v});
    for (auto& x : l.data) x = rng.next_normal() * 4.0;
    double val = em_loss(l);
    REQUIRE(val <= 1e-12);
    REQUIRE(val >= -std::log(static_cast<double>(v)) - 1e-12);
    Tensor<double> shifted = l;
    double c = rng.next_normal() * 10.0;
    for (auto& x : shifted.data) x += c;
    REQUIRE(em_loss(shifted) == Approx(val).margin(1e-9));
  }
}

TEST_CASE("nll_loss values") {
  Tensor<double> hot({1, 4}, {50.0, 0.0, 0.0, 0.0});
  REQUIRE(nll_loss(hot, {0}) == Approx(0.0).margin(1e-6));

  Tensor<double> uni({1, 258});
  REQUIRE(nll_loss(uni, {17}) == Approx(std::log(258.0)).margin(1e-9));

  // p(target) = 0.5 with two symmetric choices
  Tensor<double> half({1, 2}, {0.0, 0.0});
  REQUIRE(nll_loss(half, {0}) == Approx(std::log(2.0)).margin(1e-12));

  REQUIRE_THROWS_AS(nll_loss(half, {2}), InvalidInput);
  REQUIRE(nll_loss(half, {0}) >= 0.0);
}

TEST_CASE("ls_loss values") {
  Tensor<double> uni({1, 258});
  REQUIRE(ls_loss(uni, 1.0) == Approx(258.0 * std::log(258.0)).margin(1e-6));
  REQUIRE(ls_loss(uni, 2.0) == Approx(2.0 * ls_loss(uni, 1.0)).margin(1e-9));

  // extreme logits: log-probabilities via log-sum-exp never hit -inf
  Tensor<double> steep({1, 3}, {1000.0, 0.0, -1000.0});
  REQUIRE(std::isfinite(ls_loss(steep, 1.0)));
  REQUIRE_THROWS_AS(ls_loss(uni, 0.0), InvalidInput);
}

TEST_CASE("closed-form gradients at hand-checked points") {
  auto gls = grad_ls_logits({0.9, 0.1}, 1.0);
  REQUIRE(gls[0] == Approx(0.8).margin(1e-12));
  REQUIRE(gls[1] == Approx(-0.8).margin(1e-12));

  auto gem = grad_em_logits({0.9, 0.1});
  double h = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  REQUIRE(gem[0] == Approx(0.9 * (std::log(0.9) + h)).margin(1e-12));
  REQUIRE(gem[0] == Approx(0.19775).margin(1e-5));
  REQUIRE(gem[1] == Approx(-0.19775).margin(1e-5));

  auto gnll = grad_nll_logits({0.7, 0.3}, 0);
  REQUIRE(gnll[0] == Approx(-0.3).margin(1e-12));
  REQUIRE(gnll[1] == Approx(0.3).margin(1e-12));

  REQUIRE_THROWS_AS(grad_ls_logits({0.9, 0.3}, 1.0), InvalidInput);
  REQUIRE_THROWS_AS(grad_em_logits({0.5, 0.6}), InvalidInput);
  REQUIRE_THROWS_AS(grad_nll_logits({0.5, 0.5}, 9), InvalidInput);
}

TEST_CASE("closed-form gradients match finite differences of the losses") {
  Rng rng(101);
  FdOptions opt;
  opt.step = 1e-4;
  for (int v : {2, 10, 50}) {
    for (int t = 0; t < 40; ++t) {
      // unit logit spread keeps every probability large enough for the
      // numeric oracle to resolve at 1e-4 relative
      auto p = random_probs(v, rng, 1.0);
      Tensor<double> logits = logits_from_probs(p);
      // re-derive p from the logits actually perturbed by the FD loop
      auto probs_of = [&]() { return softmax(logits).data; };

      {
        Tensor<double> analytic({1, v});
        analytic.data = grad_em_logits(probs_of());
        auto f = [&]() { return em_loss(logits); };
        REQUIRE(finite_difference_check<double>(f, {&logits}, {&analytic}, opt) < 1e-4);
      }
      {
        Tensor<double> analytic({1, v});
        analytic.data = grad_ls_logits(probs_of(), 0.7);
        auto f = [&]() { return ls_loss(logits, 0.7); };
        REQUIRE(finite_difference_check<double>(f, {&logits}, {&analytic}, opt) < 1e-4);
      }
      {
        int target = rng.next_below(v);
        Tensor<double> analytic({1, v});
        analytic.data = grad_nll_logits(probs_of(), target);
        auto f = [&]() { return nll_loss(logits, {target}); };
        REQUIRE(finite_difference_check<double>(f, {&logits}, {&analytic}, opt) < 1e-4);
      }
    }
  }
}

TEST_CASE("closed-form gradients match the tape") {
  Rng rng(202);
  for (int t = 0; t < 200; ++t) {
    int v = 2 + rng.next_below(30);
    Tensor<double> logits({1, v});
    for (auto& x : logits.data) x = rng.next_normal() * 3.0;
    auto p = softmax(logits).data;

    Graph<double> g;
    auto id = g.param(logits);
    g.backward(build_em_loss(g, id, 1));
    auto gem = grad_em_logits(p);
    for (int j = 0; j < v; ++j) {
      double got = g.grad(id).data[static_cast<size_t>(j)];
      REQUIRE(std::abs(got - gem[static_cast<size_t>(j)]) /
                  std::max(1e-8, std::abs(gem[static_cast<size_t>(j)])) <
              1e-4);
    }

    Graph<double> g2;
    auto id2 = g2.param(logits);
    g2.backward(build_ls_loss(g2, id2, 1, 1.3));
    auto gls = grad_ls_logits(p, 1.3);
    for (int j = 0; j < v; ++j)
      REQUIRE(g2.grad(id2).data[static_cast<size_t>(j)] ==
              Approx(gls[static_cast<size_t>(j)]).margin(1e-8));

    int target = rng.next_below(v);
    Graph<double> g3;
    auto id3 = g3.param(logits);
    g3.backward(build_nll_loss(g3, id3, {target}));
    auto gnl = grad_nll_logits(p, target);
    for (int j = 0; j < v; ++j)
      REQUIRE(g3.grad(id3).data[static_cast<size_t>(j)] ==
              Approx(gnl[static_cast<size_t>(j)]).margin(1e-8));
  }
}

TEST_CASE("uniform is the shared stationary point") {
  for (int v : {2, 10, 258}) {
    std::vector<double> uniform(static_cast<size_t>(v), 1.0 / v);
    for (double g : grad_ls_logits(uniform, 1.0)) REQUIRE(std::abs(g) < 1e-8);
    for (double g : grad_em_logits(uniform)) REQUIRE(std::abs(g) < 1e-8);
  }
  // off-uniform points are not stationary
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    auto p = random_probs(10, rng);
    double dev = 0.0;
    for (double x : p) dev = std::max(dev, std::abs(x - 0.1));
    if (dev <= 1e-3) continue;
    double inf_ls = 0.0, inf_em = 0.0;
    for (double g : grad_ls_logits(p, 1.0)) inf_ls = std::max(inf_ls, std::abs(g));
    for (double g : grad_em_logits(p)) inf_em = std::max(inf_em, std::abs(g));
    REQUIRE(inf_ls > 1e-8);
    REQUIRE(inf_em > 1e-8);
  }
}

TEST_CASE("gradient scale profile separates the loss families") {
  auto prof = gradient_scale_profile({1e-4, 1e-2, 0.5});
  REQUIRE(prof[0].ls_ga_factor == Approx(1e4).epsilon(1e-12));
  REQUIRE(prof[1].ls_ga_factor == Approx(100.0).epsilon(1e-12));
  REQUIRE(prof[1].em_factor == Approx(std::abs(std::log(0.01) + 1.0)).epsilon(1e-12));
  REQUIRE(prof[1].ls_ga_factor / prof[1].em_factor == Approx(27.7377).margin(1e-3));
  REQUIRE(prof[2].ls_ga_factor / prof[2].em_factor == Approx(6.5178).margin(1e-3));

  // EM factor bounded on a grid away from 0 and 1; LS/GA factor is not
  std::vector<double> grid;
  for (double p = 1e-4; p < 0.99; p *= 1.7) grid.push_back(p);
  double p_min = grid.front();
  double bound = 1.0 + std::abs(std::log(p_min));
  for (const auto& pt : gradient_scale_profile(grid)) {
    REQUIRE(pt.em_factor <= bound + 1e-12);
  }
  REQUIRE(gradient_scale_profile({1e-6}).front().ls_ga_factor > 1e5);

  REQUIRE_THROWS_AS(gradient_scale_profile({0.0}), InvalidInput);
  REQUIRE_THROWS_AS(gradient_scale_profile({1.0}), InvalidInput);
}

TEST_CASE("di_loss follows the modified-teacher definition") {
  Tensor<double> teacher({1, 3}, {2.0, 1.0, 1.0});
  auto probs = di_teacher_probs(teacher, {0}, 3.0);
  // modified logits (2, 4, 4)
  double z = std::exp(2.0) + 2.0 * std::exp(4.0);
  REQUIRE(probs.data[0] == Approx(std::exp(2.0) / z).margin(1e-12));
  REQUIRE(probs.data[0] == Approx(0.0634).margin(1e-4));
  REQUIRE(probs.data[1] == Approx(0.4683).margin(1e-4));
  REQUIRE(probs.data[2] == Approx(0.4683).margin(1e-4));

  // gamma = 0: plain distillation toward the teacher distribution
  Tensor<double> student({1, 3}, {0.5, -0.2, 0.1});
  auto tp = softmax(teacher);
  auto lp = log_softmax(student);
  double expected = 0.0;
  for (int j = 0; j < 3; ++j) expected -= tp.data[j] * lp.data[j];
  REQUIRE(di_loss(student, teacher, {0}, 0.0) == Approx(expected).margin(1e-12));

  // gamma -> inf drives the target coordinate of the teacher to zero
  auto extreme = di_teacher_probs(teacher, {0}, 200.0);
  REQUIRE(extreme.data[0] < 1e-20);

  Tensor<double> wrong({1, 4});
  REQUIRE_THROWS_AS(di_loss(student, wrong, {0}, 1.0), InvalidInput);
}

TEST_CASE("loss config validates gamma presence") {
  LossConfig ok;
  ok.kind = LossKind::LS;
  ok.gamma = 0.5;
  ok.validate();
  LossConfig missing;
  missing.kind = LossKind::DI;
  REQUIRE_THROWS_AS(missing.validate(), InvalidInput);
  LossConfig extra;
  extra.kind = LossKind::EM;
  extra.gamma = 0.5;
  REQUIRE_THROWS_AS(extra.validate(), InvalidInput);
}

TEST_CASE("batch loss is the unweighted mean over sequences") {
  ModelConfig cfg = testutil::tiny_config();
  auto params = init_model<float>(cfg, 77);
  ForgetSequence a{{0, 1, 2, 3, 4, 5}, 3, 3};
  ForgetSequence b{{5, 4, 3, 2, 1, 0}, 2, 4};
  LossConfig lc;
  lc.kind = LossKind::EM;
  double la = batch_loss_graph(params, {a}, lc, false).value;
  double lb = batch_loss_graph(params, {b}, lc, false).value;
  double lab = batch_loss_graph(params, {a, b}, lc, false).value;
  REQUIRE(lab == Approx(0.5 * (la + lb)).margin(1e-6));
}
