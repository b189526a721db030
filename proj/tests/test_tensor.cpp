#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <functional>

#include "testutil.hpp"
#include "umlb/losses.hpp"
#include "umlb/model.hpp"
#include "umlb/tensor.hpp"

using namespace umlb;
using Catch::Approx;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return random_normal<double>(std::move(shape), scale, rng);
}

using BuildFn =
    std::function<Graph<double>::Id(Graph<double>&, const std::vector<Graph<double>::Id>&)>;

// FD check for one primitive: loss = sum(out * W) with fixed random weights,
// analytic gradients from the tape, numeric gradients from central
// differences re-running the same forward.
double primitive_max_rel_err(const BuildFn& build, std::vector<Tensor<double>> inputs,
                             double step = 1e-6) {
  Tensor<double> weights;
  auto eval = [&]() {
    Graph<double> g;
    std::vector<Graph<double>::Id> ids;
    for (auto& t : inputs) ids.push_back(g.param(t));
    auto out = build(g, ids);
    if (weights.numel() == 0) weights = random_tensor(g.val(out).shape, 99, 1.0);
    auto loss = g.sum(g.mul(out, g.input(weights, false)));
    return g;
  };

  Graph<double> g0;
  std::vector<Graph<double>::Id> ids0;
  for (auto& t : inputs) ids0.push_back(g0.param(t));
  auto out0 = build(g0, ids0);
  weights = random_tensor(g0.val(out0).shape, 99, 1.0);
  auto loss0 = g0.sum(g0.mul(out0, g0.input(weights, false)));
  g0.backward(loss0);
  std::vector<Tensor<double>> analytic;
  for (size_t i = 0; i < inputs.size(); ++i) analytic.push_back(g0.grad(ids0[i]));

  auto f = [&]() {
    Graph<double> g;
    std::vector<Graph<double>::Id> ids;
    for (auto& t : inputs) ids.push_back(g.param(t));
    auto out = build(g, ids);
    auto loss = g.sum(g.mul(out, g.input(weights, false)));
    return g.val(loss).data[0];
  };
  std::vector<Tensor<double>*> ps;
  std::vector<const Tensor<double>*> as;
  for (size_t i = 0; i < inputs.size(); ++i) {
    ps.push_back(&inputs[i]);
    as.push_back(&analytic[i]);
  }
  FdOptions opt;
  opt.step = step;
  return finite_difference_check<double>(f, ps, as, opt);
}

}  // namespace

TEST_CASE("softmax matches hand evaluation") {
  Tensor<double> l({1, 3}, {1.0, 2.0, 3.0});
  auto s = softmax(l);
  // 64-bit oracle: e^x / sum e^x computed directly
  double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  REQUIRE(s.data[0] == Approx(std::exp(1.0) / z).epsilon(1e-12));
  REQUIRE(s.data[1] == Approx(std::exp(2.0) / z).epsilon(1e-12));
  REQUIRE(s.data[2] == Approx(std::exp(3.0) / z).epsilon(1e-12));
  REQUIRE(s.data[0] == Approx(0.09003057).margin(1e-7));
  REQUIRE(s.data[1] == Approx(0.24472847).margin(1e-7));
  REQUIRE(s.data[2] == Approx(0.66524096).margin(1e-7));
}

TEST_CASE("softmax symmetry and overflow stability") {
  Tensor<float> flat({1, 4}, {0.f, 0.f, 0.f, 0.f});
  for (float v : softmax(flat).data) REQUIRE(v == Approx(0.25).margin(1e-7));

  Tensor<float> steep({1, 2}, {1e4f, 0.f});
  auto s = softmax(steep);
  REQUIRE(std::isfinite(s.data[0]));
  REQUIRE(s.data[0] == Approx(1.0).margin(1e-7));
  REQUIRE(s.data[1] == Approx(0.0).margin(1e-7));
}

TEST_CASE("softmax rows sum to one and are permutation-equivariant") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 2 + rng.next_below(12);
    Tensor<double> l({1, n});
    for (auto& v : l.data) v = rng.next_normal() * 5.0;
    auto s = softmax(l);
    double sum = 0.0;
    for (double v : s.data) sum += v;
    REQUIRE(sum == Approx(1.0).margin(1e-6));

    std::vector<size_t> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), size_t{0});
    deterministic_shuffle(perm, rng);
    Tensor<double> lp({1, n});
    for (int j = 0; j < n; ++j) lp.data[j] = l.data[perm[static_cast<size_t>(j)]];
    auto sp = softmax(lp);
    for (int j = 0; j < n; ++j)
      REQUIRE(sp.data[j] == Approx(s.data[perm[static_cast<size_t>(j)]]).margin(1e-12));
  }
}

TEST_CASE("softmax rejects non-finite input") {
  Tensor<float> bad({1, 2}, {std::numeric_limits<float>::quiet_NaN(), 0.f});
  REQUIRE_THROWS_AS(softmax(bad), NumericError);
}

TEST_CASE("backward of sum is all ones") {
  Tensor<double> p = random_tensor({3, 4}, 5);
  Graph<double> g;
  auto id = g.param(p);
  auto loss = g.sum(id);
  g.backward(loss);
  for (double v : g.grad(id).data) REQUIRE(v == 1.0);
}

TEST_CASE("backward of half squared norm is the parameter itself") {
  Tensor<double> p({2}, {3.0, 4.0});
  Graph<double> g;
  auto id = g.param(p);
  auto loss = g.scale(g.sum(g.mul(id, id)), 0.5);
  g.backward(loss);
  REQUIRE(g.grad(id).data[0] == Approx(3.0).epsilon(1e-12));
  REQUIRE(g.grad(id).data[1] == Approx(4.0).epsilon(1e-12));
}

TEST_CASE("disconnected parameter keeps a zero gradient") {
  Tensor<double> used = random_tensor({2, 2}, 3);
  Tensor<double> unused = random_tensor({2, 2}, 4);
  Graph<double> g;
  auto a = g.param(used);
  auto b = g.param(unused);
  auto loss = g.sum(a);
  g.backward(loss);
  for (double v : g.grad(b).data) REQUIRE(v == 0.0);
}

TEST_CASE("backward is deterministic bit for bit") {
  auto run = [](std::vector<float>& out) {
    ModelConfig cfg = testutil::tiny_config();
    auto params = init_model<float>(cfg, 11);
    std::vector<int> tokens = {0, 3, 5, 1, 7, 2};
    ForgetSequence s{tokens, 3, 3};
    LossConfig lc;
    lc.kind = LossKind::EM;
    auto bl = batch_loss_graph(params, {s}, lc, true);
    bl.graph.backward(bl.loss_id);
    for (auto id : bl.bound.flat)
      for (float v : bl.graph.grad(id).data) out.push_back(v);
  };
  std::vector<float> g1, g2;
  run(g1);
  run(g2);
  REQUIRE(g1.size() == g2.size());
  REQUIRE(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(float)) == 0);
}

TEST_CASE("non-finite loss is rejected by backward") {
  Tensor<double> p({1}, {1e308});
  Graph<double> g;
  auto id = g.param(p);
  auto loss = g.sum(g.mul(id, id));  // overflows to inf
  REQUIRE_THROWS_AS(g.backward(loss), NumericError);
}

TEST_CASE("finite differences on x squared") {
  Tensor<double> x({1}, {1.0});
  Graph<double> g;
  auto id = g.param(x);
  auto loss = g.sum(g.mul(id, id));
  g.backward(loss);
  Tensor<double> analytic = g.grad(id);
  auto f = [&]() {
    Graph<double> h;
    auto hid = h.param(x);
    return h.val(h.sum(h.mul(hid, hid))).data[0];
  };
  FdOptions opt;
  opt.step = 1e-4;
  double err = finite_difference_check<double>(f, {&x}, {&analytic}, opt);
  REQUIRE(err < 1e-6);
}

TEST_CASE("finite_difference_check validates the step") {
  Tensor<double> x({1}, {1.0});
  Tensor<double> gdummy({1}, {0.0});
  auto f = []() { return 0.0; };
  FdOptions opt;
  opt.step = 0.0;
  REQUIRE_THROWS_AS(finite_difference_check<double>(f, {&x}, {&gdummy}, opt), InvalidInput);
}

TEST_CASE("every primitive matches central finite differences in 64-bit") {
  using G = Graph<double>;
  auto one = [](G& g, const std::vector<G::Id>& in) { return in[0]; };
  (void)one;

  SECTION("matmul") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.matmul(in[0], in[1]); },
        {random_tensor({3, 4}, 1), random_tensor({4, 5}, 2)});
    REQUIRE(err < 1e-4);
  }
  SECTION("matmul_nt") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.matmul_nt(in[0], in[1]); },
        {random_tensor({3, 4}, 1), random_tensor({5, 4}, 2)});
    REQUIRE(err < 1e-4);
  }
  SECTION("add") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.add(in[0], in[1]); },
        {random_tensor({3, 4}, 1), random_tensor({3, 4}, 2)});
    REQUIRE(err < 1e-4);
  }
  SECTION("scale") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.scale(in[0], -2.5); },
        {random_tensor({3, 4}, 1)});
    REQUIRE(err < 1e-4);
  }
  SECTION("add_row") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.add_row(in[0], in[1]); },
        {random_tensor({3, 4}, 1), random_tensor({4}, 2)});
    REQUIRE(err < 1e-4);
  }
  SECTION("mul_row") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.mul_row(in[0], in[1]); },
        {random_tensor({3, 4}, 1), random_tensor({4}, 2)});
    REQUIRE(err < 1e-4);
  }
  SECTION("layer_norm") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.layer_norm(in[0], in[1], in[2]); },
        {random_tensor({3, 8}, 1), random_tensor({8}, 2), random_tensor({8}, 3)});
    REQUIRE(err < 1e-4);
  }
  SECTION("gelu") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.gelu(in[0]); },
        {random_tensor({3, 4}, 1)});
    REQUIRE(err < 1e-4);
  }
  SECTION("causal_softmax") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.causal_softmax(in[0]); },
        {random_tensor({5, 5}, 1)});
    REQUIRE(err < 1e-4);
  }
  SECTION("log_softmax") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.log_softmax_rows(in[0]); },
        {random_tensor({3, 6}, 1)});
    REQUIRE(err < 1e-4);
  }
  SECTION("exp") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.exp(in[0]); },
        {random_tensor({3, 4}, 1)});
    REQUIRE(err < 1e-4);
  }
  SECTION("mul") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.mul(in[0], in[1]); },
        {random_tensor({3, 4}, 1), random_tensor({3, 4}, 2)});
    REQUIRE(err < 1e-4);
  }
  SECTION("sum") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.sum(in[0]); },
        {random_tensor({3, 4}, 1)});
    REQUIRE(err < 1e-4);
  }
  SECTION("pick") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.pick(in[0], {0, 1, 2}, {3, 0, 2}); },
        {random_tensor({3, 4}, 1)});
    REQUIRE(err < 1e-4);
  }
  SECTION("rows") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.rows(in[0], {2, 0, 2, 1}); },
        {random_tensor({3, 4}, 1)});
    REQUIRE(err < 1e-4);
  }
  SECTION("slice_rows") {
    auto err = primitive_max_rel_err(
        [](G& g, const std::vector<G::Id>& in) { return g.slice_rows(in[0], 1, 3); },
        {random_tensor({4, 4}, 1)});
    REQUIRE(err < 1e-4);
  }
}

TEST_CASE("transformer EM loss gradient matches finite differences") {
  ModelConfig cfg = testutil::tiny_config();
  std::vector<int> tokens = {0, 3, 5, 1, 7, 2, 4, 6};
  ForgetSequence s{tokens, 4, 4};
  LossConfig lc;
  lc.kind = LossKind::EM;

  SECTION("64-bit, all coordinates, tight tolerance") {
    auto params = init_model<double>(cfg, 21);
    // a few NLL steps sharpen the output distribution away from uniform
    AdamWOptimizer<double> opt(1e-2);
    LossConfig nll;
    nll.kind = LossKind::NLL;
    for (int i = 0; i < 5; ++i) {
      auto bl = batch_loss_graph(params, {s}, nll, true);
      bl.graph.backward(bl.loss_id);
      size_t k = 0;
      params.visit([&](const std::string& name, Tensor<double>& t) {
        opt.apply(name, t, bl.graph.grad(bl.bound.flat[k++]).data.data());
      });
    }
    auto bl = batch_loss_graph(params, {s}, lc, true);
    bl.graph.backward(bl.loss_id);
    std::vector<Tensor<double>> analytic;
    std::vector<Tensor<double>*> ps;
    size_t k = 0;
    params.visit([&](const std::string&, Tensor<double>& t) {
      analytic.push_back(bl.graph.grad(bl.bound.flat[k++]));
      ps.push_back(&t);
    });
    std::vector<const Tensor<double>*> as;
    for (auto& a : analytic) as.push_back(&a);
    auto f = [&]() { return batch_loss_graph(params, {s}, lc, false).value; };
    FdOptions opt_fd;
    opt_fd.step = 1e-5;
    opt_fd.max_coords_per_tensor = 6;
    REQUIRE(finite_difference_check<double>(f, ps, as, opt_fd) < 1e-4);
  }

  SECTION("32-bit analytic gradient against the 64-bit numeric oracle, step 1e-3") {
    auto params = init_model<float>(cfg, 21);
    AdamWOptimizer<float> opt(1e-2f);
    LossConfig nll;
    nll.kind = LossKind::NLL;
    for (int i = 0; i < 5; ++i) {
      auto bl = batch_loss_graph(params, {s}, nll, true);
      bl.graph.backward(bl.loss_id);
      size_t k = 0;
      params.visit([&](const std::string& name, Tensor<float>& t) {
        opt.apply(name, t, bl.graph.grad(bl.bound.flat[k++]).data.data());
      });
    }
    // analytic gradients from the float training path
    auto bl = batch_loss_graph(params, {s}, lc, true);
    bl.graph.backward(bl.loss_id);
    std::vector<Tensor<double>> analytic;
    size_t k = 0;
    params.visit([&](const std::string&, Tensor<float>&) {
      analytic.push_back(bl.graph.grad(bl.bound.flat[k++]).template cast<double>());
    });
    // numeric oracle re-runs the same model in 64-bit
    ModelParams<double> params64 = init_model<double>(cfg, 21);
    {
      std::vector<const Tensor<float>*> src;
      params.visit([&](const std::string&, const Tensor<float>& t) { src.push_back(&t); });
      size_t i = 0;
      params64.visit([&](const std::string&, Tensor<double>& t) {
        t = src[i++]->template cast<double>();
      });
    }
    std::vector<Tensor<double>*> ps;
    params64.visit([&](const std::string&, Tensor<double>& t) { ps.push_back(&t); });
    std::vector<const Tensor<double>*> as;
    for (auto& a : analytic) as.push_back(&a);
    auto f = [&]() { return batch_loss_graph(params64, {s}, lc, false).value; };
    FdOptions opt_fd;
    opt_fd.step = 1e-3;
    opt_fd.max_coords_per_tensor = 4;
    // a float gradient cannot resolve coordinates that are zero to float noise
    opt_fd.min_numeric_grad = 1e-4;
    REQUIRE(finite_difference_check<double>(f, ps, as, opt_fd) < 1e-3);
  }
}
