#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "doctest.h"
#include "topo/autodiff/adam.hpp"
#include "topo/autodiff/checkpoint.hpp"
#include "topo/autodiff/engine.hpp"
#include "topo/autodiff/gradcheck.hpp"
#include "topo/autodiff/layers.hpp"

using namespace topo::ad;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, float scale = 1.0f) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> d(0.0f, scale);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// Quadratic readout so every parameter receives an O(1) gradient.
NodeId square_sum(Graph& g, NodeId x) { return g.sum(g.mul(x, x)); }

}  // namespace

TEST_CASE("1x1 identity convolution returns its input") {
  Graph g;
  ParameterStore p;
  const NodeId x = g.input("x");
  Tensor w({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0f;
  p.add("w", w);
  p.add("b", Tensor({3}));
  const NodeId y = g.conv2d(x, g.parameter("w"), g.parameter("b"), 1, 0);
  std::mt19937_64 rng(1);
  Tensor in = random_tensor({2, 3, 5, 4}, rng);
  auto ev = evaluate(g, p, {{"x", in}});
  CHECK(ev.value(y) == in);
}

TEST_CASE("sigmoid of zero is one half") {
  Graph g;
  ParameterStore p;
  const NodeId y = g.sigmoid(g.input("x"));
  auto ev = evaluate(g, p, {{"x", Tensor({1}, 0.0f)}});
  CHECK(ev.value(y)[0] == 0.5f);
}

TEST_CASE("per-channel multiply broadcasts over space") {
  Graph g;
  const NodeId y = g.mul_channel(g.input("x"), g.input("s"));
  g.set_output("y", y);
  ParameterStore p;
  const Tensor x({2, 2, 1, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto ev = evaluate(g, p, {{"x", x}, {"s", Tensor({2, 2}, {2, -1, 0, 0.5f})}});
  const std::vector<float> want{2, 4, -3, -4, 0, 0, 3.5f, 4};
  const auto out = ev.output("y");
  CHECK(std::vector<float>(out.values().begin(), out.values().end()) == want);
  CHECK_THROWS_AS(evaluate(g, p, {{"x", x}, {"s", Tensor({2, 3})}}), ShapeError);
}

TEST_CASE("3x3 convolution of ones with zero padding") {
  Graph g;
  ParameterStore p;
  p.add("w", Tensor({1, 1, 3, 3}, 1.0f));
  p.add("b", Tensor({1}));
  const NodeId y = g.conv2d(g.input("x"), g.parameter("w"), g.parameter("b"), 1, 1);
  auto ev = evaluate(g, p, {{"x", Tensor({1, 1, 3, 3}, 1.0f)}});
  const Tensor& out = ev.value(y);
  CHECK(out.at(0, 0, 1, 1) == 9.0f);
  CHECK(out.at(0, 0, 0, 0) == 4.0f);
  CHECK(out.at(0, 0, 0, 1) == 6.0f);
}

TEST_CASE("evaluate reports unbound inputs, shape mismatches and non-finite values") {
  Graph g;
  ParameterStore p;
  const NodeId a = g.input("a");
  const NodeId b = g.input("b");
  g.add(a, b);
  CHECK_THROWS_AS(evaluate(g, p, {{"a", Tensor({2})}}), ShapeError);
  CHECK_THROWS_AS(evaluate(g, p, {{"a", Tensor({2})}, {"b", Tensor({3})}}), ShapeError);
  Tensor bad({2});
  bad[0] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(evaluate(g, p, {{"a", bad}, {"b", Tensor({2})}}), NonFiniteError);
}

TEST_CASE("gradient of sum of squares") {
  Graph g;
  ParameterStore p;
  const NodeId x = g.input("x");
  const NodeId loss = square_sum(g, x);
  auto ev = evaluate(g, p, {{"x", Tensor({3}, {1, 2, 3})}});
  auto grads = gradients(ev, loss, {true, {"x"}});
  CHECK(grads.inputs.at("x") == Tensor({3}, {2, 4, 6}));
}

TEST_CASE("BCE-with-logits derivative at zero logit with positive label") {
  Graph g;
  ParameterStore p;
  const NodeId z = g.input("z");
  const NodeId loss = g.bce_with_logits(z, g.input("y"));
  auto ev = evaluate(g, p, {{"z", Tensor({1}, 0.0f)}, {"y", Tensor({1}, 1.0f)}});
  CHECK(ev.value(loss)[0] == doctest::Approx(std::log(2.0)));
  auto grads = gradients(ev, loss, {false, {"z"}});
  CHECK(grads.inputs.at("z")[0] == doctest::Approx(-0.5).epsilon(1e-7));
}

TEST_CASE("gradients rejects non-scalar loss and label inputs") {
  Graph g;
  ParameterStore p;
  const NodeId x = g.input("x");
  const NodeId y = g.silu(x);
  const NodeId loss = g.bce_with_logits(y, g.input("label"));
  auto ev = evaluate(g, p, {{"x", Tensor({2}, 0.3f)}, {"label", Tensor({2}, 1.0f)}});
  CHECK_THROWS_AS(gradients(ev, y), ShapeError);
  CHECK_THROWS_AS(gradients(ev, loss, {true, {"label"}}), std::invalid_argument);
}

TEST_CASE("linear layer with quadratic loss is exact under gradcheck") {
  // Dyadic parameters, inputs and step keep every float operation exact, so the
  // central difference of a quadratic equals its derivative.
  Graph g;
  ParameterStore p;
  Tensor w({3, 4});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(static_cast<int>(i % 7) - 3) / 64.0f;
  p.add("w", w);
  p.add("b", Tensor({3}, {0.25f, -0.5f, 0.125f}));
  const NodeId y = g.dense(g.input("x"), g.parameter("w"), g.parameter("b"));
  const NodeId loss = g.mse(y, g.input("t"));
  Tensor x({2, 4}, {0.5f, -1.0f, 0.75f, 2.0f, -0.25f, 1.5f, 1.0f, -0.5f});
  Tensor t({2, 3}, {1.0f, 0.0f, -1.0f, 0.5f, 0.25f, 2.0f});
  GradcheckOptions opt;
  opt.step = 1.0 / 1024.0;
  opt.inputs = {"x"};
  auto report = gradcheck(g, p, {{"x", x}, {"t", t}}, loss, opt);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-6);
}

namespace {

struct SmallNet {
  Graph g;
  ParameterStore p;
  NodeId loss = -1;
};

// conv -> groupnorm -> SiLU -> stride-2 conv -> upsample -> concat skip -> conv -> pool -> dense
SmallNet make_small_net(std::uint64_t seed) {
  SmallNet net;
  NetBuilder nb(net.g, net.p, seed);
  Graph& g = net.g;
  const NodeId x = g.input("x");
  const NodeId t = g.input("temb");
  NodeId h = nb.conv(x, "c1", 2, 8, 3, 1, 1.0f, false);
  h = nb.group_norm(h, "n1", 8, 8);
  h = g.silu(h);
  h = g.add_channel(h, nb.dense(t, "temb", 4, 8));
  NodeId d = nb.conv_block(h, "down", 8, 8, 2);
  NodeId u = g.upsample2x(d);
  NodeId c = g.concat(u, h);
  NodeId o = nb.conv(c, "c2", 16, 4, 3);
  o = g.mul(o, g.sigmoid(o));
  NodeId pooled = g.global_avg_pool(o);
  NodeId logits = nb.dense(pooled, "head", 4, 1);
  net.loss = g.add(g.bce_with_logits(logits, g.input("y")), g.scale(square_sum(g, g.scale(o, 0.5f)), 0.05f));
  return net;
}

}  // namespace

TEST_CASE("conv + nonlinearity + pool stack passes gradcheck at 1e-3") {
  auto net = make_small_net(7);
  std::mt19937_64 rng(3);
  TensorMap in{{"x", random_tensor({2, 2, 6, 6}, rng)},
               {"temb", random_tensor({2, 4}, rng)},
               {"y", Tensor({2, 1}, {1.0f, 0.0f})}};
  GradcheckOptions opt;
  opt.tolerance = 1e-3;
  opt.inputs = {"x"};
  opt.max_elements = 24;
  auto report = gradcheck(net.g, net.p, in, net.loss, opt);
  for (const auto& e : report.entries) INFO(e.name << " " << e.max_rel_error);
  CHECK(report.pass);
}

TEST_CASE("random 2-layer conv net: float32 gradients vs central differences") {
  Graph g;
  ParameterStore p;
  NetBuilder nb(g, p, 11);
  NodeId h = g.silu(nb.conv(g.input("x"), "l1", 3, 6, 3));
  h = nb.conv(h, "l2", 6, 2, 3, 2);
  const NodeId loss = square_sum(g, h);
  std::mt19937_64 rng(5);
  GradcheckOptions opt;
  opt.step = 1e-3;
  opt.tolerance = 1e-3;
  opt.max_elements = 40;
  auto report = gradcheck(g, p, {{"x", random_tensor({1, 3, 7, 7}, rng)}}, loss, opt);
  CHECK(report.pass);
}

TEST_CASE("gradcheck detects a corrupted gradient") {
  auto net = make_small_net(7);
  std::mt19937_64 rng(3);
  TensorMap in{{"x", random_tensor({2, 2, 6, 6}, rng)},
               {"temb", random_tensor({2, 4}, rng)},
               {"y", Tensor({2, 1}, {1.0f, 0.0f})}};
  GradcheckOptions opt;
  opt.tamper = [](GradientsD& g) { g.parameters.at("c1.weight")[0] *= 2.0; };
  // Every element is checked, so the corrupted one is included; float64 on both
  // sides keeps the untouched tensors far inside the tolerance.
  opt.max_elements = 0;
  opt.analytic_float64 = true;
  auto report = gradcheck(net.g, net.p, in, net.loss, opt);
  CHECK_FALSE(report.pass);
  for (const auto& e : report.entries) {
    if (e.name == "c1.weight") CHECK_FALSE(e.pass);
    else CHECK(e.pass);
  }
}

TEST_CASE("every op passes gradcheck on randomized small shapes") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(2, 5);
  for (int trial = 0; trial < 6; ++trial) {
    const int n = 1 + trial % 2, c = 8, h = 2 * dim(rng), w = 2 * dim(rng);
    auto net_seed = rng();
    Graph g;
    ParameterStore p;
    NetBuilder nb(g, p, net_seed);
    const NodeId x = g.input("x");
    NodeId a = nb.conv(x, "a", c, c, 3, 1 + trial % 2, 1.0f, false);
    a = nb.group_norm(a, "gn", c, 8);
    a = g.silu(a);
    NodeId up = (trial % 2) ? g.upsample2x(a) : a;
    NodeId cat = g.concat(up, x);
    NodeId b = nb.conv(cat, "b", 2 * c, 4, 1);
    NodeId s = g.sigmoid(b);
    NodeId pooled = g.global_avg_pool(g.mul(s, b));
    NodeId head = nb.dense(pooled, "d", 4, 3);
    const NodeId gate = nb.dense(g.global_avg_pool(a), "gate", c, 4);
    const NodeId gated = g.add_channel(g.mul_channel(b, gate), pooled);
    const NodeId loss = g.add(square_sum(g, head), g.mse(gated, g.input("target")));
    TensorMap in{{"x", random_tensor({n, c, h, w}, rng)}, {"target", random_tensor({n, 4, h, w}, rng)}};
    GradcheckOptions opt;
    opt.inputs = {"x", "target"};
    opt.max_elements = 12;
    opt.seed = trial;
    auto report = gradcheck(g, p, in, loss, opt);
    for (const auto& e : report.entries) INFO(e.name << " " << e.max_rel_error);
    CHECK(report.pass);
  }
}

TEST_CASE("evaluate is bitwise deterministic") {
  auto net = make_small_net(9);
  std::mt19937_64 rng(4);
  TensorMap in{{"x", random_tensor({3, 2, 8, 8}, rng)},
               {"temb", random_tensor({3, 4}, rng)},
               {"y", Tensor({3, 1}, {1.0f, 0.0f, 1.0f})}};
  auto a = evaluate(net.g, net.p, in);
  auto b = evaluate(net.g, net.p, in);
  for (NodeId id = 0; id < net.g.size(); ++id) CHECK(a.value(id) == b.value(id));
}

TEST_CASE("gradient of a batch sum equals the sum of per-sample gradients") {
  Graph g;
  ParameterStore p;
  NetBuilder nb(g, p, 21);
  NodeId h = nb.conv_block(g.input("x"), "blk", 2, 8);
  const NodeId loss = g.sum(g.mul(h, g.input("w")));
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({2, 2, 5, 5}, rng);
  Tensor w = random_tensor({2, 8, 5, 5}, rng);
  auto both = gradients(evaluate(g, p, {{"x", x}, {"w", w}}), loss);
  auto g0 = gradients(evaluate(g, p, {{"x", x.slice_batch(0)}, {"w", w.slice_batch(0)}}), loss);
  auto g1 = gradients(evaluate(g, p, {{"x", x.slice_batch(1)}, {"w", w.slice_batch(1)}}), loss);
  for (const auto& [name, grad] : both.parameters) {
    const Tensor& a = g0.parameters.at(name);
    const Tensor& b = g1.parameters.at(name);
    for (std::size_t i = 0; i < grad.size(); ++i) CHECK(grad[i] == doctest::Approx(a[i] + b[i]).epsilon(1e-4));
  }
}

TEST_CASE("adam step") {
  ParameterStore p;
  p.add("w", Tensor({3}, {1.0f, -2.0f, 0.5f}));
  OptimizerState st;
  st.options.learning_rate = 0.1f;

  SUBCASE("zero gradient leaves parameters unchanged") {
    Gradients g;
    g.parameters.emplace("w", Tensor({3}));
    adam_step(p, g, st);
    CHECK(p.get("w") == Tensor({3}, {1.0f, -2.0f, 0.5f}));
    CHECK(st.step == 1);
  }
  SUBCASE("first step moves by about -lr*sign(g)") {
    Gradients g;
    g.parameters.emplace("w", Tensor({3}, {0.3f, -5.0f, 1e-3f}));
    adam_step(p, g, st);
    CHECK(p.get("w")[0] == doctest::Approx(0.9f).epsilon(1e-5));
    CHECK(p.get("w")[1] == doctest::Approx(-1.9f).epsilon(1e-5));
    CHECK(p.get("w")[2] == doctest::Approx(0.4f).epsilon(1e-4));
  }
  SUBCASE("constant gradient moves monotonically") {
    Gradients g;
    g.parameters.emplace("w", Tensor({3}, {1.0f, -1.0f, 2.0f}));
    std::vector<float> prev(p.get("w").storage());
    for (int k = 0; k < 2; ++k) {
      adam_step(p, g, st);
      CHECK(p.get("w")[0] < prev[0]);
      CHECK(p.get("w")[1] > prev[1]);
      CHECK(p.get("w")[2] < prev[2]);
      prev = p.get("w").storage();
    }
    CHECK(st.step == 2);
  }
  SUBCASE("shape mismatch") {
    Gradients g;
    g.parameters.emplace("w", Tensor({4}));
    CHECK_THROWS_AS(adam_step(p, g, st), ShapeError);
    CHECK(st.step == 0);
  }
}

TEST_CASE("checkpoint round trip preserves graph, parameters and metadata") {
  auto net = make_small_net(13);
  const auto path = std::filesystem::temp_directory_path() / "topo_ckpt_test.ckpt";
  write_checkpoint(path, net.g, net.p, {{"seed", 13}, {"kind", "test"}});
  auto ck = read_checkpoint(path);
  CHECK(ck.metadata.at("seed") == 13);
  CHECK(ck.graph.to_json() == net.g.to_json());
  REQUIRE(ck.params.entries().size() == net.p.entries().size());
  for (std::size_t i = 0; i < ck.params.entries().size(); ++i) {
    CHECK(ck.params.entries()[i].first == net.p.entries()[i].first);
    CHECK(ck.params.entries()[i].second == net.p.entries()[i].second);
  }
  std::ifstream f(path, std::ios::binary);
  char magic[8];
  f.read(magic, 8);
  CHECK(std::string(magic, 8) == "TOPOCKPT");
  std::filesystem::remove(path);
}
