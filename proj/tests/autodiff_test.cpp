#include <doctest.h>

#include <cmath>
#include <random>

#include "l2t/autodiff.hpp"

using namespace l2t;

namespace {

Tensor random_tensor(std::mt19937_64& rng, std::vector<int> shape,
                     double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (double& v : t.data) v = dist(rng);
  return t;
}

double max_rel_err(const Tensor& got, const Tensor& want) {
  double worst = 0.0;
  for (size_t i = 0; i < got.data.size(); ++i) {
    double denom = std::max({std::fabs(got.data[i]), std::fabs(want.data[i]),
                             1e-8});
    worst = std::max(worst, std::fabs(got.data[i] - want.data[i]) / denom);
  }
  return worst;
}

// Checks Graph::backward for `build` against central differences over every
// parameter coordinate.
void gradcheck(
    const std::function<NodeId(Graph&, std::vector<NodeId>&)>& build,
    std::vector<Tensor> params, double tol = 1e-4) {
  for (Tensor& p : params) p.requires_grad = true;

  Graph g;
  std::vector<NodeId> leaves;
  for (const Tensor& p : params) leaves.push_back(g.leaf(p));
  std::vector<NodeId> leaves_copy = leaves;
  NodeId loss = build(g, leaves_copy);
  GradMap grads = g.backward(loss);

  auto eval = [&](const std::vector<Tensor>& ps) {
    Graph g2;
    std::vector<NodeId> ls;
    for (const Tensor& p : ps) ls.push_back(g2.leaf(p));
    NodeId out = build(g2, ls);
    return g2.value(out).data[0];
  };
  std::vector<Tensor> fd = finite_diff_grad(eval, params, 1e-5);
  for (size_t i = 0; i < params.size(); ++i) {
    REQUIRE(grads.has(leaves[i]));
    CHECK(max_rel_err(grads.at(leaves[i]), fd[i]) < tol);
  }
}

}  // namespace

TEST_CASE("sum gradient is ones") {
  Graph g;
  Tensor x = Tensor::vec({1.0, 2.0, 3.0});
  x.requires_grad = true;
  NodeId xid = g.leaf(x);
  NodeId loss = g.sum(xid);
  GradMap grads = g.backward(loss);
  const Tensor& gx = grads.at(xid);
  CHECK(gx.data == std::vector<double>{1.0, 1.0, 1.0});
}

TEST_CASE("sum of squares gradient") {
  Graph g;
  Tensor x = Tensor::vec({1.0, 2.0});
  x.requires_grad = true;
  NodeId xid = g.leaf(x);
  NodeId loss = g.sum(g.mul(xid, xid));
  GradMap grads = g.backward(loss);
  CHECK(grads.at(xid).data == std::vector<double>{2.0, 4.0});
}

TEST_CASE("backward rejects non-scalar loss") {
  Graph g;
  Tensor x = Tensor::vec({1.0, 2.0});
  x.requires_grad = true;
  NodeId xid = g.leaf(x);
  CHECK_THROWS_AS((void)g.backward(xid), Error);
}

TEST_CASE("unreachable leaves get zero gradients") {
  Graph g;
  Tensor x = Tensor::vec({1.0});
  x.requires_grad = true;
  Tensor orphan = Tensor::vec({5.0, 6.0});
  orphan.requires_grad = true;
  NodeId xid = g.leaf(x);
  NodeId oid = g.leaf(orphan);
  NodeId loss = g.sum(xid);
  GradMap grads = g.backward(loss);
  CHECK(grads.at(oid).data == std::vector<double>{0.0, 0.0});
}

TEST_CASE("matmul identity and shape errors") {
  Graph g;
  NodeId eye = g.leaf(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  NodeId prod = g.matmul(eye, eye);
  CHECK(g.value(prod).data == std::vector<double>{1, 0, 0, 1});

  NodeId bad = g.leaf(Tensor::matrix(3, 1, {1, 2, 3}));
  CHECK_THROWS_AS((void)g.matmul(eye, bad), Error);
}

TEST_CASE("softmax rows: symmetry, overflow safety, stochasticity") {
  Graph g;
  NodeId flat = g.softmax_rows(g.leaf(Tensor::matrix(1, 3, {0, 0, 0})));
  for (double v : g.value(flat).data) CHECK(v == doctest::Approx(1.0 / 3));

  NodeId shifted = g.softmax_rows(g.leaf(Tensor::matrix(1, 2, {1000, 0})));
  CHECK(g.value(shifted).data[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(g.value(shifted).data[1] == doctest::Approx(0.0).epsilon(1e-12));

  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    Tensor x = random_tensor(rng, {4, 7}, 3.0);
    Graph g2;
    NodeId sm = g2.softmax_rows(g2.leaf(x));
    const Tensor& p = g2.value(sm);
    for (int r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int c = 0; c < 7; ++c) {
        CHECK(p.at(r, c) >= 0.0);
        s += p.at(r, c);
      }
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("cross entropy trivial values") {
  // uniform logits over 7 classes, one masked token -> ln 7
  Graph g;
  NodeId logits = g.leaf(Tensor::matrix(1, 7, std::vector<double>(7, 0.0)));
  std::vector<int> targets = {3};
  std::vector<uint8_t> mask = {1};
  NodeId loss =
      g.cross_entropy_masked(logits, targets, mask, Reduction::Sum);
  CHECK(g.value(loss).data[0] ==
        doctest::Approx(std::log(7.0)).epsilon(1e-12));

  // +20 on the target: near-delta distribution, loss = log(1 + 6 e^-20)
  std::vector<double> confident(7, 0.0);
  confident[3] = 20.0;
  Graph g2;
  NodeId l2 = g2.cross_entropy_masked(
      g2.leaf(Tensor::matrix(1, 7, confident)), targets, mask,
      Reduction::Sum);
  CHECK(g2.value(l2).data[0] ==
        doctest::Approx(std::log1p(6.0 * std::exp(-20.0))).epsilon(1e-9));
  CHECK(g2.value(l2).data[0] < 1e-7);
}

TEST_CASE("cross entropy token_mean equals per-position brute force") {
  std::mt19937_64 rng(11);
  Tensor logits = random_tensor(rng, {5, 9}, 2.0);
  std::vector<int> targets = {1, 8, 0, 4, 2};
  std::vector<uint8_t> mask = {1, 0, 1, 1, 0};

  // brute force: evaluate each masked position as its own 1-row problem
  double expect = 0.0;
  int count = 0;
  for (int t = 0; t < 5; ++t) {
    if (!mask[t]) continue;
    Graph g1;
    std::vector<double> row(logits.data.begin() + t * 9,
                            logits.data.begin() + (t + 1) * 9);
    std::vector<int> tg = {targets[t]};
    std::vector<uint8_t> mk = {1};
    NodeId l = g1.cross_entropy_masked(g1.leaf(Tensor::matrix(1, 9, row)), tg,
                                       mk, Reduction::Sum);
    expect += g1.value(l).data[0];
    ++count;
  }
  expect /= count;

  Graph g;
  NodeId loss = g.cross_entropy_masked(g.leaf(logits), targets, mask,
                                       Reduction::TokenMean);
  CHECK(g.value(loss).data[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("cross entropy error surfaces") {
  Graph g;
  NodeId logits = g.leaf(Tensor::matrix(2, 4, std::vector<double>(8, 0.0)));
  std::vector<int> targets = {0, 1};
  std::vector<uint8_t> none = {0, 0};
  CHECK_THROWS_AS(
      (void)g.cross_entropy_masked(logits, targets, none, Reduction::Sum),
      Error);
  std::vector<int> oov = {0, 9};
  std::vector<uint8_t> both = {1, 1};
  CHECK_THROWS_AS(
      (void)g.cross_entropy_masked(logits, oov, both, Reduction::Sum), Error);
}

TEST_CASE("non-finite forward raises") {
  Graph g;
  NodeId big = g.leaf(Tensor::matrix(1, 2, {1e308, 1e308}));
  CHECK_THROWS_AS((void)g.mul(big, big), Error);
}

TEST_CASE("finite difference oracle sanity") {
  // f(x) = x^2 at x = 3: derivative 6
  auto f = [](const std::vector<Tensor>& ps) {
    return ps[0].data[0] * ps[0].data[0];
  };
  std::vector<Tensor> fd =
      finite_diff_grad(f, {Tensor::scalar(3.0)}, 1e-5);
  CHECK(fd[0].data[0] == doctest::Approx(6.0).epsilon(1e-9));

  auto constant = [](const std::vector<Tensor>&) { return 42.0; };
  std::vector<Tensor> zero =
      finite_diff_grad(constant, {Tensor::vec({1, 2, 3})}, 1e-5);
  for (double v : zero[0].data) CHECK(v == 0.0);
}

TEST_CASE("gradcheck: every differentiable op, 20 random seeds") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    int m = 2 + static_cast<int>(rng() % 4);
    int k = 2 + static_cast<int>(rng() % 5);
    int n = 2 + static_cast<int>(rng() % 4);

    gradcheck(
        [](Graph& g, std::vector<NodeId>& p) {
          return g.sum(g.matmul(p[0], p[1]));
        },
        {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})});

    gradcheck(
        [](Graph& g, std::vector<NodeId>& p) {
          return g.sum(g.mul(g.add(p[0], p[1]), p[0]));
        },
        {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})});

    gradcheck(
        [](Graph& g, std::vector<NodeId>& p) {
          return g.sum(g.add_bias(p[0], p[1]));
        },
        {random_tensor(rng, {m, n}), random_tensor(rng, {n})});

    gradcheck(
        [](Graph& g, std::vector<NodeId>& p) {
          return g.sum(g.mul(g.softmax_rows(p[0]), p[1]));
        },
        {random_tensor(rng, {m, k}), random_tensor(rng, {m, k})});

    gradcheck(
        [](Graph& g, std::vector<NodeId>& p) {
          return g.sum(g.gelu(p[0]));
        },
        {random_tensor(rng, {m, k})});

    // 4+ columns: 2-wide rows can have near-zero variance, where the
    // finite-difference oracle itself loses precision.
    int kc = k + 2;
    gradcheck(
        [](Graph& g, std::vector<NodeId>& p) {
          return g.sum(g.mul(g.layer_norm(p[0], p[1], p[2]), p[3]));
        },
        {random_tensor(rng, {m, kc}), random_tensor(rng, {kc}),
         random_tensor(rng, {kc}), random_tensor(rng, {m, kc})},
        1e-4);

    gradcheck(
        [](Graph& g, std::vector<NodeId>& p) {
          std::vector<int> ids = {1, 0, 1};
          return g.sum(g.embedding_lookup(p[0], ids));
        },
        {random_tensor(rng, {3, k})});

    gradcheck(
        [m](Graph& g, std::vector<NodeId>& p) {
          return g.sum(g.slice_rows(g.concat_rows(p[0], p[1]), 1, m));
        },
        {random_tensor(rng, {m, k}), random_tensor(rng, {m, k})});

    gradcheck(
        [](Graph& g, std::vector<NodeId>& p) {
          int numel = static_cast<int>(g.value(p[0]).numel());
          return g.sum(g.scale(g.reshape(p[0], {numel}), 1.5));
        },
        {random_tensor(rng, {m, k})});

    // attention: 2 heads over even dims
    int d = 2 * (1 + static_cast<int>(rng() % 3));
    int S = 2 + static_cast<int>(rng() % 4);
    gradcheck(
        [](Graph& g, std::vector<NodeId>& p) {
          return g.sum(g.mul(g.causal_self_attention(p[0], p[1], p[2], 2),
                             p[3]));
        },
        {random_tensor(rng, {S, d}), random_tensor(rng, {S, d}),
         random_tensor(rng, {S, d}), random_tensor(rng, {S, d})},
        2e-4);

    // cross entropy through a matmul
    int V = 5 + static_cast<int>(rng() % 4);
    int T = 3;
    std::vector<int> targets(T);
    for (int t = 0; t < T; ++t)
      targets[t] = static_cast<int>(rng() % V);
    std::vector<uint8_t> mask = {1, 0, 1};
    gradcheck(
        [targets, mask](Graph& g, std::vector<NodeId>& p) {
          return g.cross_entropy_masked(g.matmul(p[0], p[1]), targets, mask,
                                        Reduction::TokenMean);
        },
        {random_tensor(rng, {T, k}), random_tensor(rng, {k, V})});
  }
}

TEST_CASE("backward is bitwise deterministic") {
  std::mt19937_64 rng(77);
  Tensor a = random_tensor(rng, {4, 6});
  Tensor b = random_tensor(rng, {6, 3});
  a.requires_grad = true;
  b.requires_grad = true;
  auto run = [&]() {
    Graph g;
    NodeId ai = g.leaf(a), bi = g.leaf(b);
    GradMap grads = g.backward(g.sum(g.gelu(g.matmul(ai, bi))));
    return std::make_pair(grads.at(ai).data, grads.at(bi).data);
  };
  auto [ga1, gb1] = run();
  auto [ga2, gb2] = run();
  CHECK(ga1 == ga2);
  CHECK(gb1 == gb2);
}

TEST_CASE("attention causality and row sums") {
  std::mt19937_64 rng(5);
  int S = 6, d = 8;
  Tensor q = random_tensor(rng, {S, d});
  Tensor k = random_tensor(rng, {S, d});
  Tensor v = random_tensor(rng, {S, d});
  Graph g;
  NodeId attn = g.causal_self_attention(g.leaf(q), g.leaf(k), g.leaf(v), 4);
  Tensor w = g.attention_weights(attn);
  REQUIRE(w.shape == std::vector<int>{4, S, S});
  for (int h = 0; h < 4; ++h) {
    for (int i = 0; i < S; ++i) {
      double sum = 0.0;
      for (int j = 0; j < S; ++j) {
        double x = w.data[(static_cast<size_t>(h) * S + i) * S + j];
        if (j > i) CHECK(x == 0.0);
        sum += x;
      }
      CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
  }
}
