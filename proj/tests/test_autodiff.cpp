#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "diffcap/adamw.hpp"
#include "diffcap/autodiff.hpp"
#include "diffcap/gradcheck.hpp"
#include "diffcap/rng.hpp"

using namespace diffcap;
using T64 = Tensor<double>;

namespace {

T64 randn(Shape sh, Rng& r, double sc = 1.0) {
  T64 t(std::move(sh));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data[i] = sc * r.normal();
  return t;
}

// Finite-difference audit for a single op: loss is a fixed random weighting
// of the op output, gradients of every input are compared against central
// differences.
void check_op(std::vector<T64> inputs,
              const std::function<Var(Tape<double>&, const std::vector<Var>&)>& apply,
              double tol = 1e-6) {
  auto run = [&](std::vector<Tensor<double>>* grads, const T64* weights) -> double {
    Tape<double> t;
    std::vector<Var> vars;
    for (const T64& in : inputs) vars.push_back(t.leaf(in));
    Var out = apply(t, vars);
    Var loss = weights ? ops::sum_all(t, ops::mul(t, out, t.leaf(*weights)))
                       : ops::sum_all(t, out);
    if (grads) {
      t.backward(loss);
      for (Var v : vars) grads->push_back(t.grad(v));
    }
    return (double)t.val(loss).data[0];
  };

  // Fixed weights derived from the first forward's output shape.
  Rng wr(77);
  T64 weights;
  {
    Tape<double> t;
    std::vector<Var> vars;
    for (const T64& in : inputs) vars.push_back(t.leaf(in));
    weights = randn(t.val(apply(t, vars)).shape, wr);
  }

  std::vector<Tensor<double>> analytic;
  run(&analytic, &weights);

  std::vector<std::pair<std::string, Tensor<double>*>> params;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    params.push_back({"in" + std::to_string(i), &inputs[i]});
  auto rep = fd_check<double>(params, analytic,
                              [&]() { return run(nullptr, &weights); }, 1e-5, 1e-8);
  CHECK(rep.max_rel_err <= tol);
}

}  // namespace

TEST_CASE("matmul matches hand product") {
  Tape<double> t;
  Var a = t.leaf(T64::from_rows(2, 3, {1, 2, 3, 4, 5, 6}));
  Var b = t.leaf(T64::from_rows(3, 2, {7, 8, 9, 10, 11, 12}));
  Var c = ops::matmul(t, a, b);
  CHECK(t.val(c)(0, 0) == doctest::Approx(58));
  CHECK(t.val(c)(0, 1) == doctest::Approx(64));
  CHECK(t.val(c)(1, 0) == doctest::Approx(139));
  CHECK(t.val(c)(1, 1) == doctest::Approx(154));
}

TEST_CASE("matmul rejects mismatched inner extents naming both shapes") {
  Tape<double> t;
  Var a = t.leaf(T64::zeros({2, 3}));
  Var b = t.leaf(T64::zeros({4, 2}));
  try {
    ops::matmul(t, a, b);
    FAIL("expected UsageError");
  } catch (const UsageError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 2]") != std::string::npos);
  }
}

TEST_CASE("softmax rows: uniform logits give uniform probabilities, rows sum to one") {
  Rng r(1);
  Tape<double> t;
  Var u = t.leaf(T64::full({1, 5}, 3.25));
  Var pu = ops::softmax_rows(t, u);
  for (int c = 0; c < 5; ++c) CHECK(t.val(pu)(0, c) == doctest::Approx(0.2).epsilon(1e-12));

  Var x = t.leaf(randn({4, 7}, r, 3.0));
  Var p = ops::softmax_rows(t, x);
  for (int row = 0; row < 4; ++row) {
    double s = 0;
    for (int c = 0; c < 7; ++c) {
      s += t.val(p)(row, c);
      CHECK(t.val(p)(row, c) >= 0.0);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("log_softmax agrees with log of softmax") {
  Rng r(2);
  Tape<double> t;
  T64 x = randn({3, 9}, r, 5.0);
  Var lp = ops::log_softmax_rows(t, t.leaf(x));
  Var p = ops::softmax_rows(t, t.leaf(x));
  for (int row = 0; row < 3; ++row)
    for (int c = 0; c < 9; ++c)
      CHECK(t.val(lp)(row, c) ==
            doctest::Approx(std::log(t.val(p)(row, c))).epsilon(1e-10));
}

TEST_CASE("layernorm_plain maps a constant row to zeros") {
  Tape<double> t;
  Var x = t.leaf(T64::full({2, 6}, 4.2));
  Var y = ops::layernorm_plain(t, x);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 6; ++c) CHECK(std::fabs(t.val(y)(r, c)) < 1e-9);
}

TEST_CASE("cross-entropy gradient is probabilities minus one-hot") {
  Tape<double> t;
  T64 logits = T64::from_rows(1, 4, {0.2, -1.1, 0.7, 2.0});
  Var lv = t.leaf(logits);
  Var loss = ops::cross_entropy(t, lv, {2}, {}, 0);
  t.backward(loss);

  double den = 0;
  for (int c = 0; c < 4; ++c) den += std::exp(logits(0, c));
  for (int c = 0; c < 4; ++c) {
    double p = std::exp(logits(0, c)) / den;
    double want = p - (c == 2 ? 1.0 : 0.0);
    CHECK(t.grad(lv)(0, c) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("grouped cross-entropy weighs every block equally") {
  // Two blocks of three rows: the first has two active rows, the second one.
  Tape<double> t;
  Rng r(3);
  T64 logits = randn({6, 5}, r);
  Var lv = t.leaf(logits);
  std::vector<int> targets = {1, 4, 0, 3, 0, 2};
  std::vector<std::uint8_t> active = {1, 1, 0, 0, 0, 1};
  Var loss = ops::cross_entropy(t, lv, targets, active, 3);

  auto row_nll = [&](int row) {
    double mx = logits.mat().row(row).maxCoeff();
    double den = 0;
    for (int c = 0; c < 5; ++c) den += std::exp(logits(row, c) - mx);
    return mx + std::log(den) - logits(row, targets[(std::size_t)row]);
  };
  double want = ((row_nll(0) + row_nll(1)) / 2.0 + row_nll(5)) / 2.0;
  CHECK(t.val(loss).data[0] == doctest::Approx(want).epsilon(1e-12));

  // Inactive rows must get no gradient.
  t.backward(loss);
  for (int c = 0; c < 5; ++c) {
    CHECK(t.grad(lv)(2, c) == 0.0);
    CHECK(t.grad(lv)(3, c) == 0.0);
    CHECK(t.grad(lv)(4, c) == 0.0);
  }
}

TEST_CASE("leaf not on the loss path keeps a zero gradient") {
  Tape<double> t;
  Var a = t.leaf(T64::full({2, 2}, 1.0));
  Var unused = t.leaf(T64::full({2, 2}, 9.0));
  Var loss = ops::sum_all(t, a);
  t.backward(loss);
  CHECK(t.has_grad(a));
  CHECK(!t.has_grad(unused));
  CHECK(t.grad(unused).data.abs().maxCoeff() == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape<double> t;
  Var a = t.leaf(T64::zeros({2, 2}));
  CHECK_THROWS_AS(t.backward(a), UsageError);
}

TEST_CASE("detach blocks gradient flow") {
  Tape<double> t;
  Var a = t.leaf(T64::full({3}, 2.0));
  Var d = ops::detach(t, a);
  Var loss = ops::sum_all(t, ops::mul(t, d, d));
  t.backward(loss);
  CHECK(!t.has_grad(a));
  CHECK(t.val(loss).data[0] == doctest::Approx(12.0));
}

TEST_CASE("finite differences: elementwise and broadcast ops") {
  Rng r(10);
  check_op({randn({3, 4}, r), randn({3, 4}, r)},
           [](Tape<double>& t, const std::vector<Var>& v) { return ops::add(t, v[0], v[1]); });
  check_op({randn({3, 4}, r), randn({3, 4}, r)},
           [](Tape<double>& t, const std::vector<Var>& v) { return ops::mul(t, v[0], v[1]); });
  check_op({randn({3, 4}, r), randn({3, 4}, r)}, [](Tape<double>& t, const std::vector<Var>& v) {
    return ops::add_scaled(t, v[0], v[1], 0.37);
  });
  check_op({randn({5, 3}, r), randn({3}, r)}, [](Tape<double>& t, const std::vector<Var>& v) {
    return ops::add_rowvec(t, v[0], v[1]);
  });
  check_op({randn({6, 3}, r), randn({2, 3}, r)}, [](Tape<double>& t, const std::vector<Var>& v) {
    return ops::add_tiled_rows(t, v[0], v[1]);
  });
  check_op({randn({2, 5}, r)},
           [](Tape<double>& t, const std::vector<Var>& v) { return ops::gelu(t, v[0]); });
  check_op({randn({2, 5}, r)},
           [](Tape<double>& t, const std::vector<Var>& v) { return ops::silu(t, v[0]); });
  check_op({randn({4, 6}, r)},
           [](Tape<double>& t, const std::vector<Var>& v) { return ops::scale(t, v[0], -1.7); });
}

TEST_CASE("finite differences: reductions, softmax, norms, gather") {
  Rng r(11);
  check_op({randn({3, 5}, r, 2.0)},
           [](Tape<double>& t, const std::vector<Var>& v) { return ops::softmax_rows(t, v[0]); });
  check_op({randn({3, 5}, r, 2.0)}, [](Tape<double>& t, const std::vector<Var>& v) {
    return ops::log_softmax_rows(t, v[0]);
  });
  check_op({randn({4, 7}, r), randn({7}, r), randn({7}, r)},
           [](Tape<double>& t, const std::vector<Var>& v) {
             return ops::layernorm(t, v[0], v[1], v[2]);
           });
  check_op({randn({4, 7}, r)},
           [](Tape<double>& t, const std::vector<Var>& v) { return ops::layernorm_plain(t, v[0]); });
  check_op({randn({5, 4}, r)}, [](Tape<double>& t, const std::vector<Var>& v) {
    return ops::gather_rows(t, v[0], {0, 2, 2, 4, 1});
  });
  check_op({randn({3, 4}, r)},
           [](Tape<double>& t, const std::vector<Var>& v) { return ops::mean_all(t, v[0]); });
}

TEST_CASE("finite differences: attention, modulation, blending, cross-entropy") {
  Rng r(12);
  // Self-attention: batch 2, heads 2, lq = lk = 3, d = 4, with a mask that
  // blocks a few pairs.
  Tensor<double> mask = Tensor<double>::zeros({2, 3, 3});
  mask.data[1] = -1e9;
  mask.data[5] = -1e9;
  mask.data[9 + 2] = -1e9;
  check_op({randn({6, 4}, r), randn({6, 4}, r), randn({6, 4}, r)},
           [mask](Tape<double>& t, const std::vector<Var>& v) {
             return ops::attention(t, v[0], v[1], v[2], &mask, 2, 2);
           });
  // Cross attention shape: lq = 3, lk = 5, no mask.
  check_op({randn({6, 4}, r), randn({10, 4}, r), randn({10, 4}, r)},
           [](Tape<double>& t, const std::vector<Var>& v) {
             return ops::attention(t, v[0], v[1], v[2],
                                   static_cast<const Tensor<double>*>(nullptr), 2, 2);
           });
  check_op({randn({6, 4}, r), randn({2, 8}, r, 0.5)},
           [](Tape<double>& t, const std::vector<Var>& v) {
             return ops::adaln_modulate(t, v[0], v[1], 3);
           });
  check_op({randn({6, 4}, r), randn({2, 4}, r)},
           [](Tape<double>& t, const std::vector<Var>& v) {
             return ops::blend_rows(t, v[0], v[1], {1, 0, 1}, 2);
           });
  check_op(
      {randn({6, 5}, r, 2.0)},
      [](Tape<double>& t, const std::vector<Var>& v) {
        return ops::cross_entropy(t, v[0], {1, 4, 0, 3, 0, 2}, {1, 1, 0, 1, 0, 1}, 3);
      });
}

TEST_CASE("attention matches a naive per-head reference") {
  Rng r(13);
  int batch = 2, heads = 2, lq = 3, lk = 4, dh = 3, d = heads * dh;
  T64 q = randn({batch * lq, d}, r);
  T64 k = randn({batch * lk, d}, r);
  T64 v = randn({batch * lk, d}, r);
  Tensor<double> mask = Tensor<double>::zeros({batch, lq, lk});
  mask.data[2] = -1e9;
  mask.data[lq * lk + 5] = -1e9;

  Tape<double> t;
  Var out = ops::attention(t, t.leaf(q), t.leaf(k), t.leaf(v), &mask, batch, heads);

  for (int b = 0; b < batch; ++b)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < lq; ++i) {
        std::vector<double> sc((std::size_t)lk);
        double mx = -1e300;
        for (int j = 0; j < lk; ++j) {
          double s = 0;
          for (int e = 0; e < dh; ++e)
            s += q(b * lq + i, h * dh + e) * k(b * lk + j, h * dh + e);
          s = s / std::sqrt((double)dh) + mask.data[(b * lq + i) * lk + j];
          sc[(std::size_t)j] = s;
          mx = std::max(mx, s);
        }
        double den = 0;
        for (double s : sc) den += std::exp(s - mx);
        for (int e = 0; e < dh; ++e) {
          double want = 0;
          for (int j = 0; j < lk; ++j)
            want += std::exp(sc[(std::size_t)j] - mx) / den * v(b * lk + j, h * dh + e);
          CHECK(t.val(out)(b * lq + i, h * dh + e) == doctest::Approx(want).epsilon(1e-10));
        }
      }
}

TEST_CASE("finite differences: three-layer MLP with cross-entropy") {
  Rng r(14);
  T64 x = randn({4, 6}, r);
  T64 w1 = randn({6, 8}, r, 0.5), b1 = randn({8}, r, 0.1);
  T64 w2 = randn({8, 8}, r, 0.5), b2 = randn({8}, r, 0.1);
  T64 w3 = randn({8, 5}, r, 0.5), b3 = randn({5}, r, 0.1);
  std::vector<int> targets = {0, 2, 4, 1};

  auto run = [&](std::vector<Tensor<double>>* grads) -> double {
    Tape<double> t;
    Var vx = t.leaf(x);
    std::vector<Var> ps = {t.leaf(w1), t.leaf(b1), t.leaf(w2),
                           t.leaf(b2), t.leaf(w3), t.leaf(b3)};
    Var h = ops::gelu(t, ops::add_rowvec(t, ops::matmul(t, vx, ps[0]), ps[1]));
    h = ops::gelu(t, ops::add_rowvec(t, ops::matmul(t, h, ps[2]), ps[3]));
    h = ops::add_rowvec(t, ops::matmul(t, h, ps[4]), ps[5]);
    Var loss = ops::cross_entropy(t, h, targets, {}, 0);
    if (grads) {
      t.backward(loss);
      for (Var p : ps) grads->push_back(t.grad(p));
    }
    return (double)t.val(loss).data[0];
  };

  std::vector<Tensor<double>> analytic;
  run(&analytic);
  std::vector<std::pair<std::string, Tensor<double>*>> params = {
      {"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}, {"w3", &w3}, {"b3", &b3}};
  auto rep = fd_check<double>(params, analytic, [&]() { return run(nullptr); }, 1e-5, 1e-6);
  CHECK(rep.max_rel_err <= 1e-5);
}

TEST_CASE("adamw first step moves each weight by lr*g/(|g|+eps)") {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(cfg);
  Tensor<double> p = T64::from_rows(1, 3, {1.0, -2.0, 0.5});
  Tensor<double> g = T64::from_rows(1, 3, {0.3, -0.7, 0.0});
  T64 before = p;
  opt.step({{"p", &p}}, {&g}, 1e-3);
  for (int c = 0; c < 3; ++c) {
    double want = before(0, c) - 1e-3 * g(0, c) / (std::fabs(g(0, c)) + cfg.eps);
    CHECK(p(0, c) == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("adamw decay is decoupled: zero gradient still shrinks weights") {
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW<double> opt(cfg);
  Tensor<double> p = T64::from_rows(1, 2, {2.0, -4.0});
  Tensor<double> g = T64::zeros({1, 2});
  opt.step({{"p", &p}}, {&g}, 0.5);
  CHECK(p(0, 0) == doctest::Approx(2.0 * (1.0 - 0.5 * 0.1)).epsilon(1e-12));
  CHECK(p(0, 1) == doctest::Approx(-4.0 * (1.0 - 0.5 * 0.1)).epsilon(1e-12));
}

TEST_CASE("adamw with lr=0 leaves parameters bit-identical") {
  AdamW<float> opt;
  Rng r(15);
  Tensor<float> p(Shape{4, 4});
  for (std::int64_t i = 0; i < p.numel(); ++i) p.data[i] = (float)r.normal();
  Tensor<float> g(Shape{4, 4});
  for (std::int64_t i = 0; i < g.numel(); ++i) g.data[i] = (float)r.normal();
  Tensor<float> before = p;
  opt.step({{"p", &p}}, {&g}, 0.0);
  for (std::int64_t i = 0; i < p.numel(); ++i) CHECK(p.data[i] == before.data[i]);
}

TEST_CASE("adamw aborts on non-finite gradients, naming the parameter") {
  AdamW<double> opt;
  Tensor<double> p = T64::zeros({2});
  Tensor<double> g = T64::zeros({2});
  g.data[1] = std::nan("");
  try {
    opt.step({{"bad_param", &p}}, {&g}, 1e-3);
    FAIL("expected abort");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("bad_param") != std::string::npos);
  }
}

TEST_CASE("global norm clip rescales only past the threshold") {
  Tensor<double> a = T64::from_rows(1, 2, {3.0, 0.0});
  Tensor<double> b = T64::from_rows(1, 2, {0.0, 4.0});
  double n = clip_global_norm<double>({&a, &b}, 10.0);
  CHECK(n == doctest::Approx(5.0));
  CHECK(a(0, 0) == 3.0);
  CHECK(b(0, 1) == 4.0);

  n = clip_global_norm<double>({&a, &b}, 1.0);
  CHECK(n == doctest::Approx(5.0));
  CHECK(a(0, 0) == doctest::Approx(0.6));
  CHECK(b(0, 1) == doctest::Approx(0.8));
  double sq = a.data.square().sum() + b.data.square().sum();
  CHECK(std::sqrt(sq) == doctest::Approx(1.0));
}
