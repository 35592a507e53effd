#include "sra/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

namespace sra {
namespace {

TEST(Tensor, ConstructionAndAccess) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2);
  EXPECT_EQ(t.dim(0), 2);
  EXPECT_EQ(t.dim(-1), 3);
  EXPECT_EQ(t.size(), 6);
  EXPECT_DOUBLE_EQ(t[4], 5.0);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(Tensor({0, 2}, {}), std::invalid_argument);
  EXPECT_THROW(t.value(), std::invalid_argument);
  EXPECT_DOUBLE_EQ(Tensor::scalar(7.5).value(), 7.5);
}

TEST(Tensor, AddMulBroadcast) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {10, 20, 30, 40});
  Tensor c = add(a, b);
  EXPECT_EQ(c.data(), (std::vector<double>{11, 22, 33, 44}));

  // scalar and trailing-suffix broadcast
  Tensor s = Tensor::scalar(2.0);
  EXPECT_EQ(mul(a, s).data(), (std::vector<double>{2, 4, 6, 8}));
  Tensor row({2}, {100, 200});
  EXPECT_EQ(add(a, row).data(), (std::vector<double>{101, 202, 103, 204}));
  EXPECT_EQ(add(row, a).data(), (std::vector<double>{101, 202, 103, 204}));

  Tensor bad({3}, {1, 2, 3});
  EXPECT_THROW(add(a, bad), std::invalid_argument);
}

TEST(Tensor, MatmulExample) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(c.data(), (std::vector<double>{58, 64, 139, 154}));

  // batched: two independent 2x2 products
  Tensor ba({2, 2, 2}, {1, 0, 0, 1, 2, 0, 0, 2});
  Tensor bb({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor bc = matmul(ba, bb);
  EXPECT_EQ(bc.data(), (std::vector<double>{1, 2, 3, 4, 10, 12, 14, 16}));

  EXPECT_THROW(matmul(a, a), std::invalid_argument);
  Tensor v({3}, {1, 2, 3});
  EXPECT_THROW(matmul(a, v), std::invalid_argument);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  Rng rng(11);
  Tensor x = Tensor::randn({4, 7}, rng, 3.0);
  Tensor y = softmax_lastdim(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) {
      const double p = y[r * 7 + j];
      EXPECT_GE(p, 0.0);
      s += p;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  // shift invariance of softmax
  Tensor y2 = softmax_lastdim(add_const(x, 123.0));
  for (int64_t i = 0; i < y.size(); ++i) {
    EXPECT_NEAR(y[i], y2[i], 1e-12);
  }
}

TEST(Tensor, SoftmaxUnderflowsLargeNegativeToZero) {
  // An additive -1e9 pushed through softmax must give exactly 0 probability,
  // not NaN: this is what attention masking relies on.
  Tensor x({1, 3}, {0.5, 0.2, 0.1});
  Tensor mask({1, 3}, {0, 0, 1});
  Tensor y = softmax_lastdim(masked_fill(x, mask, -1e9));
  EXPECT_EQ(y[2], 0.0);
  EXPECT_NEAR(y[0] + y[1], 1.0, 1e-12);
}

TEST(Tensor, LayernormRowStats) {
  Rng rng(5);
  Tensor x = Tensor::randn({3, 16}, rng, 2.0);
  Tensor y = layernorm_lastdim(x);
  for (int r = 0; r < 3; ++r) {
    double m = 0.0, v = 0.0;
    for (int j = 0; j < 16; ++j) {
      m += y[r * 16 + j];
    }
    m /= 16;
    for (int j = 0; j < 16; ++j) {
      const double c = y[r * 16 + j] - m;
      v += c * c;
    }
    v /= 16;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);  // eps shifts variance slightly below 1
  }
}

TEST(Tensor, LayoutOps) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(transpose(a).shape(), (Shape{3, 2}));
  EXPECT_EQ(transpose(a).data(), (std::vector<double>{1, 4, 2, 5, 3, 6}));

  Tensor p = permute(Tensor({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7}), {2, 0, 1});
  EXPECT_EQ(p.shape(), (Shape{2, 2, 2}));
  EXPECT_EQ(p.data(), (std::vector<double>{0, 2, 4, 6, 1, 3, 5, 7}));

  EXPECT_EQ(reshape(a, {3, 2}).data(), a.data());
  EXPECT_THROW(reshape(a, {4, 2}), std::invalid_argument);

  Tensor b({1, 3}, {7, 8, 9});
  Tensor cat = concat({a, b}, 0);
  EXPECT_EQ(cat.shape(), (Shape{3, 3}));
  EXPECT_EQ(cat.data(), (std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9}));
  Tensor cat1 = concat({a, a}, 1);
  EXPECT_EQ(cat1.shape(), (Shape{2, 6}));
  EXPECT_EQ(cat1.data(), (std::vector<double>{1, 2, 3, 1, 2, 3, 4, 5, 6, 4, 5, 6}));
  EXPECT_THROW(concat({a, b}, 1), std::invalid_argument);

  Tensor sl = slice(a, {0, 1}, {2, 3});
  EXPECT_EQ(sl.shape(), (Shape{2, 2}));
  EXPECT_EQ(sl.data(), (std::vector<double>{2, 3, 5, 6}));
  EXPECT_THROW(slice(a, {0, 2}, {2, 2}), std::invalid_argument);
}

TEST(Tensor, Reductions) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_DOUBLE_EQ(sum(a).value(), 21.0);
  EXPECT_DOUBLE_EQ(mean(a).value(), 3.5);
  Tensor s0 = sum_axis(a, 0);
  EXPECT_EQ(s0.shape(), (Shape{3}));
  EXPECT_EQ(s0.data(), (std::vector<double>{5, 7, 9}));
  Tensor s1 = sum_axis(a, 1);
  EXPECT_EQ(s1.shape(), (Shape{2}));
  EXPECT_EQ(s1.data(), (std::vector<double>{6, 15}));
}

TEST(Tensor, PointwiseDomains) {
  Tensor pos({3}, {1.0, 4.0, 9.0});
  EXPECT_EQ(sqrt(pos).data(), (std::vector<double>{1, 2, 3}));
  EXPECT_THROW(sqrt(Tensor({1}, {-1.0})), std::invalid_argument);
  EXPECT_THROW(log(Tensor({1}, {0.0})), std::invalid_argument);
  EXPECT_THROW(power(Tensor({1}, {-2.0}), 0.5), std::invalid_argument);
  EXPECT_THROW(power(Tensor({1}, {0.0}), -1.0), std::invalid_argument);
  EXPECT_THROW(sra::exp(Tensor({1}, {1000.0})), std::runtime_error);

  // 0^0 = 1: the p=0 path of power must give exact uniform values.
  EXPECT_DOUBLE_EQ(power(Tensor({1}, {0.0}), 0.0)[0], 1.0);
  EXPECT_DOUBLE_EQ(power(Tensor({1}, {537.2}), 0.0)[0], 1.0);

  // negative bases are fine for integer exponents
  EXPECT_DOUBLE_EQ(power(Tensor({1}, {-3.0}), 2.0)[0], 9.0);
  EXPECT_DOUBLE_EQ(power(Tensor({1}, {-2.0}), -2.0)[0], 0.25);
}

TEST(Tensor, EmbeddingLookup) {
  Tensor table({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  Tensor out = embedding_lookup(table, {3, 0, 3});
  EXPECT_EQ(out.shape(), (Shape{3, 2}));
  EXPECT_EQ(out.data(), (std::vector<double>{30, 31, 0, 1, 30, 31}));
  EXPECT_THROW(embedding_lookup(table, {4}), std::invalid_argument);
  EXPECT_THROW(embedding_lookup(table, {-1}), std::invalid_argument);
}

TEST(Tensor, MaskedFillContract) {
  Tensor x({2}, {1.0, 2.0});
  Tensor mask({2}, {0.0, 1.0});
  Tensor y = masked_fill(x, mask, -5.0);
  EXPECT_EQ(y.data(), (std::vector<double>{1.0, -3.0}));

  Tape tape;
  Tensor tm = tape.leaf(mask, "m");
  EXPECT_THROW(masked_fill(x, tm, -5.0), std::invalid_argument);
  EXPECT_THROW(masked_fill(x, Tensor({1}, {1.0}), -5.0), std::invalid_argument);
}

// --- tape mechanics ---

TEST(Tape, BackwardOnSimpleGraph) {
  // f(a, b) = sum(a * b + a) -> df/da = b + 1, df/db = a
  Tape tape;
  Tensor a = tape.leaf(Tensor({2}, {2.0, 3.0}), "a");
  Tensor b = tape.leaf(Tensor({2}, {5.0, 7.0}), "b");
  Tensor loss = sum(add(mul(a, b), a));
  GradientMap g = tape.backward(loss);
  EXPECT_EQ(g.at("a").data(), (std::vector<double>{6.0, 8.0}));
  EXPECT_EQ(g.at("b").data(), (std::vector<double>{2.0, 3.0}));
}

TEST(Tape, ReusedLeafAccumulates) {
  // same buffer re-registered under the same name returns the same node
  Tensor orig({1}, {4.0});
  Tape t2;
  Tensor x1 = t2.leaf(orig, "x");
  Tensor x2 = t2.leaf(orig, "x");
  EXPECT_EQ(x1.node(), x2.node());
  Tensor loss = sum(add(mul(x1, x1), x2));  // x^2 + x -> 2x + 1 = 9
  GradientMap g = t2.backward(loss);
  EXPECT_DOUBLE_EQ(g.at("x")[0], 9.0);
}

TEST(Tape, LeafNameBoundToOneBuffer) {
  Tape tape;
  tape.leaf(Tensor({1}, {1.0}), "w");
  EXPECT_THROW(tape.leaf(Tensor({1}, {1.0}), "w"), std::invalid_argument);
}

TEST(Tape, UntouchedLeavesGetZeroGradients) {
  Tape tape;
  Tensor a = tape.leaf(Tensor({2}, {1.0, 2.0}), "a");
  tape.leaf(Tensor({3}, {1.0, 2.0, 3.0}), "unused");
  GradientMap g = tape.backward(sum(a));
  EXPECT_EQ(g.at("a").data(), (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(g.at("unused").data(), (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(Tape, ConstantLossGivesZeroGradients) {
  Tape tape;
  tape.leaf(Tensor({2}, {1.0, 2.0}), "a");
  GradientMap g = tape.backward(Tensor::scalar(5.0));
  EXPECT_EQ(g.at("a").data(), (std::vector<double>{0.0, 0.0}));
}

TEST(Tape, RejectsNonScalarLoss) {
  Tape tape;
  Tensor a = tape.leaf(Tensor({2}, {1.0, 2.0}), "a");
  EXPECT_THROW(tape.backward(a), std::invalid_argument);
}

TEST(Tape, RejectsMixedTapes) {
  Tape t1, t2;
  Tensor a = t1.leaf(Tensor({2}, {1.0, 2.0}), "a");
  Tensor b = t2.leaf(Tensor({2}, {3.0, 4.0}), "b");
  EXPECT_THROW(add(a, b), std::invalid_argument);
  EXPECT_THROW(t1.backward(sum(b)), std::invalid_argument);
}

TEST(Tape, DetachedStopsGradient) {
  Tape tape;
  Tensor a = tape.leaf(Tensor({1}, {3.0}), "a");
  Tensor y = mul(a.detached(), a);  // d/da = 3 (first factor constant)
  GradientMap g = tape.backward(sum(y));
  EXPECT_DOUBLE_EQ(g.at("a")[0], 3.0);
}

// --- finite-difference sweep over every op ---

// Builds a scalar from each op with all inputs registered as parameters and
// compares reverse-mode gradients against central differences. Each output
// element is weighted by a fixed random coefficient (plus a quadratic term)
// so that index mix-ups cannot cancel and the loss is never flat.
double op_check(const std::string& op, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  Tensor probe = apply(op, inputs, attrs);
  Rng wrng(314159);
  Tensor w1 = Tensor::randn(probe.shape(), wrng);
  Tensor w2 = Tensor::randn(probe.shape(), wrng, 0.5);
  ParamList params;
  for (size_t i = 0; i < inputs.size(); ++i) {
    params.push_back({"p" + std::to_string(i), inputs[i]});
  }
  LossFn fn = [op, attrs, w1, w2, n = inputs.size()](ParamList& ps, Tape* tape) {
    std::vector<Tensor> xs;
    for (size_t i = 0; i < n; ++i) {
      xs.push_back(use_param(ps, "p" + std::to_string(i), tape));
    }
    Tensor out = apply(op, xs, attrs);
    return add(sum(mul(out, w1)), sum(mul(mul(out, out), w2)));
  };
  return check_gradients(fn, params, 1e-5);
}

TEST(GradCheck, EveryOp) {
  Rng rng(99);
  const double tol = 1e-6;
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({3, 4}, rng);
  Tensor suffix = Tensor::randn({4}, rng);
  Tensor sc = Tensor::randn({}, rng);

  EXPECT_LT(op_check("add", {a, b}, {}), tol);
  EXPECT_LT(op_check("add", {a, suffix}, {}), tol);
  EXPECT_LT(op_check("add", {sc, a}, {}), tol);
  EXPECT_LT(op_check("mul", {a, b}, {}), tol);
  EXPECT_LT(op_check("mul", {a, suffix}, {}), tol);

  Tensor m1 = Tensor::randn({3, 4}, rng);
  Tensor m2 = Tensor::randn({4, 2}, rng);
  EXPECT_LT(op_check("matmul", {m1, m2}, {}), tol);
  Tensor bm1 = Tensor::randn({2, 3, 4}, rng);
  Tensor bm2 = Tensor::randn({2, 4, 2}, rng);
  EXPECT_LT(op_check("matmul", {bm1, bm2}, {}), tol);

  EXPECT_LT(op_check("softmax_lastdim", {a}, {}), tol);
  EXPECT_LT(op_check("layernorm_lastdim", {a}, {}), tol);
  EXPECT_LT(op_check("transpose", {a}, {}), tol);
  OpAttrs perm_attrs;
  perm_attrs.axes = {2, 0, 1};
  EXPECT_LT(op_check("transpose", {bm1}, perm_attrs), tol);

  OpAttrs cat_attrs;
  cat_attrs.axis = 1;
  EXPECT_LT(op_check("concat", {a, b}, cat_attrs), tol);

  OpAttrs slice_attrs;
  slice_attrs.start = {1, 0};
  slice_attrs.stop = {3, 2};
  EXPECT_LT(op_check("slice", {a}, slice_attrs), tol);

  EXPECT_LT(op_check("sum", {a}, {}), tol);
  EXPECT_LT(op_check("mean", {a}, {}), tol);
  OpAttrs ax_attrs;
  ax_attrs.axis = 0;
  EXPECT_LT(op_check("sum_axis", {a}, ax_attrs), tol);

  OpAttrs reshape_attrs;
  reshape_attrs.shape = {4, 3};
  EXPECT_LT(op_check("reshape", {a}, reshape_attrs), tol);

  Tensor positive({2, 3}, {0.5, 1.5, 2.0, 0.25, 3.0, 1.0});
  OpAttrs pow_attrs;
  pow_attrs.value = 1.7;
  EXPECT_LT(op_check("power", {positive}, pow_attrs), tol);
  pow_attrs.value = 3.0;
  EXPECT_LT(op_check("power", {a}, pow_attrs), tol);
  pow_attrs.value = -1.0;
  EXPECT_LT(op_check("power", {positive}, pow_attrs), tol);
  EXPECT_LT(op_check("sqrt", {positive}, {}), tol);
  EXPECT_LT(op_check("exp", {a}, {}), tol);
  EXPECT_LT(op_check("log", {positive}, {}), tol);

  Tensor table = Tensor::randn({5, 3}, rng);
  OpAttrs emb_attrs;
  emb_attrs.ids = {4, 1, 1, 0};
  EXPECT_LT(op_check("embedding_lookup", {table}, emb_attrs), tol);

  // masked_fill is checked through a direct loss: mask input stays untracked.
  {
    ParamList params{{"x", a}};
    Tensor mask = Tensor::zeros({3, 4});
    mask.mutable_data()[1] = 1.0;
    mask.mutable_data()[7] = 1.0;
    LossFn fn = [mask](ParamList& ps, Tape* tape) {
      Tensor x = use_param(ps, "x", tape);
      Tensor y = masked_fill(x, mask, -3.0);
      return sum(mul(y, y));
    };
    EXPECT_LT(check_gradients(fn, params, 1e-5), tol);
  }
}

TEST(GradCheck, CompositeHelpers) {
  Rng rng(123);
  const double tol = 1e-6;
  Tensor a = Tensor::randn({2, 3}, rng);
  Tensor b = Tensor::randn({2, 3}, rng);
  {
    ParamList params{{"a", a}, {"b", b}};
    LossFn fn = [](ParamList& ps, Tape* tape) {
      Tensor x = use_param(ps, "a", tape);
      Tensor y = use_param(ps, "b", tape);
      return sum(mul(sub(x, y), sub(x, y)));
    };
    EXPECT_LT(check_gradients(fn, params, 1e-5), tol);
  }
  {
    Tensor denom({2, 3}, {1.0, 2.0, 0.5, 4.0, 1.5, 3.0});
    ParamList params{{"a", a}, {"b", denom}};
    LossFn fn = [](ParamList& ps, Tape* tape) {
      Tensor x = use_param(ps, "a", tape);
      Tensor y = use_param(ps, "b", tape);
      return sum(div(x, y));
    };
    EXPECT_LT(check_gradients(fn, params, 1e-5), tol);
  }
  {
    ParamList params{{"a", a}};
    LossFn fn = [](ParamList& ps, Tape* tape) {
      return sum(silu(use_param(ps, "a", tape)));
    };
    EXPECT_LT(check_gradients(fn, params, 1e-5), tol);
  }
  {
    ParamList params{{"a", a}};
    LossFn fn = [](ParamList& ps, Tape* tape) {
      return sum(sigmoid(use_param(ps, "a", tape)));
    };
    EXPECT_LT(check_gradients(fn, params, 1e-5), tol);
  }
}

TEST(GradCheck, RejectsNondeterministicLoss) {
  ParamList params{{"a", Tensor({1}, {1.0})}};
  int calls = 0;
  LossFn fn = [&calls](ParamList& ps, Tape* tape) {
    Tensor x = use_param(ps, "a", tape);
    return scale(sum(x), 1.0 + 0.001 * calls++);
  };
  EXPECT_THROW(check_gradients(fn, params, 1e-5), std::runtime_error);
}

TEST(Determinism, SameSeedSameStream) {
  Rng r1(42), r2(42);
  for (int i = 0; i < 1000; ++i) {
    ASSERT_EQ(r1.uniform(), r2.uniform());
    ASSERT_EQ(r1.normal(), r2.normal());
    ASSERT_EQ(r1.uniform_int(17), r2.uniform_int(17));
  }
  Rng r3(43);
  bool any_diff = false;
  for (int i = 0; i < 100; ++i) {
    any_diff |= (Rng(42).uniform() != r3.uniform());
  }
  EXPECT_TRUE(any_diff);
}

TEST(Determinism, RandnIsReproducible) {
  Rng r1(7), r2(7);
  Tensor a = Tensor::randn({4, 4}, r1, 0.3);
  Tensor b = Tensor::randn({4, 4}, r2, 0.3);
  EXPECT_EQ(a.data(), b.data());
}

}  // namespace
}  // namespace sra
