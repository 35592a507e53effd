#include "sra/span_pool.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "sra/transformer.hpp"

namespace sra {
namespace {

TEST(TokenWeights, HandExample) {
  // two heads, S = 3; last-position rows are [0.2 0.3 0.5] and [0.1 0.1 0.8]
  Tensor attn({2, 3, 3}, {
                             // head 0
                             1.0, 0.0, 0.0,  //
                             0.5, 0.5, 0.0,  //
                             0.2, 0.3, 0.5,  //
                             // head 1
                             1.0, 0.0, 0.0,  //
                             0.9, 0.1, 0.0,  //
                             0.1, 0.1, 0.8,  //
                         });
  Tensor w = token_weights(attn);
  ASSERT_EQ(w.shape(), (Shape{3}));
  // raw sums [0.3, 0.4, 1.3] normalize by 2.0
  EXPECT_NEAR(w[0], 0.15, 1e-15);
  EXPECT_NEAR(w[1], 0.20, 1e-15);
  EXPECT_NEAR(w[2], 0.65, 1e-15);

  EXPECT_THROW(token_weights(Tensor::zeros({2, 3})), std::invalid_argument);
  EXPECT_THROW(token_weights(Tensor::zeros({2, 3, 4})), std::invalid_argument);
}

TEST(TokenWeights, NormalizedOnRealAttention) {
  ModelConfig c;
  c.vocab_size = 9;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_seq = 10;
  Model m(c, 11);
  ModelActivations acts = m.forward({1, 4, 7, 3, 5, 2});
  Tensor w = token_weights(acts.attn.back());
  double total = 0.0;
  for (int i = 0; i < 6; ++i) {
    EXPECT_GE(w[i], 0.0);
    total += w[i];
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(SpanCom, HandExample) {
  Tensor hidden({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor weights({3}, {0.5, 0.25, 0.25});
  Tensor raw = span_com(hidden, weights, {0, 1}, ComMode::Raw);
  ASSERT_EQ(raw.shape(), (Shape{2}));
  EXPECT_NEAR(raw[0], 1.25, 1e-15);  // 0.5*1 + 0.25*3
  EXPECT_NEAR(raw[1], 2.00, 1e-15);  // 0.5*2 + 0.25*4

  Tensor com = span_com(hidden, weights, {0, 1}, ComMode::Com);
  EXPECT_NEAR(com[0], 1.25 / 0.75, 1e-15);
  EXPECT_NEAR(com[1], 2.00 / 0.75, 1e-15);

  EXPECT_THROW(span_com(hidden, weights, {1, 3}, ComMode::Raw), std::invalid_argument);
  EXPECT_THROW(span_com(hidden, weights, {2, 1}, ComMode::Raw), std::invalid_argument);
  EXPECT_THROW(span_com(hidden, Tensor::zeros({4}), {0, 1}, ComMode::Raw),
               std::invalid_argument);
}

TEST(SpanCom, ZeroMassFallsBackToPlainMean) {
  Tensor hidden({3, 2}, {1, 2, 3, 4, 10, 10});
  Tensor weights({3}, {0.0, 0.0, 1.0});
  int fallbacks = 0;
  Tensor com = span_com(hidden, weights, {0, 1}, ComMode::Com, &fallbacks);
  EXPECT_EQ(fallbacks, 1);
  EXPECT_NEAR(com[0], 2.0, 1e-15);  // (1+3)/2
  EXPECT_NEAR(com[1], 3.0, 1e-15);  // (2+4)/2
  // raw mode needs no fallback: it is simply zero
  Tensor raw = span_com(hidden, weights, {0, 1}, ComMode::Raw, &fallbacks);
  EXPECT_EQ(fallbacks, 1);
  EXPECT_EQ(raw[0], 0.0);
  EXPECT_EQ(raw[1], 0.0);
}

TEST(SpanCom, MergingSubSpansPreservesCenterOfMass) {
  // For any split of a span, mass-weighted merging of the two halves'
  // centers must reproduce the whole span's center.
  Rng rng(501);
  for (int trial = 0; trial < 200; ++trial) {
    const int s = 4 + static_cast<int>(rng.uniform_int(8));
    const int d = 2 + static_cast<int>(rng.uniform_int(5));
    Tensor hidden = Tensor::randn({s, d}, rng, 2.0);
    std::vector<double> wdata(s);
    for (double& v : wdata) {
      v = 0.05 + rng.uniform();
    }
    Tensor weights({s}, wdata);

    const int a = static_cast<int>(rng.uniform_int(s - 1));
    const int b = a + 1 + static_cast<int>(rng.uniform_int(s - a - 1));
    const int m = a + static_cast<int>(rng.uniform_int(b - a));  // split after m

    Tensor whole = span_com(hidden, weights, {a, b}, ComMode::Com);
    Tensor left = span_com(hidden, weights, {a, m}, ComMode::Com);
    Tensor right = span_com(hidden, weights, {m + 1, b}, ComMode::Com);
    double mass_l = 0.0, mass_r = 0.0;
    for (int t = a; t <= m; ++t) {
      mass_l += wdata[t];
    }
    for (int t = m + 1; t <= b; ++t) {
      mass_r += wdata[t];
    }
    for (int j = 0; j < d; ++j) {
      const double merged = (mass_l * left[j] + mass_r * right[j]) / (mass_l + mass_r);
      ASSERT_NEAR(merged, whole[j], 1e-10) << "trial " << trial;
    }

    // raw pooling is additive over the split
    Tensor raw_whole = span_com(hidden, weights, {a, b}, ComMode::Raw);
    Tensor raw_l = span_com(hidden, weights, {a, m}, ComMode::Raw);
    Tensor raw_r = span_com(hidden, weights, {m + 1, b}, ComMode::Raw);
    for (int j = 0; j < d; ++j) {
      ASSERT_NEAR(raw_l[j] + raw_r[j], raw_whole[j], 1e-12);
    }
  }
}

TEST(SpanComMatrix, StacksAndFollowsSide) {
  Tensor hidden({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor weights({4}, {0.25, 0.25, 0.25, 0.25});
  const std::vector<SpanPair> spans = {
      {{0, 1}, {0, 0}, 0, 2},
      {{2, 3}, {1, 3}, 2, 4},
  };
  Tensor t_side = span_com_matrix(hidden, weights, spans, SpanSide::Teacher, ComMode::Com);
  Tensor s_side = span_com_matrix(hidden, weights, spans, SpanSide::Student, ComMode::Com);
  ASSERT_EQ(t_side.shape(), (Shape{2, 2}));
  // teacher spans: mean of rows 0..1, mean of rows 2..3 (uniform weights)
  EXPECT_NEAR(t_side[0], 2.0, 1e-15);
  EXPECT_NEAR(t_side[1], 3.0, 1e-15);
  EXPECT_NEAR(t_side[2], 6.0, 1e-15);
  EXPECT_NEAR(t_side[3], 7.0, 1e-15);
  // student spans: row 0 alone, mean of rows 1..3
  EXPECT_NEAR(s_side[0], 1.0, 1e-15);
  EXPECT_NEAR(s_side[1], 2.0, 1e-15);
  EXPECT_NEAR(s_side[2], 5.0, 1e-15);
  EXPECT_NEAR(s_side[3], 6.0, 1e-15);

  EXPECT_THROW(span_com_matrix(hidden, weights, {}, SpanSide::Teacher, ComMode::Com),
               std::invalid_argument);
}

TEST(SpanWeights, HandExamplesAcrossP) {
  const std::vector<double> tw = {0.1, 0.1, 0.4, 0.2, 0.2};
  const std::vector<SpanPair> spans = {
      {{0, 1}, {0, 0}, 0, 2},
      {{2, 2}, {1, 1}, 2, 3},
      {{3, 4}, {2, 2}, 3, 5},
  };
  // masses are [0.2, 0.4, 0.4]
  std::vector<double> p1 = span_weights(tw, spans, 1.0);
  EXPECT_NEAR(p1[0], 0.2, 1e-15);
  EXPECT_NEAR(p1[1], 0.4, 1e-15);
  EXPECT_NEAR(p1[2], 0.4, 1e-15);

  std::vector<double> p0 = span_weights(tw, spans, 0.0);
  for (double v : p0) {
    EXPECT_EQ(v, 1.0 / 3.0);  // exactly uniform, not merely close
  }

  std::vector<double> p2 = span_weights(tw, spans, 2.0);
  EXPECT_NEAR(p2[0], 1.0 / 9.0, 1e-15);
  EXPECT_NEAR(p2[1], 4.0 / 9.0, 1e-15);
  EXPECT_NEAR(p2[2], 4.0 / 9.0, 1e-15);

  EXPECT_THROW(span_weights(tw, spans, -1.0), std::invalid_argument);
  EXPECT_THROW(span_weights(tw, {}, 1.0), std::invalid_argument);
}

TEST(SpanWeights, AlwaysSumToOne) {
  Rng rng(88);
  for (int trial = 0; trial < 100; ++trial) {
    const int s = 3 + static_cast<int>(rng.uniform_int(10));
    std::vector<double> tw(s);
    for (double& v : tw) {
      v = rng.uniform();
    }
    // carve [0, s) into consecutive teacher spans
    std::vector<SpanPair> spans;
    int start = 0;
    while (start < s) {
      const int end = std::min(s - 1, start + static_cast<int>(rng.uniform_int(3)));
      spans.push_back({{start, end}, {start, end}, 0, 0});
      start = end + 1;
    }
    for (double p : {0.0, 0.5, 1.0, 2.0}) {
      std::vector<double> w = span_weights(tw, spans, p);
      double total = 0.0;
      for (double v : w) {
        EXPECT_GE(v, 0.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(SpanPool, GradientsFlowThroughWeightsAndPooling) {
  ModelConfig c;
  c.vocab_size = 7;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_seq = 8;
  Model m(c, 21);
  const std::vector<int> ids = {1, 4, 6, 3, 2};
  const std::vector<SpanPair> spans = {
      {{1, 2}, {1, 2}, 0, 3},
      {{3, 3}, {3, 3}, 3, 4},
  };
  Rng wrng(777);
  Tensor wfix = Tensor::randn({2, 8}, wrng);

  LossFn fn = [&](ParamList&, Tape* tape) {
    ModelActivations acts = m.forward(ids, tape);
    Tensor w = token_weights(acts.attn.back());
    Tensor coms = span_com_matrix(acts.hidden.back(), w, spans, SpanSide::Student, ComMode::Com);
    return sum(mul(coms, wfix));
  };
  EXPECT_LT(check_gradients(fn, m.params(), 1e-5), 1e-5);
}

}  // namespace
}  // namespace sra
