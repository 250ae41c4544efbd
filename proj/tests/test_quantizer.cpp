#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "oracle.hpp"
#include "qtrain/interpreter.hpp"
#include "qtrain/quantizer.hpp"

using namespace qtrain;
using testutil::logistic;
using testutil::mlp;

TEST(MakeQParams, Examples) {
  EXPECT_DOUBLE_EQ(make_qparams(1.0, 4).scale, 1.0 / 7.0);
  EXPECT_DOUBLE_EQ(make_qparams(7.0, 4).scale, 1.0);
  EXPECT_DOUBLE_EQ(make_qparams(1.0, 2).scale, 1.0);
  EXPECT_EQ(make_qparams(1.0, 4).qmax(), 7);
}

TEST(MakeQParams, DegenerateAndInvalid) {
  const QParams q = make_qparams(0.0, 4);
  EXPECT_TRUE(q.degenerate);
  EXPECT_EQ(q.scale, 1.0);
  EXPECT_THROW(make_qparams(1.0, 1), QuantizationError);
  EXPECT_THROW(make_qparams(-1.0, 4), QuantizationError);
  EXPECT_THROW(make_qparams(std::nan(""), 4), QuantizationError);
}

TEST(Quantize, Examples) {
  const QParams q = make_qparams(1.0, 4);
  EXPECT_EQ(quantize(0.0, q), 0);
  EXPECT_EQ(quantize(0.0, make_qparams(3.5, 6)), 0);
  EXPECT_EQ(quantize(1.0, q), 7);
  SaturationCounter sat;
  EXPECT_EQ(quantize(2.0, q, &sat), 7);
  EXPECT_EQ(quantize(-2.0, q, &sat), -7);
  EXPECT_EQ(sat.clipped, 2u);
  EXPECT_EQ(quantize(0.5, QParams{1.0, 4}), 0);  // ties go to even
  EXPECT_EQ(quantize(1.5, QParams{1.0, 4}), 2);
}

TEST(Quantize, MatchesOracle) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int bits = 2; bits <= 8; ++bits) {
    const QParams q = make_qparams(2.0, bits);
    for (int i = 0; i < 2000; ++i) {
      const double x = u(rng);
      EXPECT_EQ(quantize(x, q), oracle::quantize(x, q.scale, bits));
    }
  }
}

TEST(Quantize, RoundTripWithinHalfStep) {
  std::mt19937_64 rng(4);
  for (int bits = 2; bits <= 8; ++bits) {
    const QParams q = make_qparams(1.7, bits);
    std::uniform_real_distribution<double> u(-q.range_max(), q.range_max());
    for (int i = 0; i < 2000; ++i) {
      const double x = u(rng);
      EXPECT_LE(std::fabs(dequantize(quantize(x, q), q) - x), q.scale / 2 + 1e-12);
    }
  }
}

TEST(DecomposeScale, Examples) {
  auto d = decompose_scale(0.09375);
  EXPECT_EQ(d.n_r, 3);
  EXPECT_DOUBLE_EQ(d.m0, 0.75);
  d = decompose_scale(0.5);
  EXPECT_EQ(d.n_r, 0);
  EXPECT_DOUBLE_EQ(d.m0, 0.5);
  d = decompose_scale(0.7);
  EXPECT_EQ(d.n_r, 0);
  EXPECT_DOUBLE_EQ(d.m0, 0.7);
  d = decompose_scale(3.0);
  EXPECT_TRUE(d.no_rounding);
  EXPECT_EQ(d.n_r, 0);
  EXPECT_DOUBLE_EQ(d.m0, 3.0);
  EXPECT_THROW(decompose_scale(0.0), QuantizationError);
  EXPECT_THROW(decompose_scale(-1.0), QuantizationError);
}

TEST(DecomposeScale, ReconstructsInput) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> e(-30.0, 0.0);
  for (int i = 0; i < 5000; ++i) {
    const double m = std::exp2(e(rng));
    const auto d = decompose_scale(m);
    EXPECT_GE(d.m0, 0.5);
    EXPECT_LT(d.m0, 1.0);
    EXPECT_GE(d.n_r, 0);
    EXPECT_DOUBLE_EQ(std::ldexp(d.m0, -d.n_r), m);
  }
}

TEST(FloatChain, SigmoidAtZero) {
  FloatChain c;
  c.in_scale = 1.0 / 7.0;
  c.in_bits = 4;
  c.steps = {{NodeKind::Sigmoid, 0.0}};
  c.out = QParams{1.0 / 15.0, 4};
  const LutTable t = c.tabulate();
  EXPECT_EQ(t.lookup(0), oracle::quantize(0.5, 1.0 / 15.0, 4));
  for (std::int64_t v = -8; v < 8; ++v) {
    EXPECT_EQ(t.lookup(v), oracle::quantize(oracle::sigmoid(v / 7.0), 1.0 / 15.0, 4));
  }
}

TEST(FloatChain, IdentityChain) {
  FloatChain c;
  c.in_scale = 0.25;
  c.in_bits = 5;
  c.out = QParams{0.25, 5};
  const LutTable t = c.tabulate();
  for (std::int64_t v = -15; v <= 15; ++v) EXPECT_EQ(t.lookup(v), v);
}

TEST(FloatChain, DivByEight) {
  FloatChain c;
  c.in_scale = 0.5;
  c.in_bits = 5;
  c.steps = {{NodeKind::Div, 8.0}};
  c.out = QParams{0.5, 5};
  EXPECT_EQ(c.tabulate().lookup(8), 1);
}

TEST(FloatChain, RoundedInputReconstruction) {
  FloatChain c;
  c.in_scale = 1.0;
  c.in_bits = 4;
  c.n_r = 2;
  c.out = QParams{1.0, 8};
  // Truncated code 1 stands for accumulators 4..7, midpoint 5.5 -> 6 (ties to even).
  EXPECT_EQ(c.evaluate(1), 6);
  c.rounding = RoundingMode::Nearest;
  // Nearest code 1 stands for 2..5, midpoint 3.5 -> 4.
  EXPECT_EQ(c.evaluate(1), 4);
}

class FusionLossless : public ::testing::TestWithParam<ModelSpec> {};

TEST_P(FusionLossless, EveryTableMatchesComposedChain) {
  const CompiledModel m = compile_model(GetParam());
  ASSERT_FALSE(m.fused.chains.empty());
  for (const auto& fc : m.fused.chains) {
    const Node& lut = m.integer_graph().node(fc.lut_node);
    const LutTable& t = m.integer_graph().table(static_cast<int>(lut.int_attr("table")));
    ASSERT_EQ(t.entries.size(), std::size_t{1} << fc.chain.in_bits);
    const double step = std::ldexp(1.0, fc.chain.n_r);
    for (std::size_t i = 0; i < t.entries.size(); ++i) {
      // Independent reconstruction of the chain: midpoint of the rounded bucket,
      // each float op in turn, then the oracle quantizer.
      const auto code = static_cast<std::int64_t>(i) >= (std::int64_t{1} << (fc.chain.in_bits - 1))
                            ? static_cast<std::int64_t>(i) - (std::int64_t{1} << fc.chain.in_bits)
                            : static_cast<std::int64_t>(i);
      double x = fc.chain.n_r == 0 ? static_cast<double>(code)
                 : fc.chain.rounding == RoundingMode::Truncate ? code * step + (step - 1) / 2
                                                              : code * step - 0.5;
      x *= fc.chain.in_scale;
      for (const auto& s : fc.chain.steps) {
        switch (s.kind) {
          case NodeKind::Sigmoid: x = oracle::sigmoid(x); break;
          case NodeKind::ReLU: x = std::max(x, 0.0); break;
          case NodeKind::SigmoidGrad: x = oracle::sigmoid(x) * (1 - oracle::sigmoid(x)); break;
          case NodeKind::ReLUGrad: x = x > 0 ? 1.0 : 0.0; break;
          case NodeKind::Div: x /= s.constant; break;
          case NodeKind::Mul: x *= s.constant; break;
          default: FAIL() << "unexpected chain op " << to_string(s.kind);
        }
      }
      EXPECT_EQ(t.entries[i], oracle::quantize(x, fc.chain.out.scale, fc.chain.out.bits)) << "code " << code;
    }
  }
}

TEST_P(FusionLossless, FusedGraphBitIdenticalToUnfused) {
  const CompiledModel m = compile_model(GetParam());
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const auto in = testutil::random_codes(m.quantized_graph, rng);
    EXPECT_EQ(evaluate_integer(m.quantized_graph, in), evaluate_integer(m.integer_graph(), in));
  }
}

TEST_P(FusionLossless, IntegerGraphHasNoFloatNodes) {
  const CompiledModel m = compile_model(GetParam());
  for (const auto& n : m.integer_graph().nodes()) {
    EXPECT_NE(n.kind, NodeKind::Quantize);
    EXPECT_NE(n.kind, NodeKind::Dequantize);
    EXPECT_NE(n.kind, NodeKind::Sigmoid);
    EXPECT_NE(n.kind, NodeKind::ReLU);
    EXPECT_NE(n.kind, NodeKind::Div);
    if (n.kind == NodeKind::Constant) {
      EXPECT_NE(n.attr_or("integer", 0.0), 0.0);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Models, FusionLossless,
                         ::testing::Values(logistic(2, 1), logistic(10, 8), logistic(30, 8), mlp(4, 3, 2),
                                           mlp(10, 15, 8), mlp(6, 5, 4, Activation::Sigmoid)));

TEST(QuantizeGraph, BitWidthOption) {
  for (int bits : {2, 3, 4, 6, 8}) {
    QuantizeOptions opt;
    opt.bits = bits;
    PipelineOptions p;
    p.quant = opt;
    const CompiledModel m = compile_model(logistic(5, 4), p);
    EXPECT_EQ(m.input_qparams("X").bits, bits);
    EXPECT_EQ(m.input_qparams("weight_0").bits, bits);
  }
  QuantizeOptions bad;
  bad.bits = 1;
  const Graph g = build_training_graph(logistic(2, 2));
  EXPECT_THROW(quantize_graph(g, collect_stats(g, CalibrationConfig{}), bad), QuantizationError);
}

TEST(QuantizeGraph, Deterministic) {
  const Graph g = build_training_graph(mlp(5, 4, 2));
  const CalibrationStats s = collect_stats(g, CalibrationConfig{});
  EXPECT_EQ(quantize_graph(g, s), quantize_graph(g, s));
}

TEST(QuantizeGraph, ParameterOutputsShareInputGrid) {
  const CompiledModel m = compile_model(mlp(5, 4, 2));
  for (const char* name : {"weight_0", "bias_0", "weight_1", "bias_1"}) {
    const Node& o = m.integer_graph().node(*m.integer_graph().find_output(std::string(name) + "_out"));
    EXPECT_EQ(node_qparams(o), m.input_qparams(name)) << name;
  }
}
