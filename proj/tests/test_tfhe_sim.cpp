#include <gtest/gtest.h>

#include <random>

#include "helpers.hpp"
#include "qtrain/interpreter.hpp"
#include "qtrain/tfhe_sim.hpp"

using namespace qtrain;
using testutil::logistic;
using testutil::mlp;

namespace {

LutTable identity_table(int bits) {
  LutTable t;
  t.input_bits = bits;
  t.output_bits = bits;
  for (std::size_t i = 0; i < (std::size_t{1} << bits); ++i) t.entries.push_back(index_value(i, bits));
  return t;
}

}  // namespace

TEST(Pbs, IdentityAndSquareQuarter) {
  SimCounters k;
  EXPECT_EQ(pbs(encrypt(5, 4), identity_table(4), k).value, 5);
  EXPECT_EQ(pbs(encrypt(5, 5), square_quarter_table(5), k).value, 6);
  EXPECT_EQ(k.pbs_by_width.at(4), 1u);
  EXPECT_EQ(k.pbs_by_width.at(5), 1u);
}

TEST(Pbs, ResetsNoise) {
  SimCounters k;
  auto a = lev_add(encrypt(1, 4), encrypt(2, 4), k);
  EXPECT_EQ(a.noise, 1);
  EXPECT_EQ(pbs(a, identity_table(4), k).noise, 0);
}

TEST(Pbs, WidthMismatchAndDomainErrors) {
  SimCounters k;
  EXPECT_THROW(pbs(encrypt(1, 5), identity_table(4), k), SimError);
  SimCiphertext bad{9, 4, 0, -1};  // outside the 4-bit domain
  EXPECT_THROW(pbs(bad, identity_table(4), k), SimError);
}

TEST(RoundedPbs, Examples) {
  SimCounters k;
  EXPECT_EQ(rounded_pbs(encrypt(23, 6), 1, identity_table(5), k).value, 11);
  EXPECT_EQ(k.pbs_by_width.at(1), 1u);
  EXPECT_EQ(rounded_pbs(encrypt(16, 6), 2, identity_table(4), k).value, 4);
  SimCounters k0, k1;
  EXPECT_EQ(rounded_pbs(encrypt(-3, 4), 0, identity_table(4), k0).value, pbs(encrypt(-3, 4), identity_table(4), k1).value);
  EXPECT_EQ(k0.pbs_by_width, k1.pbs_by_width);
}

TEST(RoundedPbs, InvalidBitCount) {
  SimCounters k;
  EXPECT_THROW(rounded_pbs(encrypt(1, 4), 4, identity_table(0), k), SimError);
  EXPECT_THROW(rounded_pbs(encrypt(1, 4), -1, identity_table(4), k), SimError);
}

TEST(RoundedPbs, ExhaustiveTruncation) {
  for (int w = 2; w <= 8; ++w) {
    for (int n_r = 0; n_r < w; ++n_r) {
      const LutTable t = identity_table(w - n_r);
      for (std::int64_t x = -(std::int64_t{1} << (w - 1)); x < (std::int64_t{1} << (w - 1)); ++x) {
        SimCounters k;
        const std::int64_t m = std::int64_t{1} << n_r;
        const std::int64_t low = ((x % m) + m) % m;
        ASSERT_EQ(rounded_pbs(encrypt(x, w), n_r, t, k).value, (x - low) / m) << "w=" << w << " n_r=" << n_r << " x=" << x;
        std::uint64_t pbs_total = 0;
        for (const auto& [width, n] : k.pbs_by_width) pbs_total += n;
        ASSERT_EQ(pbs_total, static_cast<std::uint64_t>(n_r) + 1);  // one per removed bit plus the table
        ASSERT_EQ(k.levelled_ops, rounding_levelled_ops(n_r, RoundingMode::Truncate));
      }
    }
  }
}

TEST(RoundedPbs, ExhaustiveNearest) {
  for (int w = 2; w <= 8; ++w) {
    for (int n_r = 1; n_r < w; ++n_r) {
      const LutTable t = identity_table(w - n_r);
      const std::int64_t m = std::int64_t{1} << n_r;
      // Keep x + 2^(n_r-1) inside the w-bit range.
      for (std::int64_t x = -(std::int64_t{1} << (w - 1)); x + m / 2 < (std::int64_t{1} << (w - 1)); ++x) {
        SimCounters k;
        const auto expect = static_cast<std::int64_t>(std::floor((static_cast<double>(x) + m / 2) / m));
        ASSERT_EQ(rounded_pbs(encrypt(x, w), n_r, t, k, RoundingMode::Nearest).value, expect);
        ASSERT_EQ(k.levelled_ops, rounding_levelled_ops(n_r, RoundingMode::Nearest));
      }
    }
  }
}

TEST(Levelled, Arithmetic) {
  SimCounters k;
  EXPECT_EQ(lev_add(encrypt(3, 4), encrypt(2, 4), k).value, 5);
  EXPECT_EQ(lev_sub(encrypt(3, 4), encrypt(5, 4), k).value, -2);
  EXPECT_EQ(lev_mul_const(encrypt(3, 4), -2, k).value, -6);
  EXPECT_EQ(lev_add(encrypt(3, 4), encrypt(2, 3), k).bit_width, 4);
  EXPECT_EQ(lev_add(encrypt(3, 4), encrypt(2, 3), k, 9).bit_width, 9);
  EXPECT_EQ(k.levelled_ops, 5u);
}

TEST(Levelled, OverflowIsFatal) {
  SimCounters k;
  EXPECT_THROW(lev_add(encrypt(7, 4), encrypt(1, 4), k), SimError);
  EXPECT_THROW(lev_sub(encrypt(-8, 4), encrypt(1, 4), k), SimError);
  EXPECT_THROW(lev_mul_const(encrypt(5, 4), 2, k), SimError);
  EXPECT_THROW(encrypt(8, 4), SimError);
}

TEST(Levelled, NoiseThreshold) {
  SimCounters k;
  k.noise_threshold = 2;
  auto a = lev_add(encrypt(1, 8), encrypt(1, 8), k);
  a = lev_add(a, encrypt(1, 8), k);
  EXPECT_THROW(lev_add(a, encrypt(1, 8), k), SimError);
}

TEST(QuarterSquareProduct, ExhaustiveFourBit) {
  const LutTable fsq = square_quarter_table(5);
  for (std::int64_t a = -8; a < 8; ++a) {
    for (std::int64_t b = -8; b < 8; ++b) {
      if (!fits_signed(a + b, 5) || !fits_signed(a - b, 5)) continue;
      SimCounters k;
      ASSERT_EQ(quarter_square_product(encrypt(a, 4), encrypt(b, 4), fsq, k, 8).value, a * b);
      ASSERT_EQ(k.pbs_by_width.at(5), 2u);
    }
  }
}

TEST(RunCircuit, DeterministicAndMatchesInterpreter) {
  for (const ModelSpec& s : {logistic(30, 8), mlp(10, 15, 8)}) {
    const CompiledModel m = compile_model(s);
    std::mt19937_64 rng(4);
    const auto in = testutil::random_codes(m.quantized_graph, rng);
    const auto [o1, c1] = run_circuit(m.circuit, in);
    const auto [o2, c2] = run_circuit(m.circuit, in);
    EXPECT_EQ(o1, o2);
    EXPECT_EQ(to_json(c1), to_json(c2));
    EXPECT_EQ(o1, evaluate_integer(m.integer_graph(), in));
  }
}

TEST(RunCircuit, ZeroGradientLeavesWeightsUnchanged) {
  // Zero features and weights give p = 0.5; labels coded to 0.5 make every error zero.
  const CompiledModel m = compile_model(logistic(3, 2));
  const QParams qy = m.input_qparams("Y");
  NamedTensors<std::int64_t> in{{"X", IntTensor(Shape{2, 3}, 0)},
                                {"Y", IntTensor(Shape{2, 1}, quantize(0.5, qy))},
                                {"weight_0", IntTensor(Shape{3, 1}, 0)},
                                {"bias_0", IntTensor(Shape{1, 1}, 0)}};
  const auto p = evaluate_integer(m.integer_graph(), in);
  const auto [out, cost] = run_circuit(m.circuit, in);
  EXPECT_EQ(out, p);
  // The sigmoid code and the label code coincide, so the error is exactly zero.
  const auto vals = evaluate_all(m.integer_graph(), in);
  bool zero_error = true;
  int error_nodes = 0;
  for (const auto& n : m.integer_graph().nodes()) {
    if (n.kind == NodeKind::Sub && m.integer_graph().node(n.inputs[1]).name == "Y") {
      ++error_nodes;
      for (auto v : as_int(vals[static_cast<std::size_t>(n.id)])) zero_error = zero_error && v == 0;
    }
  }
  ASSERT_EQ(error_nodes, 1);
  ASSERT_TRUE(zero_error);
  {
    for (const auto& [name, t] : out) {
      const std::string param = name.substr(0, name.size() - 4);
      EXPECT_EQ(dequantize(t, node_qparams(m.integer_graph().node(*m.integer_graph().find_output(name)))),
                dequantize(in.at(param), m.input_qparams(param)))
          << name;
    }
  }
}

TEST(RunCircuit, DynamicCountsMatchStaticCounts) {
  const CompiledModel m = compile_model(logistic(30, 8));
  std::mt19937_64 rng(6);
  const auto [out, cost] = run_circuit(m.circuit, testutil::random_codes(m.quantized_graph, rng));
  EXPECT_EQ(cost.pbs_by_width, static_pbs_by_width(m.circuit));
  EXPECT_EQ(cost.levelled_ops, m.circuit.total_levelled());
  EXPECT_EQ(cost.params, 31);
  EXPECT_EQ(cost.batch, 8);
}

TEST(RunCircuit, RejectsOutOfRangeInputs) {
  const CompiledModel m = compile_model(logistic(2, 1));
  std::mt19937_64 rng(1);
  auto in = testutil::random_codes(m.quantized_graph, rng);
  in["X"][0] = 1000;
  EXPECT_THROW(run_circuit(m.circuit, in), SimError);
  in.erase("X");
  EXPECT_THROW(run_circuit(m.circuit, in), SimError);
}

TEST(WgcRate, Examples) {
  EXPECT_NEAR(wgc_rate(2720, 60, 144, 48), 23.6, 0.05);
  EXPECT_EQ(std::lround(wgc_rate(2720, 60, 144, 48)), 24);
  EXPECT_NEAR(wgc_rate(930, 8, 149, 16), 3.12, 0.01);
  EXPECT_EQ(std::lround(wgc_rate(930, 8, 149, 16)), 3);
  EXPECT_DOUBLE_EQ(wgc_rate(10, 1, 10, 1), 1.0);
  EXPECT_THROW(wgc_rate(10, 1, 0, 1), SimError);
  EXPECT_THROW(wgc_rate(10, 1, 1, 0), SimError);
}

TEST(LatencyTable, DefaultIsMonotone) {
  const LatencyTable t = default_latency_table();
  EXPECT_NO_THROW(t.validate());
  for (int w = 2; w <= 24; ++w) EXPECT_GE(t.at(w), t.at(w - 1));
  EXPECT_GT(t.at(30), t.at(24));
  LatencyTable bad;
  bad.ms = {{1, 5.0}, {2, 4.0}};
  EXPECT_THROW(bad.validate(), SimError);
}

TEST(CostModel, LogisticLatencyFit) {
  const CompiledModel m = compile_model(logistic(30, 8));
  const CostReport r = static_cost(m.circuit);
  EXPECT_NEAR(r.latency_s, 11.8, 0.6);
  EXPECT_EQ(r.threads, 16);
}

TEST(CostModel, MonotoneInPbsWidth) {
  const CompiledModel m = compile_model(mlp(5, 4, 4));
  const double base = static_cost(m.circuit).latency_s;
  for (std::size_t i = 0; i < m.circuit.partitions.size(); ++i) {
    CompiledCircuit wider = m.circuit;
    wider.partitions[i].pbs_bits += 1;
    EXPECT_GE(static_cost(wider).latency_s, base) << "partition " << i;
  }
}

TEST(CostModel, MoreThreadsNeverSlower) {
  const CompiledModel m = compile_model(logistic(10, 8));
  double prev = 1e300;
  for (int threads : {1, 2, 4, 16, 64}) {
    CostModel cm;
    cm.threads = threads;
    const double t = static_cost(m.circuit, cm).latency_s;
    EXPECT_LE(t, prev);
    prev = t;
  }
}

TEST(CostModel, RefreshAddsOnePbsPerParameter) {
  const CompiledModel m = compile_model(logistic(10, 8));
  CostModel cm;
  cm.refresh_weights = true;
  const CostReport r = static_cost(m.circuit, cm);
  EXPECT_EQ(r.refresh_pbs, 11u);
  EXPECT_GT(r.latency_s, static_cost(m.circuit).latency_s);
}

TEST(CostReport, TextAndJson) {
  const CostReport r = static_cost(compile_model(logistic(4, 2)).circuit);
  const std::string text = to_text(r);
  EXPECT_NE(text.find("levelled ops"), std::string::npos);
  EXPECT_NE(text.find("WGC/s/T"), std::string::npos);
  EXPECT_EQ(to_json(r).at("pbs_total"), r.total_pbs());
}
