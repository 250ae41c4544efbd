#include <gtest/gtest.h>

#include <random>
#include <set>

#include "helpers.hpp"
#include "oracle.hpp"
#include "qtrain/compiler.hpp"
#include "qtrain/interpreter.hpp"
#include "qtrain/pipeline.hpp"
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

std::map<std::string, double> range_attrs(std::int64_t lo, std::int64_t hi) {
  return {{"lo", static_cast<double>(lo)}, {"hi", static_cast<double>(hi)}};
}

/// Appends an identity lookup (with n_r bits removed) and an output to `src`.
int terminate(Graph& g, int src, int n_r, const std::string& name, RoundingMode mode = RoundingMode::Truncate) {
  const Interval r = analyze_ranges(g)[static_cast<std::size_t>(src)];
  const std::int64_t off = rounding_offset(n_r, mode);
  const int bits = signed_bits(hull(r, Interval{r.lo + off, r.hi + off})) - n_r;
  const int table = g.add_table(identity_table(bits));
  const int lut = g.add(NodeKind::Lut, {src},
                        {{"table", table}, {"n_r", n_r}, {"rounding", static_cast<double>(mode)}, {"scale", 1.0}, {"bits", 8}});
  return g.add_output(name, lut);
}

IntTensor random_tensor(Shape s, std::int64_t lo, std::int64_t hi, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int64_t> u(lo, hi);
  IntTensor t(s);
  for (auto& v : t) v = u(rng);
  return t;
}

}  // namespace

TEST(QuarterSquare, Examples) {
  EXPECT_EQ(floor_square_quarter(3 + 2) - floor_square_quarter(3 - 2), 6);
  EXPECT_EQ(floor_square_quarter(-3 + 2) - floor_square_quarter(-3 - 2), -6);
  EXPECT_EQ(floor_square_quarter(5), 6);
}

TEST(QuarterSquare, ExhaustiveOverSignedOperands) {
  for (int bits = 2; bits <= 6; ++bits) {
    const std::int64_t half = std::int64_t{1} << (bits - 1);
    for (std::int64_t a = -half; a < half; ++a) {
      for (std::int64_t b = -half; b < half; ++b) {
        const auto fs = static_cast<std::int64_t>(std::floor((a + b) * (a + b) / 4.0));
        const auto fd = static_cast<std::int64_t>(std::floor((a - b) * (a - b) / 4.0));
        ASSERT_EQ(fs - fd, a * b) << a << " * " << b;
        ASSERT_EQ(floor_square_quarter(a + b) - floor_square_quarter(a - b), a * b);
      }
    }
  }
}

TEST(SquareQuarterTable, Entries) {
  const LutTable t = square_quarter_table(5);
  EXPECT_EQ(t.entries.size(), 32u);
  for (std::int64_t x = -16; x < 16; ++x) EXPECT_EQ(t.lookup(x), x * x / 4);
  EXPECT_EQ(t.output_bits, signed_bits(64));
}

TEST(AnalyzeRanges, MatMulBoundCoversProducts) {
  Graph g;
  const int a = g.add_input("A", Shape{2, 3}, InputRole::Data, range_attrs(-7, 7));
  const int b = g.add_input("B", Shape{3, 2}, InputRole::Data, range_attrs(-3, 5));
  const int mm = g.add(NodeKind::MatMul, {a, b});
  const Interval r = analyze_ranges(g)[static_cast<std::size_t>(mm)];
  EXPECT_LE(r.lo, -3 * 7 * 5);
  EXPECT_GE(r.hi, 3 * 7 * 5);
}

TEST(PartitionGraph, SingleLookup) {
  Graph g;
  const int a = g.add_input("A", Shape{2, 2}, InputRole::Data, range_attrs(-7, 7));
  terminate(g, a, 0, "out");
  const CompiledCircuit c = partition_graph(g);
  ASSERT_EQ(c.partitions.size(), 1u);
  EXPECT_TRUE(c.partitions[0].arith.empty());
  EXPECT_EQ(c.partitions[0].pbs_count, 4u);
  EXPECT_EQ(c.partitions[0].pbs_bits, 4);
  EXPECT_EQ(c.param_sets.size(), 1u);
}

TEST(PartitionGraph, AddFeedingLookup) {
  Graph g;
  const int a = g.add_input("A", Shape{1, 3}, InputRole::Data, range_attrs(-7, 7));
  const int b = g.add_input("B", Shape{1, 3}, InputRole::Data, range_attrs(-7, 7));
  const int add = g.add(NodeKind::Add, {a, b});
  terminate(g, add, 0, "out");
  const CompiledCircuit c = partition_graph(g);
  ASSERT_EQ(c.partitions.size(), 1u);
  EXPECT_EQ(c.partitions[0].arith, std::vector<int>{add});
  EXPECT_EQ(c.partitions[0].acc_bits, 5);
  EXPECT_EQ(c.partitions[0].levelled_ops, 3u);
  EXPECT_EQ((std::set<int>(c.partitions[0].inputs.begin(), c.partitions[0].inputs.end())), (std::set<int>{a, b}));

  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    NamedTensors<std::int64_t> in{{"A", random_tensor({1, 3}, -7, 7, rng)}, {"B", random_tensor({1, 3}, -7, 7, rng)}};
    const auto [out, cost] = run_circuit(c, in);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(out.at("out")[k], in["A"][k] + in["B"][k]);
    EXPECT_EQ(cost.levelled_ops, 3u);
  }
}

TEST(PartitionGraph, RoundedLookupWidths) {
  Graph g;
  const int a = g.add_input("A", Shape{1, 4}, InputRole::Data, range_attrs(-100, 100));
  terminate(g, a, 3, "out");
  const CompiledCircuit c = partition_graph(g);
  const Partition& p = c.partitions.at(0);
  EXPECT_EQ(p.round_bits, 8);
  EXPECT_EQ(p.n_r, 3);
  EXPECT_EQ(p.pbs_bits, 5);
  EXPECT_EQ(p.rounding_pbs_count, 12u);
  EXPECT_EQ(p.levelled_ops, 4u * rounding_levelled_ops(3, RoundingMode::Truncate));
}

TEST(PartitionGraph, RandomMatMulThroughSimulator) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t m = 1 + trial % 4, k = 1 + trial % 5, n = 1 + trial % 3;
    Graph g;
    const int a = g.add_input("A", Shape{m, k}, InputRole::Data, range_attrs(-7, 7));
    const int b = g.add_input("B", Shape{k, n}, InputRole::Data, range_attrs(-7, 7));
    terminate(g, g.add(NodeKind::MatMul, {a, b}), 0, "C");
    const CompiledCircuit c = partition_graph(g);
    ASSERT_EQ(c.partitions.size(), 2u);
    EXPECT_EQ(c.partitions[0].kind, PartitionKind::Product);
    EXPECT_EQ(c.partitions[0].pbs_count, static_cast<std::uint64_t>(2 * m * n * k));
    EXPECT_EQ(c.partitions[1].depends_on, std::vector<int>{0});

    const IntTensor A = random_tensor({m, k}, -7, 7, rng), B = random_tensor({k, n}, -7, 7, rng);
    oracle::IMat oa(static_cast<std::size_t>(m)), ob(static_cast<std::size_t>(k));
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < k; ++j) oa[static_cast<std::size_t>(i)].push_back(A(i, j));
    for (std::int64_t i = 0; i < k; ++i)
      for (std::int64_t j = 0; j < n; ++j) ob[static_cast<std::size_t>(i)].push_back(B(i, j));
    const auto expect = oracle::matmul(oa, ob);
    const auto [out, cost] = run_circuit(c, {{"A", A}, {"B", B}});
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        EXPECT_EQ(out.at("C")(i, j), expect[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
    EXPECT_EQ(cost.pbs_by_width, static_pbs_by_width(c));
    EXPECT_EQ(cost.levelled_ops, c.total_levelled());
  }
}

TEST(PartitionGraph, ReduceSumOverOneRow) {
  Graph g;
  const int a = g.add_input("A", Shape{1, 3}, InputRole::Data, range_attrs(-7, 7));
  const int r = g.add(NodeKind::ReduceSum, {a});
  terminate(g, r, 0, "out");
  const CompiledCircuit c = partition_graph(g);
  EXPECT_EQ(c.partitions.at(0).levelled_ops, 0u);
  const IntTensor x(Shape{1, 3}, 5);
  EXPECT_EQ(run_circuit(c, {{"A", x}}).first.at("out"), x);
}

TEST(PartitionGraph, RejectsOutputWithoutPbs) {
  Graph g;
  const int a = g.add_input("A", Shape{1, 1}, InputRole::Data, range_attrs(-7, 7));
  const int b = g.add_input("B", Shape{1, 1}, InputRole::Data, range_attrs(-7, 7));
  g.add_output("out", g.add(NodeKind::Add, {a, b}));
  EXPECT_THROW(partition_graph(g), CompileError);
}

TEST(PartitionGraph, RejectsFloatNodes) {
  Graph g;
  const int a = g.add_input("A", Shape{1, 1}, InputRole::Data, range_attrs(-7, 7));
  g.add_output("out", g.add(NodeKind::Dequantize, {a}, {{"scale", 1.0}, {"n_r", 0}, {"rounding", 0}, {"in_bits", 4}}));
  EXPECT_THROW(partition_graph(g), CompileError);
}

TEST(PartitionGraph, AccumulatorCap) {
  PipelineOptions opt;
  opt.quant.bits = 8;
  opt.compile.max_acc_bits = 10;
  try {
    compile_model(logistic(30, 8), opt);
    FAIL() << "expected a CompileError";
  } catch (const CompileError& e) {
    EXPECT_NE(std::string(e.what()).find("fewer quantization bits"), std::string::npos);
  }
  opt.compile = CompileOptions{};
  opt.compile.max_pbs_bits = 4;
  EXPECT_THROW(compile_model(logistic(30, 8), opt), CompileError);
}

TEST(LogisticCircuit, PbsCountFormula) {
  for (auto [d, B] : {std::pair<std::int64_t, std::int64_t>{30, 8}, {10, 8}, {3, 2}, {1, 1}}) {
    const CompiledModel m = compile_model(logistic(d, B));
    const CompiledCircuit& c = m.circuit;
    const std::uint64_t formula = static_cast<std::uint64_t>(2 * d * B + B + 2 * d * B + d + 1);
    EXPECT_EQ(c.total_pbs(), formula) << "d=" << d << " B=" << B;

    std::mt19937_64 rng(static_cast<std::uint64_t>(d));
    const auto [out, cost] = run_circuit(c, testutil::random_codes(m.quantized_graph, rng));
    std::uint64_t dynamic = 0;
    for (const auto& [w, n] : cost.pbs_by_width) dynamic += n;
    EXPECT_EQ(dynamic - c.total_rounding_pbs(), formula);
    EXPECT_EQ(cost.pbs_by_width, static_pbs_by_width(c));
  }
}

class CompiledModels : public ::testing::TestWithParam<ModelSpec> {};

TEST_P(CompiledModels, StructuralInvariants) {
  const CompiledModel m = compile_model(GetParam());
  const CompiledCircuit& c = m.circuit;
  std::set<int> widths;
  for (const auto& p : c.partitions) {
    widths.insert(p.pbs_bits);
    EXPECT_LE(p.acc_bits, 24);
    EXPECT_GE(p.acc_bits, p.pbs_bits);
    EXPECT_EQ(c.param_sets.at(static_cast<std::size_t>(p.param_set)).pbs_bits, p.pbs_bits);
    for (int dep : p.depends_on) EXPECT_LT(dep, p.id);
    for (int a : p.arith) EXPECT_GE(p.acc_bits, signed_bits(c.range(a)));
    if (p.kind == PartitionKind::Lookup) {
      EXPECT_EQ(c.graph.node(p.terminal).kind, NodeKind::Lut);
      EXPECT_EQ(c.partition_of[static_cast<std::size_t>(p.terminal)], p.id);
    }
  }
  EXPECT_EQ(c.param_sets.size(), widths.size());
  // Every Lut terminates exactly one partition.
  std::size_t luts = 0, lookups = 0;
  for (const auto& n : c.graph.nodes()) luts += n.kind == NodeKind::Lut;
  for (const auto& p : c.partitions) lookups += p.kind == PartitionKind::Lookup;
  EXPECT_EQ(luts, lookups);
}

TEST_P(CompiledModels, Deterministic) {
  const CompiledModel a = compile_model(GetParam()), b = compile_model(GetParam());
  EXPECT_EQ(to_json(a.circuit).dump(), to_json(b.circuit).dump());
}

TEST_P(CompiledModels, AccumulatorsStayWithinAssignedWidths) {
  const CompiledModel m = compile_model(GetParam());
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = testutil::random_codes(m.quantized_graph, rng);
    const auto [out, cost] = run_circuit(m.circuit, in);
    ASSERT_EQ(cost.partition_max_abs.size(), m.circuit.partitions.size());
    for (const auto& p : m.circuit.partitions) {
      EXPECT_LT(cost.partition_max_abs[static_cast<std::size_t>(p.id)], std::int64_t{1} << (p.acc_bits - 1));
    }
    EXPECT_EQ(out, evaluate_integer(m.integer_graph(), in));
  }
}

INSTANTIATE_TEST_SUITE_P(Models, CompiledModels,
                         ::testing::Values(logistic(2, 1), logistic(30, 8), mlp(3, 4, 2), mlp(30, 30, 8),
                                           mlp(10, 15, 8, Activation::Sigmoid)));

TEST(CompiledCircuit, ExhaustiveTinyLogistic) {
  PipelineOptions opt;
  opt.quant.bits = 3;
  const CompiledModel m = compile_model(logistic(1, 1), opt);
  const QParams qx = m.input_qparams("X"), qw = m.input_qparams("weight_0"), qb = m.input_qparams("bias_0");
  const QParams qy = m.input_qparams("Y");
  const std::int64_t y_codes[] = {quantize(0.0, qy), quantize(1.0, qy)};
  std::size_t checked = 0;
  for (std::int64_t x = -qx.qmax(); x <= qx.qmax(); ++x)
    for (std::int64_t w = -qw.qmax(); w <= qw.qmax(); ++w)
      for (std::int64_t b = -qb.qmax(); b <= qb.qmax(); ++b)
        for (std::int64_t y : y_codes) {
          NamedTensors<std::int64_t> in{{"X", IntTensor(Shape{1, 1}, x)},
                                        {"Y", IntTensor(Shape{1, 1}, y)},
                                        {"weight_0", IntTensor(Shape{1, 1}, w)},
                                        {"bias_0", IntTensor(Shape{1, 1}, b)}};
          ASSERT_EQ(run_circuit(m.circuit, in).first, evaluate_integer(m.integer_graph(), in));
          ++checked;
        }
  EXPECT_EQ(checked, 7u * 7 * 7 * 2);
}

TEST(CompiledCircuit, JsonDump) {
  const CompiledModel m = compile_model(logistic(4, 2));
  const auto j = to_json(m.circuit);
  EXPECT_EQ(j.at("format"), "qtrain-circuit");
  EXPECT_EQ(j.at("partitions").size(), m.circuit.partitions.size());
  EXPECT_EQ(j.at("param_sets").size(), m.circuit.param_sets.size());
}
