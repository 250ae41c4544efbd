#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "qtrain/bits.hpp"
#include "qtrain/graph_ir.hpp"
#include "qtrain/graph_io.hpp"
#include "qtrain/quantizer.hpp"

namespace qtrain {

struct CompileOptions {
  // Widest multi-sum accumulator a partition may carry.
  int max_acc_bits = 24;
  // Widest PBS input (product operand sums and rounded lookups).
  int max_pbs_bits = 16;
};

/// Product partitions evaluate the f_sq lookups of an encrypted product;
/// lookup partitions end in a (rounded) table lookup.
enum class PartitionKind { Product, Lookup };

inline std::string to_string(PartitionKind k) { return k == PartitionKind::Product ? "product" : "lookup"; }

/// One multi-sum followed by one PBS, applied elementwise over a tensor.
struct Partition {
  int id = -1;
  PartitionKind kind = PartitionKind::Lookup;
  // MatMul / Mul node for product partitions, Lut node for lookups.
  int terminal = -1;
  // Levelled nodes evaluated by this partition's multi-sum, in topological order.
  std::vector<int> arith;
  // Ciphertext edges read from graph inputs or other partitions.
  std::vector<int> inputs;
  int table = -1;
  int acc_bits = 0;
  int round_bits = 0;
  int n_r = 0;
  int pbs_bits = 0;
  int param_set = -1;
  RoundingMode rounding = RoundingMode::Truncate;
  std::uint64_t pbs_count = 0;
  std::uint64_t rounding_pbs_count = 0;
  std::uint64_t levelled_ops = 0;
  // Elements the terminal PBS is applied to.
  std::uint64_t elements = 0;
  int level = 0;
  std::vector<int> depends_on;
};

struct ParamSet {
  int id = 0;
  int pbs_bits = 0;
};

/// Integer graph plus its partitioning into multi-sum + PBS units.
struct CompiledCircuit {
  Graph graph;
  // Graph tables first, then one f_sq table per product operand width.
  std::vector<LutTable> tables;
  std::vector<Partition> partitions;
  std::vector<ParamSet> param_sets;
  std::vector<Interval> ranges;
  // Partition computing each node (-1 for inputs and constants).
  std::vector<int> partition_of;
  // Product partition of each MatMul / encrypted Mul node.
  std::map<int, int> product_partition;
  int levels = 0;

  const Partition& partition(int id) const { return partitions.at(static_cast<std::size_t>(id)); }
  const Interval& range(int node) const { return ranges.at(static_cast<std::size_t>(node)); }

  std::uint64_t total_pbs() const {
    std::uint64_t n = 0;
    for (const auto& p : partitions) n += p.pbs_count;
    return n;
  }
  std::uint64_t total_rounding_pbs() const {
    std::uint64_t n = 0;
    for (const auto& p : partitions) n += p.rounding_pbs_count;
    return n;
  }
  std::uint64_t total_levelled() const {
    std::uint64_t n = 0;
    for (const auto& p : partitions) n += p.levelled_ops;
    return n;
  }
};

inline bool is_constant_operand(const Graph& g, const Node& n) {
  return n.kind == NodeKind::Mul &&
         (g.node(n.inputs[0]).kind == NodeKind::Constant || g.node(n.inputs[1]).kind == NodeKind::Constant);
}

/// Encrypted-by-encrypted products, lowered through f_sq lookups.
inline bool is_product(const Graph& g, const Node& n) {
  return n.kind == NodeKind::MatMul || (n.kind == NodeKind::Mul && !is_constant_operand(g, n));
}

inline bool is_levelled(const Graph& g, const Node& n) {
  switch (n.kind) {
    case NodeKind::Add:
    case NodeKind::Sub:
    case NodeKind::ReduceSum:
    case NodeKind::Transpose:
    case NodeKind::MatMul:
      return true;
    case NodeKind::Mul:
      return true;  // constant multiply, or the accumulation half of a product
    default:
      (void)g;
      return false;
  }
}

/// Table f_sq(x) = floor(x^2 / 4) over a signed `bits`-bit domain.
inline LutTable square_quarter_table(int bits) {
  LutTable t;
  t.input_bits = bits;
  t.entries.resize(std::size_t{1} << bits);
  std::int64_t hi = 0;
  for (std::size_t i = 0; i < t.entries.size(); ++i) {
    t.entries[i] = floor_square_quarter(index_value(i, bits));
    hi = std::max(hi, t.entries[i]);
  }
  t.output_bits = signed_bits(hi);
  t.provenance = {"f_sq(x)=floor(x^2/4)"};
  return t;
}

/// Worst-case value interval of every node of an integer graph.
inline std::vector<Interval> analyze_ranges(const Graph& g) {
  std::vector<Interval> r(static_cast<std::size_t>(g.size()));
  auto in = [&](const Node& n, int port) -> const Interval& { return r[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(port)])]; };
  for (int id : topo_order(g)) {
    const Node& n = g.node(id);
    Interval& out = r[static_cast<std::size_t>(id)];
    switch (n.kind) {
      case NodeKind::Input:
        out = input_range(n);
        break;
      case NodeKind::Constant: {
        const auto v = n.int_attr("value");
        out = {v, v};
        break;
      }
      case NodeKind::Transpose:
      case NodeKind::Output:
        out = in(n, 0);
        break;
      case NodeKind::Add:
        out = in(n, 0) + in(n, 1);
        break;
      case NodeKind::Sub:
        out = in(n, 0) - in(n, 1);
        break;
      case NodeKind::ReduceSum:
        out = scaled(in(n, 0), g.node(n.inputs[0]).shape.rows);
        break;
      case NodeKind::Mul:
        out = is_constant_operand(g, n) ? in(n, 0) * in(n, 1) : product_sum_bound(in(n, 0), in(n, 1), 1);
        break;
      case NodeKind::MatMul:
        out = product_sum_bound(in(n, 0), in(n, 1), g.node(n.inputs[0]).shape.cols);
        break;
      case NodeKind::Lut: {
        const auto mode = static_cast<RoundingMode>(n.int_attr("rounding"));
        const int n_r = static_cast<int>(n.int_attr("n_r"));
        out = g.table(static_cast<int>(n.int_attr("table"))).output_range(remove_low_bits(in(n, 0), n_r, mode));
        break;
      }
      default:
        throw CompileError("node " + std::to_string(id) + " (" + to_string(n.kind) +
                           ") is not an integer operation; fuse float chains first");
    }
  }
  return r;
}

/// Static shape of the f_sq lowering of one product node.
struct ProductLowering {
  int operand_bits = 0;  // width of a + b and a - b
  std::uint64_t lookups = 0;
  std::uint64_t levelled_ops = 0;
};

/// Lowers C = A x B (or an elementwise product) to sums/differences of the
/// operands, two f_sq lookups per scalar product, and a levelled accumulation.
inline ProductLowering lower_matmul(const Graph& g, int node, const std::vector<Interval>& ranges,
                                    const CompileOptions& opt = {}) {
  const Node& n = g.node(node);
  if (!is_product(g, n)) throw CompileError("node " + std::to_string(node) + " is not an encrypted product");
  const Interval& a = ranges[static_cast<std::size_t>(n.inputs[0])];
  const Interval& b = ranges[static_cast<std::size_t>(n.inputs[1])];
  ProductLowering low;
  low.operand_bits = product_pbs_bits(a, b);
  if (low.operand_bits > opt.max_pbs_bits) {
    throw CompileError("product node " + std::to_string(node) + " needs " + std::to_string(low.operand_bits) +
                       "-bit lookups, above the " + std::to_string(opt.max_pbs_bits) + "-bit PBS limit");
  }
  std::uint64_t products = 0;
  if (n.kind == NodeKind::MatMul) {
    products = static_cast<std::uint64_t>(n.shape.rows * n.shape.cols * g.node(n.inputs[0]).shape.cols);
  } else {
    products = static_cast<std::uint64_t>(n.shape.size());
  }
  low.lookups = 2 * products;
  low.levelled_ops = 2 * products;
  return low;
}

/// Levelled operations performed when node `id` is evaluated inside a multi-sum.
inline std::uint64_t levelled_cost(const Graph& g, const Node& n) {
  switch (n.kind) {
    case NodeKind::Add:
    case NodeKind::Sub:
      return static_cast<std::uint64_t>(n.shape.size());
    case NodeKind::Mul:
      return static_cast<std::uint64_t>(n.shape.size());
    case NodeKind::ReduceSum: {
      const Shape& s = g.node(n.inputs[0]).shape;
      return static_cast<std::uint64_t>((s.rows - 1) * s.cols);
    }
    case NodeKind::MatMul: {
      const auto k = g.node(n.inputs[0]).shape.cols;
      return static_cast<std::uint64_t>(n.shape.size() * (2 * k - 1));
    }
    default:
      return 0;
  }
}

/// Levelled operations of the bit-removal procedure for one element.
inline std::uint64_t rounding_levelled_ops(int n_r, RoundingMode mode) {
  if (n_r == 0) return 0;
  return static_cast<std::uint64_t>(2 * n_r) + (mode == RoundingMode::Nearest ? 1U : 0U);
}

namespace detail {

class Partitioner {
 public:
  Partitioner(const Graph& g, const CompileOptions& opt) : g_(g), opt_(opt) {}

  CompiledCircuit run() {
    CompiledCircuit c;
    c.graph = g_;
    c.tables = g_.tables();
    c.ranges = analyze_ranges(g_);
    c.partition_of.assign(static_cast<std::size_t>(g_.size()), -1);
    circuit_ = &c;

    for (int id : topo_order(g_)) {
      const Node& n = g_.node(id);
      if (is_product(g_, n)) {
        Partition& p = new_partition(PartitionKind::Product, id);
        c.product_partition[id] = p.id;
        absorb(p.id, n.inputs[0]);
        absorb(p.id, n.inputs[1]);
      } else if (n.kind == NodeKind::Lut) {
        Partition& p = new_partition(PartitionKind::Lookup, id);
        c.partition_of[static_cast<std::size_t>(id)] = p.id;
        absorb(p.id, n.inputs[0]);
      } else if (n.kind == NodeKind::Output && g_.node(n.inputs[0]).kind != NodeKind::Lut) {
        throw CompileError("output '" + n.name + "' is not produced by a PBS");
      } else if (n.kind == NodeKind::Dequantize || n.kind == NodeKind::Quantize || is_unary_float(n.kind) ||
                 n.kind == NodeKind::Div) {
        throw CompileError("dangling float node " + std::to_string(id) + " (" + to_string(n.kind) + ")");
      }
    }
    for (int id : topo_order(g_)) {
      const Node& n = g_.node(id);
      if (is_levelled(g_, n) && c.partition_of[static_cast<std::size_t>(id)] < 0) {
        throw CompileError("levelled node " + std::to_string(id) + " (" + to_string(n.kind) +
                           ") does not feed any PBS");
      }
    }
    for (auto& p : c.partitions) assign_bitwidths(c, p, opt_);
    finish(c);
    return c;
  }

 private:
  Partition& new_partition(PartitionKind kind, int terminal) {
    Partition p;
    p.id = static_cast<int>(circuit_->partitions.size());
    p.kind = kind;
    p.terminal = terminal;
    circuit_->partitions.push_back(p);
    return circuit_->partitions.back();
  }

  void add_input(int pid, int node) {
    auto& ins = circuit_->partitions[static_cast<std::size_t>(pid)].inputs;
    if (std::find(ins.begin(), ins.end(), node) == ins.end()) ins.push_back(node);
  }

  /// Greedily pulls the levelled producers of `node` into partition `pid`.
  void absorb(int pid, int node) {
    const Node& n = g_.node(node);
    auto& owner = circuit_->partition_of[static_cast<std::size_t>(node)];
    if (n.kind == NodeKind::Constant) return;
    if (n.kind == NodeKind::Input || n.kind == NodeKind::Lut || (owner >= 0 && owner != pid)) {
      add_input(pid, node);
      return;
    }
    if (owner == pid) return;
    if (!is_levelled(g_, n)) {
      throw CompileError("node " + std::to_string(node) + " (" + to_string(n.kind) + ") cannot be part of a multi-sum");
    }
    owner = pid;
    if (is_product(g_, n)) {
      // The accumulation half reads the f_sq outputs of the product partition.
      add_input(pid, node);
    } else {
      for (int src : n.inputs) absorb(pid, src);
    }
    circuit_->partitions[static_cast<std::size_t>(pid)].arith.push_back(node);
  }

  const Graph& g_;
  CompileOptions opt_;
  CompiledCircuit* circuit_ = nullptr;

 public:
  /// Widths, table and PBS counts of one partition.
  static void assign_bitwidths(CompiledCircuit& c, Partition& p, const CompileOptions& opt) {
    const Graph& g = c.graph;
    const Node& t = g.node(p.terminal);
    int acc = 1;
    for (int a : p.arith) {
      const Node& n = g.node(a);
      if (n.kind == NodeKind::Transpose) continue;
      acc = std::max(acc, signed_bits(c.range(a)));
      p.levelled_ops += levelled_cost(g, n);
    }
    if (p.kind == PartitionKind::Product) {
      const ProductLowering low = lower_matmul(g, p.terminal, c.ranges, opt);
      p.round_bits = low.operand_bits;
      p.pbs_bits = low.operand_bits;
      p.n_r = 0;
      p.pbs_count = low.lookups;
      p.levelled_ops += low.levelled_ops;
      p.elements = low.lookups;
      p.table = product_table(c, low.operand_bits);
      acc = std::max(acc, low.operand_bits);
    } else {
      const Interval& in = c.range(t.inputs[0]);
      p.n_r = static_cast<int>(t.int_attr("n_r"));
      p.rounding = static_cast<RoundingMode>(t.int_attr("rounding"));
      const std::int64_t off = rounding_offset(p.n_r, p.rounding);
      p.round_bits = signed_bits(hull(in, Interval{in.lo + off, in.hi + off}));
      p.pbs_bits = p.round_bits - p.n_r;
      p.table = static_cast<int>(t.int_attr("table"));
      if (g.table(p.table).input_bits != p.pbs_bits) {
        throw CompileError("lookup node " + std::to_string(p.terminal) + " has a " +
                           std::to_string(g.table(p.table).input_bits) + "-bit table but its rounded accumulator is " +
                           std::to_string(p.pbs_bits) + " bits");
      }
      p.elements = static_cast<std::uint64_t>(t.shape.size());
      p.pbs_count = p.elements;
      p.rounding_pbs_count = p.elements * static_cast<std::uint64_t>(p.n_r);
      p.levelled_ops += p.elements * rounding_levelled_ops(p.n_r, p.rounding);
      acc = std::max(acc, p.round_bits);
      if (p.pbs_bits > opt.max_pbs_bits) {
        throw CompileError("lookup node " + std::to_string(p.terminal) + " needs a " + std::to_string(p.pbs_bits) +
                           "-bit PBS, above the " + std::to_string(opt.max_pbs_bits) + "-bit limit");
      }
    }
    p.acc_bits = acc;
    if (p.acc_bits > opt.max_acc_bits) {
      throw CompileError("partition " + std::to_string(p.id) + " needs a " + std::to_string(p.acc_bits) +
                         "-bit accumulator, above the " + std::to_string(opt.max_acc_bits) +
                         "-bit cap; use fewer quantization bits or a smaller batch");
    }
  }

 private:
  static int product_table(CompiledCircuit& c, int bits) {
    for (std::size_t i = c.graph.tables().size(); i < c.tables.size(); ++i) {
      if (c.tables[i].input_bits == bits) return static_cast<int>(i);
    }
    c.tables.push_back(square_quarter_table(bits));
    return static_cast<int>(c.tables.size()) - 1;
  }

  void finish(CompiledCircuit& c) {
    std::set<int> widths;
    for (const auto& p : c.partitions) widths.insert(p.pbs_bits);
    int next = 0;
    for (int w : widths) c.param_sets.push_back({next++, w});
    for (auto& p : c.partitions) {
      for (const auto& ps : c.param_sets) {
        if (ps.pbs_bits == p.pbs_bits) p.param_set = ps.id;
      }
      std::set<int> deps;
      for (int in : p.inputs) {
        int src = c.partition_of[static_cast<std::size_t>(in)];
        if (is_product(c.graph, c.graph.node(in)) && src == p.id) src = c.product_partition.at(in);
        if (is_product(c.graph, c.graph.node(in)) && src != p.id && c.partition_of[static_cast<std::size_t>(in)] == p.id) {
          src = c.product_partition.at(in);
        }
        if (src >= 0 && src != p.id) deps.insert(src);
      }
      p.depends_on.assign(deps.begin(), deps.end());
      p.level = 0;
      for (int d : p.depends_on) {
        if (d >= p.id) throw CompileError("partition order violates a data dependency");
        p.level = std::max(p.level, c.partitions[static_cast<std::size_t>(d)].level + 1);
      }
      c.levels = std::max(c.levels, p.level + 1);
    }
  }
};

}  // namespace detail

/// Recomputes the widths of an existing partition (exposed for tests).
inline void assign_bitwidths(CompiledCircuit& c, Partition& p, const CompileOptions& opt = {}) {
  p.levelled_ops = 0;
  detail::Partitioner::assign_bitwidths(c, p, opt);
}

/// Splits a fused integer graph into partitions of one multi-sum and one PBS.
inline CompiledCircuit partition_graph(const Graph& integer_graph, const CompileOptions& opt = {}) {
  return detail::Partitioner(integer_graph, opt).run();
}

/// Static PBS counts keyed by PBS input width (1-bit entries are the
/// bit-removal PBSs of the rounding operator).
inline std::map<int, std::uint64_t> static_pbs_by_width(const CompiledCircuit& c) {
  std::map<int, std::uint64_t> m;
  for (const auto& p : c.partitions) {
    m[p.pbs_bits] += p.pbs_count;
    if (p.rounding_pbs_count) m[1] += p.rounding_pbs_count;
  }
  return m;
}

inline nlohmann::json to_json(const CompiledCircuit& c) {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : c.partitions) {
    parts.push_back({{"id", p.id},
                     {"kind", to_string(p.kind)},
                     {"terminal", p.terminal},
                     {"terminal_kind", to_string(c.graph.node(p.terminal).kind)},
                     {"arith", p.arith},
                     {"inputs", p.inputs},
                     {"table", p.table},
                     {"acc_bits", p.acc_bits},
                     {"round_bits", p.round_bits},
                     {"n_r", p.n_r},
                     {"rounding", to_string(p.rounding)},
                     {"pbs_bits", p.pbs_bits},
                     {"param_set", p.param_set},
                     {"pbs_count", p.pbs_count},
                     {"rounding_pbs_count", p.rounding_pbs_count},
                     {"levelled_ops", p.levelled_ops},
                     {"level", p.level},
                     {"depends_on", p.depends_on}});
  }
  nlohmann::json psets = nlohmann::json::array();
  for (const auto& ps : c.param_sets) psets.push_back({{"id", ps.id}, {"pbs_bits", ps.pbs_bits}});
  nlohmann::json tables = nlohmann::json::array();
  for (std::size_t i = 0; i < c.tables.size(); ++i) {
    tables.push_back({{"id", i},
                      {"input_bits", c.tables[i].input_bits},
                      {"output_bits", c.tables[i].output_bits},
                      {"provenance", c.tables[i].provenance}});
  }
  nlohmann::json by_width = nlohmann::json::object();
  for (const auto& [w, n] : static_pbs_by_width(c)) by_width[std::to_string(w)] = n;
  nlohmann::json io_in = nlohmann::json::array(), io_out = nlohmann::json::array();
  for (int id : c.graph.inputs()) io_in.push_back(c.graph.node(id).name);
  for (int id : c.graph.outputs()) io_out.push_back(c.graph.node(id).name);
  return {{"format", "qtrain-circuit"},
          {"version", 1},
          {"encrypted_inputs", io_in},
          {"encrypted_outputs", io_out},
          {"param_sets", psets},
          {"partitions", parts},
          {"tables", tables},
          {"levels", c.levels},
          {"static_cost", {{"pbs_total", c.total_pbs()},
                           {"rounding_pbs_total", c.total_rounding_pbs()},
                           {"levelled_ops", c.total_levelled()},
                           {"pbs_by_width", by_width}}},
          {"graph", to_json(c.graph)}};
}

}  // namespace qtrain
