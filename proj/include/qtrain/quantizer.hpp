#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "qtrain/bits.hpp"
#include "qtrain/calibration.hpp"
#include "qtrain/graph_ir.hpp"
#include "qtrain/qparams.hpp"

namespace qtrain {

struct QuantizeOptions {
  int bits = 4;
  RoundingMode rounding = RoundingMode::Truncate;
  // Add/Sub operands with different scales are brought onto a common grid by
  // plaintext multipliers c_small, c_big with c_big / c_small ~ ratio of scales.
  int max_alignment_multiplier = 8;
  double alignment_tolerance = 0.02;
  // Largest table a PBS may index.
  int max_table_bits = 22;

  void validate() const {
    if (bits < 2 || bits > 8) throw QuantizationError("bit-width must be in [2, 8], got " + std::to_string(bits));
    if (max_alignment_multiplier < 1) throw QuantizationError("alignment multiplier bound must be >= 1");
  }
};

inline QParams node_qparams(const Node& n) {
  return QParams{n.attr("scale"), static_cast<int>(n.int_attr("bits"))};
}

/// Quantizer of a named input of an integer graph.
inline QParams input_qparams(const Graph& g, const std::string& name) {
  const auto id = g.find_input(name);
  if (!id) throw GraphError("graph has no input '" + name + "'");
  return node_qparams(g.node(*id));
}

/// Range of integer values a graph input may carry, as declared by the quantizer.
inline Interval input_range(const Node& n) { return {n.int_attr("lo"), n.int_attr("hi")}; }

// ---------------------------------------------------------------------------
// Chain tabulation

/// One step of a float chain between a Dequantize and a Quantize node.
struct ChainStep {
  NodeKind kind = NodeKind::Sigmoid;
  double constant = 0.0;  // Div / Mul operand
};

inline double apply_step(const ChainStep& s, double x) {
  switch (s.kind) {
    case NodeKind::Div:
      return x / s.constant;
    case NodeKind::Mul:
      return x * s.constant;
    default:
      return apply_unary(s.kind, x);
  }
}

/// Description of a Dequantize -> f_1 -> ... -> f_k -> Quantize chain.
struct FloatChain {
  double in_scale = 1.0;
  int n_r = 0;
  RoundingMode rounding = RoundingMode::Truncate;
  int in_bits = 0;
  std::vector<ChainStep> steps;
  QParams out;

  /// Output code for one rounded input code.
  std::int64_t evaluate(std::int64_t rounded) const {
    double x = in_scale * reconstruct(rounded, n_r, rounding);
    for (const auto& s : steps) x = apply_step(s, x);
    return quantize(x, out);
  }

  LutTable tabulate() const {
    LutTable t;
    t.input_bits = in_bits;
    t.entries.resize(std::size_t{1} << in_bits);
    std::int64_t lo = 0, hi = 0;
    for (std::size_t i = 0; i < t.entries.size(); ++i) {
      t.entries[i] = evaluate(index_value(i, in_bits));
      lo = std::min(lo, t.entries[i]);
      hi = std::max(hi, t.entries[i]);
    }
    t.output_bits = signed_bits(Interval{lo, hi});
    std::ostringstream deq;
    deq.precision(17);
    deq << "dequantize(scale=" << in_scale << ",n_r=" << n_r << "," << to_string(rounding) << ")";
    t.provenance.push_back(deq.str());
    for (const auto& s : steps) {
      std::ostringstream op;
      op.precision(17);
      op << to_string(s.kind);
      if (s.kind == NodeKind::Div || s.kind == NodeKind::Mul) op << "(" << s.constant << ")";
      t.provenance.push_back(op.str());
    }
    std::ostringstream q;
    q.precision(17);
    q << "quantize(scale=" << out.scale << ",bits=" << out.bits << ")";
    t.provenance.push_back(q.str());
    return t;
  }
};

namespace detail {

/// Integer value in the graph being built, possibly with a pending chain of
/// float ops not yet materialized into a table.
struct IntVal {
  int node = -1;
  double scale = 1.0;
  Interval range;
  std::vector<ChainStep> chain;
  // Float-graph edge whose statistics describe the accumulator `node` holds.
  int anchor = -1;
};

inline bool chain_linear(const std::vector<ChainStep>& chain) {
  return std::all_of(chain.begin(), chain.end(),
                     [](const ChainStep& s) { return s.kind == NodeKind::Div || s.kind == NodeKind::Mul; });
}

inline double chain_factor(const std::vector<ChainStep>& chain) {
  double f = 1.0;
  for (const auto& s : chain) f = s.kind == NodeKind::Div ? f / s.constant : f * s.constant;
  return f;
}

class GraphQuantizer {
 public:
  GraphQuantizer(const Graph& fg, const CalibrationStats& stats, const QuantizeOptions& opt)
      : fg_(fg), stats_(stats), opt_(opt), val_(static_cast<std::size_t>(fg.size())) {}

  Graph run() {
    opt_.validate();
    if (stats_.edges.size() != static_cast<std::size_t>(fg_.size())) {
      throw QuantizationError("calibration statistics do not match the graph");
    }
    for (int id : topo_order(fg_)) visit(fg_.node(id));
    for (auto& [fid, qid] : labels_) {
      if (!label_resolved_[fid]) resolve_label(fid, default_qparams(fid).scale);
    }
    validate(qg_);
    return std::move(qg_);
  }

 private:
  QParams default_qparams(int fg_id) const { return make_qparams(stats_.at(fg_id).abs_max(), opt_.bits); }

  IntVal& value_of(int fg_id) {
    auto& v = val_[static_cast<std::size_t>(fg_id)];
    if (!v) throw QuantizationError("float edge " + std::to_string(fg_id) + " has no integer representation");
    if (labels_.count(fg_id) && !label_resolved_[fg_id]) resolve_label(fg_id, default_qparams(fg_id).scale);
    return *v;
  }

  bool unresolved_label(int fg_id) const {
    auto it = label_resolved_.find(fg_id);
    return it != label_resolved_.end() && !it->second;
  }

  bool is_constant(int fg_id) const { return fg_.node(fg_id).kind == NodeKind::Constant; }

  void resolve_label(int fg_id, double scale) {
    const QParams q{scale, opt_.bits};
    Node& n = qg_.mutable_node(labels_.at(fg_id));
    const std::int64_t one = quantize(1.0, q);
    n.attrs["scale"] = q.scale;
    n.attrs["bits"] = q.bits;
    n.attrs["lo"] = static_cast<double>(std::min<std::int64_t>(0, one));
    n.attrs["hi"] = static_cast<double>(std::max<std::int64_t>(0, one));
    auto& v = *val_[static_cast<std::size_t>(fg_id)];
    v.scale = q.scale;
    v.range = input_range(n);
    label_resolved_[fg_id] = true;
  }

  void visit(const Node& n) {
    auto& slot = val_[static_cast<std::size_t>(n.id)];
    switch (n.kind) {
      case NodeKind::Input: {
        const auto role = static_cast<InputRole>(n.int_attr("role"));
        Attrs attrs;
        if (role == InputRole::Label) {
          attrs = {{"scale", 0.0}, {"bits", static_cast<double>(opt_.bits)}, {"lo", 0.0}, {"hi", 0.0}};
        } else {
          const QParams q = default_qparams(n.id);
          attrs = {{"scale", q.scale},
                   {"bits", static_cast<double>(q.bits)},
                   {"lo", static_cast<double>(-q.qmax())},
                   {"hi", static_cast<double>(q.qmax())}};
        }
        const int id = qg_.add_input(n.name, n.shape, role, attrs);
        slot = IntVal{id, attrs["scale"], input_range(qg_.node(id)), {}, n.id};
        if (role == InputRole::Label) {
          labels_[n.id] = id;
          label_resolved_[n.id] = false;
        }
        return;
      }
      case NodeKind::Constant:
        return;  // folded into the chain of its consumer
      case NodeKind::Sigmoid:
      case NodeKind::ReLU:
      case NodeKind::SigmoidGrad:
      case NodeKind::ReLUGrad: {
        IntVal v = value_of(n.inputs[0]);
        if (v.chain.empty()) v.anchor = n.inputs[0];
        v.chain.push_back({n.kind, 0.0});
        slot = v;
        return;
      }
      case NodeKind::Div:
      case NodeKind::Mul: {
        const bool c0 = is_constant(n.inputs[0]), c1 = is_constant(n.inputs[1]);
        if (c1 || (c0 && n.kind == NodeKind::Mul)) {
          const int var = c1 ? n.inputs[0] : n.inputs[1];
          const int cst = c1 ? n.inputs[1] : n.inputs[0];
          IntVal v = value_of(var);
          if (v.chain.empty()) v.anchor = var;
          v.chain.push_back({n.kind, fg_.node(cst).attr("value")});
          slot = v;
          return;
        }
        if (n.kind == NodeKind::Div) {
          throw QuantizationError("Div by a non-constant (node " + std::to_string(n.id) + ") cannot be tabulated");
        }
        // Ciphertext-by-ciphertext product, lowered later through f_sq lookups.
        const IntVal a = as_code(n.inputs[0]);
        const IntVal b = as_code(n.inputs[1]);
        const int id = qg_.add(NodeKind::Mul, {a.node, b.node}, {{"scale", a.scale * b.scale}});
        slot = IntVal{id, a.scale * b.scale, product_sum_bound(a.range, b.range, 1), {}, n.id};
        return;
      }
      case NodeKind::MatMul: {
        const IntVal a = as_code(n.inputs[0]);
        const IntVal b = as_code(n.inputs[1]);
        const std::int64_t k = fg_.node(n.inputs[0]).shape.cols;
        const int id = qg_.add(NodeKind::MatMul, {a.node, b.node}, {{"scale", a.scale * b.scale}});
        slot = IntVal{id, a.scale * b.scale, product_sum_bound(a.range, b.range, k), {}, n.id};
        return;
      }
      case NodeKind::Transpose: {
        IntVal v = value_of(n.inputs[0]);
        if (!v.chain.empty()) v = materialize(v, default_qparams(n.inputs[0]));
        v.node = qg_.add(NodeKind::Transpose, {v.node}, {{"scale", v.scale}});
        slot = v;
        return;
      }
      case NodeKind::ReduceSum: {
        IntVal v = levelled(n.inputs[0]);
        const std::int64_t rows = fg_.node(n.inputs[0]).shape.rows;
        const int id = qg_.add(NodeKind::ReduceSum, {v.node}, {{"scale", v.scale}});
        slot = IntVal{id, v.scale, scaled(v.range, rows), {}, n.id};
        return;
      }
      case NodeKind::Add:
      case NodeKind::Sub: {
        add_sub(n);
        return;
      }
      case NodeKind::Output: {
        const std::string suffix = "_out";
        const bool paired = n.name.size() > suffix.size() && n.name.ends_with(suffix);
        const auto param = paired ? fg_.find_input(n.name.substr(0, n.name.size() - suffix.size())) : std::nullopt;
        if (!param) throw QuantizationError("output '" + n.name + "' has no parameter input");
        const QParams target = node_qparams(qg_.node(val_[static_cast<std::size_t>(*param)]->node));
        IntVal v = value_of(n.inputs[0]);
        v = materialize(v, target);
        qg_.add_output(n.name, v.node, {{"scale", target.scale}, {"bits", static_cast<double>(target.bits)}});
        return;
      }
      case NodeKind::Quantize:
      case NodeKind::Dequantize:
      case NodeKind::Lut:
        throw QuantizationError("graph is already quantized");
    }
  }

  void add_sub(const Node& n) {
    const bool la = unresolved_label(n.inputs[0]), lb = unresolved_label(n.inputs[1]);
    IntVal a = la ? IntVal{} : levelled(n.inputs[0]);
    IntVal b = lb ? IntVal{} : levelled(n.inputs[1]);
    // A label shares the quantizer of the value it is compared against.
    if (la && lb) {
      a = levelled(n.inputs[0]);
      b = levelled(n.inputs[1]);
    } else if (lb) {
      resolve_label(n.inputs[1], a.scale);
      b = *val_[static_cast<std::size_t>(n.inputs[1])];
    } else if (la) {
      resolve_label(n.inputs[0], b.scale);
      a = *val_[static_cast<std::size_t>(n.inputs[0])];
    }
    double scale = a.scale;
    if (std::fabs(a.scale / b.scale - 1.0) > 1e-12) {
      IntVal& small = a.scale < b.scale ? a : b;
      IntVal& big = a.scale < b.scale ? b : a;
      const double ratio = big.scale / small.scale;
      std::int64_t c_small = 1, c_big = std::llround(ratio);
      double best = std::fabs(static_cast<double>(c_big) / ratio - 1.0);
      for (std::int64_t c = 1; c <= opt_.max_alignment_multiplier && best > opt_.alignment_tolerance; ++c) {
        const std::int64_t cb = std::max<std::int64_t>(1, std::llround(ratio * static_cast<double>(c)));
        const double err = std::fabs(static_cast<double>(cb) / (ratio * static_cast<double>(c)) - 1.0);
        if (err < best - 1e-15) {
          best = err;
          c_small = c;
          c_big = cb;
        }
      }
      c_big = std::max<std::int64_t>(1, c_big);
      scale = small.scale / static_cast<double>(c_small);
      scale_by(small, c_small);
      scale_by(big, c_big);
    }
    const int id = qg_.add(n.kind, {a.node, b.node}, {{"scale", scale}});
    const Interval r = n.kind == NodeKind::Add ? a.range + b.range : a.range - b.range;
    val_[static_cast<std::size_t>(n.id)] = IntVal{id, scale, r, {}, n.id};
  }

  void scale_by(IntVal& v, std::int64_t c) {
    if (c == 1) return;
    const int cst = qg_.add_constant(static_cast<double>(c), true);
    v.node = qg_.add(NodeKind::Mul, {v.node, cst}, {{"scale", v.scale / static_cast<double>(c)}});
    v.range = v.range * Interval{c, c};
  }

  /// Operand of a levelled op: linear chains fold into the scale, others are
  /// materialized onto the calibrated grid of the float edge.
  IntVal levelled(int fg_id) {
    IntVal v = value_of(fg_id);
    if (v.chain.empty()) return v;
    const double f = chain_factor(v.chain);
    if (chain_linear(v.chain) && f > 0.0) {
      v.scale *= f;
      v.chain.clear();
      return v;
    }
    return materialize(v, default_qparams(fg_id));
  }

  /// Operand of a product: must be a small code.
  IntVal as_code(int fg_id) {
    IntVal v = levelled(fg_id);
    const QParams q = default_qparams(fg_id);
    if (Interval{-q.qmax(), q.qmax()}.contains(v.range)) return v;
    return materialize(v, q);
  }

  /// Emits Dequantize -> chain -> Quantize onto `target`, with the low bits of
  /// the accumulator removed first.
  IntVal materialize(const IntVal& v, const QParams& target) {
    const auto key = std::make_tuple(v.node, chain_key(v), target.scale, target.bits);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;

    // Reference grid for the requantization scale M = 2^-n_r * M0.
    const double ref = chain_linear(v.chain) ? target.scale / std::max(chain_factor(v.chain), 1e-300)
                                             : default_qparams(v.anchor).scale;
    const auto dec = decompose_scale(v.scale / ref);
    const RoundingPlan plan = plan_rounding(v.range, dec.n_r, opt_.rounding);
    if (plan.pbs_bits > opt_.max_table_bits) {
      throw QuantizationError("lookup on a " + std::to_string(plan.pbs_bits) + "-bit accumulator exceeds the table limit");
    }
    FloatChain chain{v.scale, plan.n_r, opt_.rounding, plan.pbs_bits, v.chain, target};

    int x = qg_.add(NodeKind::Dequantize, {v.node},
                    {{"scale", v.scale},
                     {"n_r", static_cast<double>(plan.n_r)},
                     {"rounding", static_cast<double>(opt_.rounding)},
                     {"in_bits", static_cast<double>(plan.pbs_bits)}});
    for (const auto& s : v.chain) {
      if (s.kind == NodeKind::Div || s.kind == NodeKind::Mul) {
        x = qg_.add(s.kind, {x, qg_.add_constant(s.constant)});
      } else {
        x = qg_.add(s.kind, {x});
      }
    }
    x = qg_.add(NodeKind::Quantize, {x}, {{"scale", target.scale}, {"bits", static_cast<double>(target.bits)}});

    const LutTable table = chain.tabulate();
    IntVal out{x, target.scale, table.output_range(plan.rounded), {}, v.anchor};
    memo_.emplace(key, out);
    return out;
  }

  static std::vector<std::pair<int, double>> chain_key(const IntVal& v) {
    std::vector<std::pair<int, double>> k;
    for (const auto& s : v.chain) k.emplace_back(static_cast<int>(s.kind), s.constant);
    return k;
  }

  const Graph& fg_;
  const CalibrationStats& stats_;
  QuantizeOptions opt_;
  Graph qg_;
  std::vector<std::optional<IntVal>> val_;
  std::map<int, int> labels_;
  std::map<int, bool> label_resolved_;
  std::map<std::tuple<int, std::vector<std::pair<int, double>>, double, int>, IntVal> memo_;
};

}  // namespace detail

/// Converts a float training graph into a quantized graph: integer
/// arithmetic on codes and accumulators, with every float op enclosed in a
/// Dequantize ... Quantize chain.
inline Graph quantize_graph(const Graph& float_graph, const CalibrationStats& stats, const QuantizeOptions& opt = {}) {
  return detail::GraphQuantizer(float_graph, stats, opt).run();
}

// ---------------------------------------------------------------------------
// Float-chain fusion

/// Where a Lut node of the fused graph came from in the quantized graph.
struct FusedChain {
  int lut_node = -1;
  int dequantize_node = -1;
  std::vector<int> op_nodes;
  int quantize_node = -1;
  FloatChain chain;
};

struct FusionResult {
  Graph graph;
  std::vector<FusedChain> chains;
};

/// Reads the chain ending at Quantize node `q` of a quantized graph.
inline FusedChain read_chain(const Graph& qg, int q) {
  FusedChain fc;
  fc.quantize_node = q;
  const Node& qn = qg.node(q);
  fc.chain.out = node_qparams(qn);
  int cur = qn.inputs.at(0);
  std::vector<ChainStep> rev;
  while (qg.node(cur).kind != NodeKind::Dequantize) {
    const Node& n = qg.node(cur);
    if (is_unary_float(n.kind)) {
      rev.push_back({n.kind, 0.0});
      fc.op_nodes.push_back(cur);
      cur = n.inputs[0];
      continue;
    }
    if (n.kind == NodeKind::Div || n.kind == NodeKind::Mul) {
      const Node& rhs = qg.node(n.inputs[1]);
      if (rhs.kind == NodeKind::Constant && rhs.attr_or("integer", 0.0) == 0.0) {
        rev.push_back({n.kind, rhs.attr("value")});
        fc.op_nodes.push_back(cur);
        cur = n.inputs[0];
        continue;
      }
    }
    throw QuantizationError("chain into Quantize node " + std::to_string(q) + " contains " + to_string(n.kind) +
                            " (node " + std::to_string(cur) + "), which cannot be tabulated");
  }
  const Node& dq = qg.node(cur);
  fc.dequantize_node = cur;
  std::reverse(fc.op_nodes.begin(), fc.op_nodes.end());
  fc.chain.in_scale = dq.attr("scale");
  fc.chain.n_r = static_cast<int>(dq.int_attr("n_r"));
  fc.chain.rounding = static_cast<RoundingMode>(dq.int_attr("rounding"));
  fc.chain.in_bits = static_cast<int>(dq.int_attr("in_bits"));
  fc.chain.steps.assign(rev.rbegin(), rev.rend());
  return fc;
}

inline bool is_float_node(const Graph& qg, const Node& n) {
  if (n.kind == NodeKind::Dequantize || is_unary_float(n.kind)) return true;
  if (n.kind == NodeKind::Constant) return n.attr_or("integer", 0.0) == 0.0;
  if (n.kind == NodeKind::Div) return true;
  if (n.kind == NodeKind::Mul) {
    return is_float_node(qg, qg.node(n.inputs[0])) || is_float_node(qg, qg.node(n.inputs[1]));
  }
  return false;
}

/// Replaces every Dequantize -> float ops -> Quantize chain with a single Lut
/// node whose table holds the chain's output for every input code.
inline FusionResult fuse_float_chains(const Graph& qg) {
  FusionResult res;
  Graph& ig = res.graph;
  std::vector<int> remap(static_cast<std::size_t>(qg.size()), -1);
  for (int id : topo_order(qg)) {
    const Node& n = qg.node(id);
    if (is_float_node(qg, n)) continue;
    auto mapped = [&](int src) {
      const int m = remap[static_cast<std::size_t>(src)];
      if (m < 0) {
        throw QuantizationError("dangling float node " + std::to_string(src) + " (" + to_string(qg.node(src).kind) +
                                ") feeds integer node " + std::to_string(id));
      }
      return m;
    };
    int out = -1;
    switch (n.kind) {
      case NodeKind::Input:
        out = ig.add_input(n.name, n.shape, static_cast<InputRole>(n.int_attr("role")), n.attrs);
        break;
      case NodeKind::Constant:
        out = ig.add_constant(n.attr("value"), true);
        break;
      case NodeKind::Output:
        out = ig.add_output(n.name, mapped(n.inputs[0]), n.attrs);
        break;
      case NodeKind::Quantize: {
        FusedChain fc = read_chain(qg, id);
        const int src = mapped(qg.node(fc.dequantize_node).inputs[0]);
        const int table = ig.add_table(fc.chain.tabulate());
        out = ig.add(NodeKind::Lut, {src},
                     {{"table", static_cast<double>(table)},
                      {"n_r", static_cast<double>(fc.chain.n_r)},
                      {"rounding", static_cast<double>(fc.chain.rounding)},
                      {"scale", fc.chain.out.scale},
                      {"bits", static_cast<double>(fc.chain.out.bits)}});
        fc.lut_node = out;
        res.chains.push_back(std::move(fc));
        break;
      }
      default: {
        std::vector<int> ins;
        for (int src : n.inputs) ins.push_back(mapped(src));
        out = ig.add(n.kind, ins, n.attrs, n.name);
      }
    }
    remap[static_cast<std::size_t>(id)] = out;
  }
  validate(ig);
  return res;
}

}  // namespace qtrain
