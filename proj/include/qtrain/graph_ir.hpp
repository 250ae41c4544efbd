#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qtrain/bits.hpp"
#include "qtrain/error.hpp"
#include "qtrain/tensor.hpp"

namespace qtrain {

enum class NodeKind {
  MatMul,
  Add,
  Sub,
  Mul,
  Div,
  ReduceSum,
  Sigmoid,
  ReLU,
  SigmoidGrad,
  ReLUGrad,
  Transpose,
  Quantize,
  Dequantize,
  Lut,
  Constant,
  Input,
  Output,
};

inline constexpr std::pair<NodeKind, std::string_view> kNodeKindNames[] = {
    {NodeKind::MatMul, "MatMul"},
    {NodeKind::Add, "Add"},
    {NodeKind::Sub, "Sub"},
    {NodeKind::Mul, "Mul"},
    {NodeKind::Div, "Div"},
    {NodeKind::ReduceSum, "ReduceSum"},
    {NodeKind::Sigmoid, "Sigmoid"},
    {NodeKind::ReLU, "ReLU"},
    {NodeKind::SigmoidGrad, "SigmoidGrad"},
    {NodeKind::ReLUGrad, "ReLUGrad"},
    {NodeKind::Transpose, "Transpose"},
    {NodeKind::Quantize, "Quantize"},
    {NodeKind::Dequantize, "Dequantize"},
    {NodeKind::Lut, "Lut"},
    {NodeKind::Constant, "Constant"},
    {NodeKind::Input, "Input"},
    {NodeKind::Output, "Output"},
};

inline std::string to_string(NodeKind k) {
  for (const auto& [kind, name] : kNodeKindNames) {
    if (kind == k) return std::string(name);
  }
  return "?";
}

inline NodeKind node_kind_from_string(std::string_view s) {
  for (const auto& [kind, name] : kNodeKindNames) {
    if (name == s) return kind;
  }
  throw GraphError("unknown node kind '" + std::string(s) + "'");
}

inline int arity(NodeKind k) {
  switch (k) {
    case NodeKind::MatMul:
    case NodeKind::Add:
    case NodeKind::Sub:
    case NodeKind::Mul:
    case NodeKind::Div:
      return 2;
    case NodeKind::Constant:
    case NodeKind::Input:
      return 0;
    default:
      return 1;
  }
}

/// Elementwise univariate float functions. These are the ops that end up
/// inside lookup tables.
inline bool is_unary_float(NodeKind k) {
  return k == NodeKind::Sigmoid || k == NodeKind::ReLU || k == NodeKind::SigmoidGrad ||
         k == NodeKind::ReLUGrad;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double apply_unary(NodeKind k, double x) {
  switch (k) {
    case NodeKind::Sigmoid:
      return sigmoid(x);
    case NodeKind::ReLU:
      return x > 0.0 ? x : 0.0;
    case NodeKind::SigmoidGrad: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case NodeKind::ReLUGrad:
      return x > 0.0 ? 1.0 : 0.0;
    default:
      throw GraphError("not a unary float op: " + to_string(k));
  }
}

/// Role of a graph input. Parameters are the trained tensors; each one has a
/// matching updated output.
enum class InputRole { Data = 0, Label = 1, Param = 2 };

using Attrs = std::map<std::string, double>;

struct Node {
  int id = -1;
  NodeKind kind = NodeKind::Input;
  std::string name;
  std::vector<int> inputs;
  Attrs attrs;
  Shape shape;

  double attr(const std::string& key) const {
    auto it = attrs.find(key);
    if (it == attrs.end()) throw GraphError("node " + std::to_string(id) + " lacks attribute '" + key + "'");
    return it->second;
  }
  double attr_or(const std::string& key, double fallback) const {
    auto it = attrs.find(key);
    return it == attrs.end() ? fallback : it->second;
  }
  bool has_attr(const std::string& key) const { return attrs.count(key) != 0; }
  std::int64_t int_attr(const std::string& key) const { return static_cast<std::int64_t>(std::llround(attr(key))); }
};

struct Edge {
  int from = -1;
  int to = -1;
  int port = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Integer lookup table applied by a PBS. Indexed by the two's-complement
/// encoding of a signed `input_bits`-bit value.
struct LutTable {
  int input_bits = 0;
  int output_bits = 0;
  std::vector<std::int64_t> entries;
  std::vector<std::string> provenance;

  std::int64_t lookup(std::int64_t v) const {
    if (!fits_signed(v, input_bits)) {
      throw SimError("value " + std::to_string(v) + " outside " + std::to_string(input_bits) +
                     "-bit table domain");
    }
    return entries[table_index(v, input_bits)];
  }
  Interval output_range(const Interval& domain) const {
    Interval r{entries[table_index(domain.lo, input_bits)], entries[table_index(domain.lo, input_bits)]};
    for (std::int64_t v = domain.lo; v <= domain.hi; ++v) {
      const auto e = entries[table_index(v, input_bits)];
      r.lo = std::min(r.lo, e);
      r.hi = std::max(r.hi, e);
    }
    return r;
  }
  friend bool operator==(const LutTable&, const LutTable&) = default;
};

inline Shape broadcast_shape(const Shape& a, const Shape& b, int node_id) {
  auto dim = [&](std::int64_t x, std::int64_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError("node " + std::to_string(node_id) + ": cannot broadcast " + to_string(a) + " with " +
                     to_string(b));
  };
  return Shape{dim(a.rows, b.rows), dim(a.cols, b.cols)};
}

/// Typed DAG of tensor operations. Nodes are stored densely by id; each node
/// produces exactly one tensor, so a node id also names its output edge.
class Graph {
 public:
  int add_input(std::string name, Shape shape, InputRole role, Attrs attrs = {}) {
    attrs["role"] = static_cast<double>(role);
    const int id = push(NodeKind::Input, {}, std::move(attrs), std::move(name));
    nodes_[id].shape = shape;
    inputs_.push_back(id);
    return id;
  }

  int add_constant(double value, bool integer = false) {
    const int id = push(NodeKind::Constant, {}, {{"value", value}, {"integer", integer ? 1.0 : 0.0}}, {});
    nodes_[id].shape = Shape{1, 1};
    return id;
  }

  int add_output(std::string name, int source, Attrs attrs = {}) {
    const int id = add(NodeKind::Output, {source}, std::move(attrs), std::move(name));
    outputs_.push_back(id);
    return id;
  }

  /// Appends a compute node and infers its shape.
  int add(NodeKind kind, std::vector<int> inputs, Attrs attrs = {}, std::string name = {}) {
    if (kind == NodeKind::Input || kind == NodeKind::Constant) {
      throw GraphError("use add_input/add_constant for " + to_string(kind));
    }
    for (int in : inputs) {
      if (in < 0 || in >= size()) throw GraphError("input id " + std::to_string(in) + " does not exist");
    }
    const int id = push(kind, std::move(inputs), std::move(attrs), std::move(name));
    nodes_[id].shape = infer_shape(nodes_[id]);
    return id;
  }

  int add_table(LutTable t) {
    tables_.push_back(std::move(t));
    return static_cast<int>(tables_.size()) - 1;
  }

  int size() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  Node& mutable_node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<int>& inputs() const { return inputs_; }
  const std::vector<int>& outputs() const { return outputs_; }
  const std::vector<LutTable>& tables() const { return tables_; }
  const LutTable& table(int id) const { return tables_.at(static_cast<std::size_t>(id)); }

  std::optional<int> find_input(std::string_view name) const { return find_in(inputs_, name); }
  std::optional<int> find_output(std::string_view name) const { return find_in(outputs_, name); }

  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (const auto& n : nodes_) {
      for (int p = 0; p < static_cast<int>(n.inputs.size()); ++p) out.push_back({n.inputs[p], n.id, p});
    }
    return out;
  }

  std::vector<std::vector<int>> consumers() const {
    std::vector<std::vector<int>> out(nodes_.size());
    for (const auto& n : nodes_) {
      for (int in : n.inputs) out[static_cast<std::size_t>(in)].push_back(n.id);
    }
    return out;
  }

  Shape infer_shape(const Node& n) const {
    auto in = [&](int port) -> const Shape& { return node(n.inputs.at(static_cast<std::size_t>(port))).shape; };
    if (static_cast<int>(n.inputs.size()) != arity(n.kind)) {
      throw GraphError("node " + std::to_string(n.id) + " (" + to_string(n.kind) + ") expects " +
                       std::to_string(arity(n.kind)) + " inputs, got " + std::to_string(n.inputs.size()));
    }
    switch (n.kind) {
      case NodeKind::MatMul:
        if (in(0).cols != in(1).rows) {
          throw ShapeError("node " + std::to_string(n.id) + ": MatMul inner dimensions differ " +
                           to_string(in(0)) + " x " + to_string(in(1)));
        }
        return Shape{in(0).rows, in(1).cols};
      case NodeKind::Add:
      case NodeKind::Sub:
      case NodeKind::Mul:
      case NodeKind::Div:
        return broadcast_shape(in(0), in(1), n.id);
      case NodeKind::ReduceSum:
        return Shape{1, in(0).cols};
      case NodeKind::Transpose:
        return Shape{in(0).cols, in(0).rows};
      case NodeKind::Input:
      case NodeKind::Constant:
        return n.shape;
      default:
        return in(0);
    }
  }

  friend bool operator==(const Graph& a, const Graph& b) {
    if (a.size() != b.size() || a.inputs_ != b.inputs_ || a.outputs_ != b.outputs_ || a.tables_ != b.tables_) {
      return false;
    }
    for (int i = 0; i < a.size(); ++i) {
      const auto &x = a.nodes_[i], &y = b.nodes_[i];
      if (x.kind != y.kind || x.name != y.name || x.inputs != y.inputs || x.attrs != y.attrs || !(x.shape == y.shape)) {
        return false;
      }
    }
    return true;
  }

  // Used by deserialization, which must accept arbitrary (possibly cyclic)
  // edge lists before validating them.
  void set_raw(std::vector<Node> nodes, std::vector<int> inputs, std::vector<int> outputs,
               std::vector<LutTable> tables) {
    nodes_ = std::move(nodes);
    inputs_ = std::move(inputs);
    outputs_ = std::move(outputs);
    tables_ = std::move(tables);
  }

 private:
  int push(NodeKind kind, std::vector<int> inputs, Attrs attrs, std::string name) {
    Node n;
    n.id = size();
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.attrs = std::move(attrs);
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
  }

  std::optional<int> find_in(const std::vector<int>& ids, std::string_view name) const {
    for (int id : ids) {
      if (nodes_[static_cast<std::size_t>(id)].name == name) return id;
    }
    return std::nullopt;
  }

  std::vector<Node> nodes_;
  std::vector<int> inputs_;
  std::vector<int> outputs_;
  std::vector<LutTable> tables_;
};

/// Deterministic topological order: Kahn's algorithm, ready nodes taken in
/// increasing id order.
inline std::vector<int> topo_order(const Graph& g) {
  const int n = g.size();
  std::vector<int> indegree(static_cast<std::size_t>(n), 0);
  std::vector<std::vector<int>> users(static_cast<std::size_t>(n));
  for (const auto& node : g.nodes()) {
    for (int in : node.inputs) {
      if (in < 0 || in >= n) throw GraphError("node " + std::to_string(node.id) + " references missing node " + std::to_string(in));
      ++indegree[static_cast<std::size_t>(node.id)];
      users[static_cast<std::size_t>(in)].push_back(node.id);
    }
  }
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (int i = 0; i < n; ++i) {
    if (indegree[static_cast<std::size_t>(i)] == 0) ready.push(i);
  }
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(n));
  while (!ready.empty()) {
    const int id = ready.top();
    ready.pop();
    order.push_back(id);
    for (int u : users[static_cast<std::size_t>(id)]) {
      if (--indegree[static_cast<std::size_t>(u)] == 0) ready.push(u);
    }
  }
  if (static_cast<int>(order.size()) != n) throw CycleError("graph contains a cycle");
  return order;
}

/// Checks arity, acyclicity, shape consistency and parameter/output pairing.
inline void validate(const Graph& g) {
  const auto order = topo_order(g);
  for (int id : order) {
    const Node& n = g.node(id);
    if (n.kind == NodeKind::Input || n.kind == NodeKind::Constant) continue;
    const Shape s = g.infer_shape(n);
    if (!(s == n.shape)) {
      throw ShapeError("node " + std::to_string(id) + " (" + to_string(n.kind) + ") declares shape " +
                       to_string(n.shape) + " but its inputs imply " + to_string(s));
    }
  }
  for (int id : g.inputs()) {
    const Node& in = g.node(id);
    if (in.kind != NodeKind::Input) throw GraphError("declared input " + std::to_string(id) + " is not an Input node");
    if (static_cast<InputRole>(in.int_attr("role")) != InputRole::Param) continue;
    int matches = 0;
    for (int out : g.outputs()) {
      if (g.node(out).name == in.name + "_out") ++matches;
    }
    if (matches != 1) throw GraphError("parameter '" + in.name + "' must have exactly one updated output");
  }
  for (int out : g.outputs()) {
    if (g.node(out).kind != NodeKind::Output) throw GraphError("declared output " + std::to_string(out) + " is not an Output node");
  }
}

// ---------------------------------------------------------------------------
// Model description and training-graph construction.

enum class ModelKind { Logistic, Mlp };
enum class Activation { Sigmoid, ReLU };

inline std::string to_string(ModelKind k) { return k == ModelKind::Logistic ? "logistic" : "mlp"; }
inline std::string to_string(Activation a) { return a == Activation::Sigmoid ? "sigmoid" : "relu"; }

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "logistic") return ModelKind::Logistic;
  if (s == "mlp") return ModelKind::Mlp;
  throw GraphError("unsupported model kind '" + s + "'");
}
inline Activation activation_from_string(const std::string& s) {
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "relu") return Activation::ReLU;
  throw GraphError("unsupported activation '" + s + "'");
}

struct ModelSpec {
  ModelKind kind = ModelKind::Logistic;
  std::int64_t features = 1;
  std::vector<std::int64_t> hidden;
  Activation activation = Activation::Sigmoid;
  std::int64_t batch = 8;
  // Learning rate is 2^lr_exponent.
  int lr_exponent = 0;

  double learning_rate() const { return std::ldexp(1.0, lr_exponent); }

  void validate() const {
    if (features < 1) throw GraphError("feature count must be >= 1");
    if (batch < 1) throw GraphError("batch size must be >= 1");
    for (auto h : hidden) {
      if (h < 1) throw GraphError("hidden layer sizes must be >= 1");
    }
    if (kind == ModelKind::Logistic && !hidden.empty()) throw GraphError("logistic model takes no hidden layers");
  }

  /// Layer widths from input to the single output unit.
  std::vector<std::int64_t> layer_sizes() const {
    std::vector<std::int64_t> s{features};
    s.insert(s.end(), hidden.begin(), hidden.end());
    s.push_back(1);
    return s;
  }

  std::int64_t parameter_count() const {
    const auto s = layer_sizes();
    std::int64_t n = 0;
    for (std::size_t l = 0; l + 1 < s.size(); ++l) n += s[l] * s[l + 1] + s[l + 1];
    return n;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline std::string weight_name(std::size_t layer) { return "weight_" + std::to_string(layer); }
inline std::string bias_name(std::size_t layer) { return "bias_" + std::to_string(layer); }

/// Builds the float graph of one SGD step on one mini-batch: forward pass,
/// binary cross-entropy gradient through a sigmoid output, backward pass and
/// the parameter updates w' = w - lr * grad.
inline Graph build_training_graph(const ModelSpec& spec) {
  spec.validate();
  const auto sizes = spec.layer_sizes();
  const std::size_t layers = sizes.size() - 1;
  const std::int64_t B = spec.batch;

  Graph g;
  const int x = g.add_input("X", Shape{B, spec.features}, InputRole::Data);
  const int y = g.add_input("Y", Shape{B, 1}, InputRole::Label);
  std::vector<int> w(layers), b(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    w[l] = g.add_input(weight_name(l), Shape{sizes[l], sizes[l + 1]}, InputRole::Param);
    b[l] = g.add_input(bias_name(l), Shape{1, sizes[l + 1]}, InputRole::Param);
  }

  const NodeKind act = spec.activation == Activation::Sigmoid ? NodeKind::Sigmoid : NodeKind::ReLU;
  const NodeKind act_grad = spec.activation == Activation::Sigmoid ? NodeKind::SigmoidGrad : NodeKind::ReLUGrad;

  // Forward. acts[l] is the input of layer l; pre[l] its affine output.
  std::vector<int> acts{x}, pre(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const int mm = g.add(NodeKind::MatMul, {acts[l], w[l]});
    pre[l] = g.add(NodeKind::Add, {mm, b[l]});
    acts.push_back(g.add(l + 1 == layers ? NodeKind::Sigmoid : act, {pre[l]}));
  }

  // Sigmoid + cross-entropy: dL/dz = p - y.
  int delta = g.add(NodeKind::Sub, {acts[layers], y});
  const int batch_const = g.add_constant(static_cast<double>(B));
  const int lr_const = g.add_constant(spec.learning_rate());

  std::vector<int> new_w(layers), new_b(layers);
  for (std::size_t li = layers; li-- > 0;) {
    const int at = g.add(NodeKind::Transpose, {acts[li]});
    const int gw_sum = g.add(NodeKind::MatMul, {at, delta});
    const int gw = g.add(NodeKind::Div, {gw_sum, batch_const});
    const int gb_sum = g.add(NodeKind::ReduceSum, {delta});
    const int gb = g.add(NodeKind::Div, {gb_sum, batch_const});
    new_w[li] = g.add(NodeKind::Sub, {w[li], g.add(NodeKind::Mul, {gw, lr_const})});
    new_b[li] = g.add(NodeKind::Sub, {b[li], g.add(NodeKind::Mul, {gb, lr_const})});
    if (li > 0) {
      const int wt = g.add(NodeKind::Transpose, {w[li]});
      const int back = g.add(NodeKind::MatMul, {delta, wt});
      const int deriv = g.add(act_grad, {pre[li - 1]});
      delta = g.add(NodeKind::Mul, {back, deriv});
    }
  }
  for (std::size_t l = 0; l < layers; ++l) {
    g.add_output(weight_name(l) + "_out", new_w[l]);
    g.add_output(bias_name(l) + "_out", new_b[l]);
  }
  validate(g);
  return g;
}

/// Set of compute kinds used by a graph (excludes Input/Output/Constant).
inline std::vector<NodeKind> compute_kinds(const Graph& g) {
  std::vector<NodeKind> kinds;
  for (const auto& n : g.nodes()) {
    if (n.kind == NodeKind::Input || n.kind == NodeKind::Output || n.kind == NodeKind::Constant) continue;
    if (std::find(kinds.begin(), kinds.end(), n.kind) == kinds.end()) kinds.push_back(n.kind);
  }
  std::sort(kinds.begin(), kinds.end());
  return kinds;
}

}  // namespace qtrain
