#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "qtrain/bits.hpp"
#include "qtrain/graph_ir.hpp"
#include "qtrain/qparams.hpp"

namespace qtrain {

/// Value carried on a graph edge: real-valued, or integer (plaintext of a
/// ciphertext in the quantized graphs).
using Value = std::variant<FloatTensor, IntTensor>;

inline bool is_int(const Value& v) { return std::holds_alternative<IntTensor>(v); }
inline const IntTensor& as_int(const Value& v) { return std::get<IntTensor>(v); }
inline const FloatTensor& as_float(const Value& v) { return std::get<FloatTensor>(v); }

namespace detail {

template <typename T, typename F>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, const Shape& out_shape, F f) {
  Tensor<T> out(out_shape);
  for (std::int64_t r = 0; r < out_shape.rows; ++r) {
    for (std::int64_t c = 0; c < out_shape.cols; ++c) out(r, c) = f(a.broadcast_at(r, c), b.broadcast_at(r, c));
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(Shape{a.rows(), b.cols()});
  for (std::int64_t i = 0; i < a.rows(); ++i) {
    for (std::int64_t j = 0; j < b.cols(); ++j) {
      T acc{};
      for (std::int64_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

template <typename T>
Tensor<T> reduce_rows(const Tensor<T>& a) {
  Tensor<T> out(Shape{1, a.cols()});
  for (std::int64_t c = 0; c < a.cols(); ++c) {
    T acc{};
    for (std::int64_t r = 0; r < a.rows(); ++r) acc += a(r, c);
    out(0, c) = acc;
  }
  return out;
}

template <typename F>
Value binary(const Node& n, const Value& a, const Value& b, F f) {
  if (is_int(a) != is_int(b)) {
    throw GraphError("node " + std::to_string(n.id) + " (" + to_string(n.kind) + ") mixes integer and real operands");
  }
  if (is_int(a)) return elementwise(as_int(a), as_int(b), n.shape, f);
  return elementwise(as_float(a), as_float(b), n.shape, f);
}

}  // namespace detail

/// Integer value seen by a Lut node's table after bit removal.
inline std::int64_t lut_apply(const LutTable& table, std::int64_t v, int n_r, RoundingMode mode) {
  return table.lookup(remove_low_bits(v, n_r, mode));
}

/// Evaluates a single node given its already-computed operands.
inline Value eval_node(const Graph& g, const Node& n, const std::vector<const Value*>& in,
                       SaturationCounter* sat = nullptr) {
  switch (n.kind) {
    case NodeKind::Constant:
      if (n.attr_or("integer", 0.0) != 0.0) return IntTensor(n.shape, n.int_attr("value"));
      return FloatTensor(n.shape, n.attr("value"));
    case NodeKind::MatMul:
      if (is_int(*in[0]) != is_int(*in[1])) throw GraphError("MatMul mixes integer and real operands");
      if (is_int(*in[0])) return detail::matmul(as_int(*in[0]), as_int(*in[1]));
      return detail::matmul(as_float(*in[0]), as_float(*in[1]));
    case NodeKind::Add:
      return detail::binary(n, *in[0], *in[1], [](auto x, auto y) { return x + y; });
    case NodeKind::Sub:
      return detail::binary(n, *in[0], *in[1], [](auto x, auto y) { return x - y; });
    case NodeKind::Mul:
      return detail::binary(n, *in[0], *in[1], [](auto x, auto y) { return x * y; });
    case NodeKind::Div:
      if (is_int(*in[0])) throw GraphError("integer Div is not supported (node " + std::to_string(n.id) + ")");
      return detail::binary(n, *in[0], *in[1], [](auto x, auto y) { return x / y; });
    case NodeKind::ReduceSum:
      if (is_int(*in[0])) return detail::reduce_rows(as_int(*in[0]));
      return detail::reduce_rows(as_float(*in[0]));
    case NodeKind::Transpose:
      if (is_int(*in[0])) return transpose(as_int(*in[0]));
      return transpose(as_float(*in[0]));
    case NodeKind::Sigmoid:
    case NodeKind::ReLU:
    case NodeKind::SigmoidGrad:
    case NodeKind::ReLUGrad: {
      if (is_int(*in[0])) throw GraphError(to_string(n.kind) + " applied to an integer edge (node " + std::to_string(n.id) + ")");
      FloatTensor out = as_float(*in[0]);
      for (auto& v : out) v = apply_unary(n.kind, v);
      return out;
    }
    case NodeKind::Quantize: {
      const QParams q{n.attr("scale"), static_cast<int>(n.int_attr("bits"))};
      return quantize(as_float(*in[0]), q, sat);
    }
    case NodeKind::Dequantize: {
      const double scale = n.attr("scale");
      const int n_r = static_cast<int>(n.int_attr("n_r"));
      const auto mode = static_cast<RoundingMode>(n.int_attr("rounding"));
      const IntTensor& src = as_int(*in[0]);
      FloatTensor out(src.shape());
      for (std::size_t i = 0; i < src.size(); ++i) {
        out[i] = scale * reconstruct(remove_low_bits(src[i], n_r, mode), n_r, mode);
      }
      return out;
    }
    case NodeKind::Lut: {
      const LutTable& t = g.table(static_cast<int>(n.int_attr("table")));
      const int n_r = static_cast<int>(n.int_attr("n_r"));
      const auto mode = static_cast<RoundingMode>(n.int_attr("rounding"));
      IntTensor out = as_int(*in[0]);
      for (auto& v : out) v = lut_apply(t, v, n_r, mode);
      return out;
    }
    case NodeKind::Output:
      return *in[0];
    case NodeKind::Input:
      break;
  }
  throw GraphError("cannot evaluate node kind " + to_string(n.kind));
}

/// Evaluates every node of `g` and returns the value of each edge, indexed
/// by node id. Input tensors are looked up by input name.
template <typename InputT>
std::vector<Value> evaluate_all(const Graph& g, const NamedTensors<InputT>& inputs, SaturationCounter* sat = nullptr) {
  std::vector<Value> values(static_cast<std::size_t>(g.size()));
  std::vector<const Value*> operands;
  for (int id : topo_order(g)) {
    const Node& n = g.node(id);
    if (n.kind == NodeKind::Input) {
      auto it = inputs.find(n.name);
      if (it == inputs.end()) throw GraphError("missing graph input '" + n.name + "'");
      if (!(it->second.shape() == n.shape)) {
        throw ShapeError("input '" + n.name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                         to_string(n.shape));
      }
      values[static_cast<std::size_t>(id)] = it->second;
      continue;
    }
    operands.clear();
    for (int src : n.inputs) operands.push_back(&values[static_cast<std::size_t>(src)]);
    values[static_cast<std::size_t>(id)] = eval_node(g, n, operands, sat);
  }
  return values;
}

template <typename InputT, typename OutputT = InputT>
NamedTensors<OutputT> evaluate(const Graph& g, const NamedTensors<InputT>& inputs, SaturationCounter* sat = nullptr) {
  const auto values = evaluate_all(g, inputs, sat);
  NamedTensors<OutputT> out;
  for (int id : g.outputs()) out[g.node(id).name] = std::get<Tensor<OutputT>>(values[static_cast<std::size_t>(id)]);
  return out;
}

/// Real-valued evaluation of a float training graph.
inline NamedTensors<double> evaluate_float(const Graph& g, const NamedTensors<double>& inputs) {
  return evaluate<double>(g, inputs);
}

/// Direct interpretation of an integer (quantized, possibly unfused) graph.
inline NamedTensors<std::int64_t> evaluate_integer(const Graph& g, const NamedTensors<std::int64_t>& inputs,
                                                    SaturationCounter* sat = nullptr) {
  return evaluate<std::int64_t>(g, inputs, sat);
}

}  // namespace qtrain
