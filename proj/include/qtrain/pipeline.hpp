#pragma once

#include <memory>

#include "qtrain/calibration.hpp"
#include "qtrain/compiler.hpp"
#include "qtrain/graph_ir.hpp"
#include "qtrain/quantizer.hpp"

namespace qtrain {

struct PipelineOptions {
  QuantizeOptions quant;
  CalibrationConfig calibration;
  CompileOptions compile;
};

/// Every stage from the float training graph to the compiled circuit.
struct CompiledModel {
  ModelSpec spec;
  Graph float_graph;
  CalibrationStats stats;
  Graph quantized_graph;  // Dequantize / float / Quantize chains still explicit
  FusionResult fused;     // integer graph with chains replaced by Lut nodes
  CompiledCircuit circuit;

  const Graph& integer_graph() const { return fused.graph; }
  QParams input_qparams(const std::string& name) const { return qtrain::input_qparams(quantized_graph, name); }
};

inline CompiledModel compile_model(const ModelSpec& spec, const PipelineOptions& opt = {}) {
  spec.validate();
  CompiledModel m;
  m.spec = spec;
  m.float_graph = build_training_graph(spec);
  m.stats = collect_stats(m.float_graph, opt.calibration);
  m.quantized_graph = quantize_graph(m.float_graph, m.stats, opt.quant);
  m.fused = fuse_float_chains(m.quantized_graph);
  m.circuit = partition_graph(m.fused.graph, opt.compile);
  return m;
}

}  // namespace qtrain
