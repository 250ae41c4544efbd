#pragma once

#include <random>
#include <string>

#include "qtrain/pipeline.hpp"

namespace testutil {

inline qtrain::ModelSpec logistic(std::int64_t d, std::int64_t batch) {
  qtrain::ModelSpec s;
  s.features = d;
  s.batch = batch;
  return s;
}

inline qtrain::ModelSpec mlp(std::int64_t d, std::int64_t h, std::int64_t batch,
                             qtrain::Activation a = qtrain::Activation::ReLU) {
  qtrain::ModelSpec s = logistic(d, batch);
  s.kind = qtrain::ModelKind::Mlp;
  s.hidden = {h};
  s.activation = a;
  return s;
}

/// Random encrypted-input codes for a compiled model: features and parameters
/// ~ U(-1, 1), labels in {0, 1}, each quantized with its input quantizer.
inline qtrain::NamedTensors<std::int64_t> random_codes(const qtrain::Graph& qg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  qtrain::NamedTensors<std::int64_t> out;
  for (int id : qg.inputs()) {
    const qtrain::Node& n = qg.node(id);
    const bool label = static_cast<qtrain::InputRole>(n.int_attr("role")) == qtrain::InputRole::Label;
    qtrain::FloatTensor t(n.shape);
    for (auto& v : t) v = label ? static_cast<double>(rng() % 2) : u(rng);
    out[n.name] = qtrain::quantize(t, qtrain::input_qparams(qg, n.name));
  }
  return out;
}

}  // namespace testutil
