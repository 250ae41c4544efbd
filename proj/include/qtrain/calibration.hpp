#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "qtrain/graph_ir.hpp"
#include "qtrain/interpreter.hpp"

namespace qtrain {

/// Running range of one edge.
struct EdgeStats {
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  std::uint64_t count = 0;

  double abs_max() const { return count == 0 ? 0.0 : std::max(std::fabs(min), std::fabs(max)); }

  void observe(double v) {
    min = std::min(min, v);
    max = std::max(max, v);
    ++count;
  }
  void merge(const EdgeStats& o) {
    min = std::min(min, o.min);
    max = std::max(max, o.max);
    count += o.count;
  }
  friend bool operator==(const EdgeStats&, const EdgeStats&) = default;
};

/// Per-edge statistics, indexed by the id of the producing node.
struct CalibrationStats {
  std::vector<EdgeStats> edges;

  const EdgeStats& at(int node_id) const { return edges.at(static_cast<std::size_t>(node_id)); }

  void merge(const CalibrationStats& o) {
    if (edges.empty()) {
      edges = o.edges;
      return;
    }
    if (o.edges.size() != edges.size()) throw CalibrationError("cannot merge statistics of different graphs");
    for (std::size_t i = 0; i < edges.size(); ++i) edges[i].merge(o.edges[i]);
  }
  friend bool operator==(const CalibrationStats&, const CalibrationStats&) = default;
};

struct CalibrationConfig {
  int batches = 64;
  std::uint64_t seed = 0;
  // Worker threads; the merged result does not depend on this value.
  int threads = 1;

  void validate() const {
    if (batches < 1) throw CalibrationError("calibration needs at least one batch");
  }
};

namespace detail {

// splitmix64: a fixed, platform-independent generator so calibration data is
// identical everywhere for a given seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline double uniform_pm1(std::uint64_t& state) {
  const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;  // [0, 1)
  return 2.0 * u - 1.0;
}

}  // namespace detail

/// One calibration batch for the inputs of `g`: data and parameters
/// ~ Uniform(-1, 1), labels ~ Bernoulli(0.5) in {0, 1}.
inline NamedTensors<double> sample_calibration_batch(const Graph& g, std::uint64_t seed, int batch_index) {
  std::uint64_t state = seed * 0x100000001B3ULL + static_cast<std::uint64_t>(batch_index) * 0x9E3779B97F4A7C15ULL;
  NamedTensors<double> out;
  for (int id : g.inputs()) {
    const Node& n = g.node(id);
    FloatTensor t(n.shape);
    const bool label = static_cast<InputRole>(n.int_attr("role")) == InputRole::Label;
    for (auto& v : t) v = label ? static_cast<double>(detail::splitmix64(state) >> 63) : detail::uniform_pm1(state);
    out[n.name] = std::move(t);
  }
  return out;
}

inline std::vector<NamedTensors<double>> sample_calibration_data(const CalibrationConfig& cfg, const Graph& g) {
  cfg.validate();
  std::vector<NamedTensors<double>> batches;
  for (int b = 0; b < cfg.batches; ++b) batches.push_back(sample_calibration_batch(g, cfg.seed, b));
  return batches;
}

inline std::vector<NamedTensors<double>> sample_calibration_data(const CalibrationConfig& cfg, const ModelSpec& spec) {
  return sample_calibration_data(cfg, build_training_graph(spec));
}

inline CalibrationStats stats_for_batch(const Graph& g, const NamedTensors<double>& batch) {
  const auto values = evaluate_all(g, batch);
  CalibrationStats s;
  s.edges.resize(values.size());
  for (std::size_t id = 0; id < values.size(); ++id) {
    for (double v : as_float(values[id])) {
      if (!std::isfinite(v)) {
        throw CalibrationError("non-finite value on edge " + std::to_string(id) + " during calibration");
      }
      s.edges[id].observe(v);
    }
  }
  return s;
}

/// Runs the float graph on every calibration batch and records the range of
/// every edge. Batches are split across `cfg.threads` workers and merged with
/// a commutative min/max reduction.
inline CalibrationStats collect_stats(const Graph& g, const CalibrationConfig& cfg) {
  cfg.validate();
  const int workers = std::max(1, std::min(cfg.threads, cfg.batches));
  std::vector<CalibrationStats> partial(static_cast<std::size_t>(workers));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  auto run = [&](int w) {
    try {
      for (int b = w; b < cfg.batches; b += workers) {
        partial[static_cast<std::size_t>(w)].merge(stats_for_batch(g, sample_calibration_batch(g, cfg.seed, b)));
      }
    } catch (...) {
      errors[static_cast<std::size_t>(w)] = std::current_exception();
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  CalibrationStats total;
  for (const auto& p : partial) total.merge(p);
  return total;
}

inline nlohmann::json to_json(const CalibrationStats& s) {
  nlohmann::json edges = nlohmann::json::object();
  for (std::size_t id = 0; id < s.edges.size(); ++id) {
    const auto& e = s.edges[id];
    edges[std::to_string(id)] = {{"min", e.min}, {"max", e.max}, {"abs_max", e.abs_max()}, {"count", e.count}};
  }
  return {{"format", "qtrain-stats"}, {"version", 1}, {"edges", edges}};
}

inline CalibrationStats stats_from_json(const nlohmann::json& j) {
  CalibrationStats s;
  const auto& edges = j.at("edges");
  s.edges.resize(edges.size());
  for (const auto& [key, e] : edges.items()) {
    const auto id = static_cast<std::size_t>(std::stoul(key));
    if (id >= s.edges.size()) throw CalibrationError("stats edge id out of range: " + key);
    s.edges[id] = EdgeStats{e.at("min").get<double>(), e.at("max").get<double>(), e.at("count").get<std::uint64_t>()};
  }
  return s;
}

}  // namespace qtrain
