#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "qtrain/dataset.hpp"
#include "qtrain/interpreter.hpp"
#include "qtrain/pipeline.hpp"
#include "qtrain/tfhe_sim.hpp"

namespace qtrain {

enum class Backend { Simulator, Interpreter };

inline std::string to_string(Backend b) { return b == Backend::Simulator ? "sim" : "interpreter"; }
inline Backend backend_from_string(const std::string& s) {
  if (s == "sim" || s == "simulator") return Backend::Simulator;
  if (s == "interpreter" || s == "interp") return Backend::Interpreter;
  throw Error("unknown backend '" + s + "'");
}

struct TrainConfig {
  int epochs = 10;
  std::int64_t batch = 8;
  int lr_exponent = 0;
  int bits = 4;
  std::uint64_t seed = 42;
  // Batches without a held-out improvement on both tracks before stopping; 0 disables.
  int patience = 20;
  bool shuffle = true;
  RoundingMode rounding = RoundingMode::Truncate;
  int calibration_batches = 64;
  std::uint64_t calibration_seed = 0;
  Backend backend = Backend::Simulator;
  int threads = 1;
  double test_fraction = 0.2;
  // Stop after this many batches in total; 0 means no limit.
  std::int64_t max_batches = 0;
  CostModel cost;

  void validate() const {
    if (batch < 1) throw Error("batch size must be >= 1");
    if (epochs < 0) throw Error("epoch count must be >= 0");
    if (patience < 0) throw Error("patience must be >= 0");
    if (max_batches < 0) throw Error("max_batches must be >= 0");
  }
};

using Parameters = NamedTensors<double>;

/// Per-batch curves for both tracks plus run-level totals.
struct TrainReport {
  ModelSpec spec;
  std::string dataset;
  std::string dataset_hash;
  std::int64_t train_rows = 0;
  std::int64_t test_rows = 0;
  // Held-out accuracy before any update.
  double initial_quant_acc = 0.0;
  double initial_fp32_acc = 0.0;
  // Held-out accuracy after each batch.
  std::vector<double> quant_acc;
  std::vector<double> fp32_acc;
  // Best held-out accuracy over the run (the initial weights included).
  double final_quant_acc = 0.0;
  double final_fp32_acc = 0.0;
  std::int64_t best_quant_batch = 0;
  double last_quant_acc = 0.0;
  double last_fp32_acc = 0.0;
  bool early_stopped = false;
  CostReport batch_cost;
  double total_latency_s = 0.0;
  SaturationCounter input_saturation;
  SaturationCounter weight_saturation;
  // Accumulator overflows and table-domain violations seen by the simulator.
  std::uint64_t fatal_errors = 0;
  std::string fatal_message;
  // Largest |value| observed per partition, across all batches.
  std::vector<std::int64_t> partition_max_abs;
  NamedTensors<std::int64_t> final_codes;
  Parameters final_weights;
  Parameters final_fp32_weights;

  std::int64_t batches_per_epoch = 0;

  std::int64_t batches() const { return static_cast<std::int64_t>(quant_acc.size()); }

  /// Mean held-out accuracy over the last epoch's worth of batches: the
  /// level the noisy SGD curve settles at.
  static double plateau(const std::vector<double>& curve, std::int64_t window) {
    if (curve.empty()) return 0.0;
    const auto n = static_cast<std::size_t>(std::clamp<std::int64_t>(window, 1, static_cast<std::int64_t>(curve.size())));
    return std::accumulate(curve.end() - static_cast<std::ptrdiff_t>(n), curve.end(), 0.0) / static_cast<double>(n);
  }
  double plateau_quant_acc() const { return plateau(quant_acc, batches_per_epoch); }
  double plateau_fp32_acc() const { return plateau(fp32_acc, batches_per_epoch); }

  /// Best held-out accuracy within the first `n` batches (initial weights included).
  double best_quant_within(std::int64_t n) const {
    double best = initial_quant_acc;
    for (std::int64_t i = 0; i < std::min(n, batches()); ++i) best = std::max(best, quant_acc[static_cast<std::size_t>(i)]);
    return best;
  }
};

namespace detail {

inline double activate(Activation a, double v) { return a == Activation::Sigmoid ? sigmoid(v) : std::max(v, 0.0); }

}  // namespace detail

/// Output-unit logits of the model described by `spec` on every row of `x`.
inline std::vector<double> predict_logits(const ModelSpec& spec, const Parameters& p, const FloatTensor& x) {
  const auto sizes = spec.layer_sizes();
  if (x.cols() != sizes.front()) {
    throw ShapeError("dataset has " + std::to_string(x.cols()) + " features, model expects " + std::to_string(sizes.front()));
  }
  FloatTensor h = x;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const FloatTensor& w = p.at(weight_name(l));
    const FloatTensor& b = p.at(bias_name(l));
    FloatTensor z(Shape{h.rows(), w.cols()});
    for (std::int64_t r = 0; r < h.rows(); ++r) {
      for (std::int64_t c = 0; c < w.cols(); ++c) {
        double acc = b(0, c);
        for (std::int64_t k = 0; k < h.cols(); ++k) acc += h(r, k) * w(k, c);
        z(r, c) = l + 2 == sizes.size() ? acc : detail::activate(spec.activation, acc);
      }
    }
    h = std::move(z);
  }
  std::vector<double> out(static_cast<std::size_t>(h.rows()));
  for (std::int64_t r = 0; r < h.rows(); ++r) out[static_cast<std::size_t>(r)] = h(r, 0);
  return out;
}

/// Fraction of rows where sigmoid(logit) >= 0.5 matches the label.
inline double evaluate(const ModelSpec& spec, const Parameters& p, const Dataset& d) {
  if (d.rows() == 0) throw DataError("cannot evaluate on an empty dataset");
  const auto logits = predict_logits(spec, p, d.x);
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) correct += (logits[i] >= 0.0 ? 1 : 0) == d.y[i];
  return static_cast<double>(correct) / static_cast<double>(d.rows());
}

/// Weights and biases drawn from Uniform(-1, 1).
inline Parameters initial_parameters(const ModelSpec& spec, std::uint64_t seed) {
  const auto sizes = spec.layer_sizes();
  std::uint64_t state = seed ^ 0x5851F42D4C957F2DULL;
  Parameters p;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    FloatTensor w(Shape{sizes[l], sizes[l + 1]});
    FloatTensor b(Shape{1, sizes[l + 1]});
    for (auto& v : w) v = detail::uniform_pm1(state);
    for (auto& v : b) v = detail::uniform_pm1(state);
    p[weight_name(l)] = std::move(w);
    p[bias_name(l)] = std::move(b);
  }
  return p;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> batch_schedule(std::int64_t rows, const TrainConfig& cfg) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> order(static_cast<std::size_t>(rows));
  for (int e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (cfg.shuffle) {
      std::mt19937_64 rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(e));
      std::shuffle(order.begin(), order.end(), rng);
    }
    // The trailing partial batch is dropped: the circuit has a fixed batch size.
    for (std::size_t s = 0; s + static_cast<std::size_t>(cfg.batch) <= order.size(); s += static_cast<std::size_t>(cfg.batch)) {
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                       order.begin() + static_cast<std::ptrdiff_t>(s) + cfg.batch);
    }
  }
  if (cfg.max_batches > 0 && static_cast<std::int64_t>(out.size()) > cfg.max_batches) {
    out.resize(static_cast<std::size_t>(cfg.max_batches));
  }
  return out;
}

inline std::pair<FloatTensor, FloatTensor> gather(const Dataset& d, const std::vector<std::size_t>& rows) {
  FloatTensor x(Shape{static_cast<std::int64_t>(rows.size()), d.features()});
  FloatTensor y(Shape{static_cast<std::int64_t>(rows.size()), 1});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::int64_t c = 0; c < d.features(); ++c) x(static_cast<std::int64_t>(i), c) = d.x(static_cast<std::int64_t>(rows[i]), c);
    y(static_cast<std::int64_t>(i), 0) = d.y[rows[i]];
  }
  return {std::move(x), std::move(y)};
}

}  // namespace detail

inline PipelineOptions pipeline_options(const TrainConfig& cfg) {
  PipelineOptions o;
  o.quant.bits = cfg.bits;
  o.quant.rounding = cfg.rounding;
  o.calibration.batches = cfg.calibration_batches;
  o.calibration.seed = cfg.calibration_seed;
  o.calibration.threads = cfg.threads;
  return o;
}

/// Quantized training on already-split, already-scaled data, with the fp32
/// reference run in lockstep on the same batches.
inline TrainReport train_split(const Dataset& train_set, const Dataset& test_set, ModelSpec spec, const TrainConfig& cfg,
                               const CompiledModel* prebuilt = nullptr) {
  cfg.validate();
  if (train_set.rows() == 0) throw DataError("training set is empty");
  if (train_set.features() != spec.features) {
    throw DataError("dataset has " + std::to_string(train_set.features()) + " features, model expects " +
                    std::to_string(spec.features));
  }
  spec.batch = cfg.batch;
  spec.lr_exponent = cfg.lr_exponent;
  CompiledModel local;
  if (!prebuilt) local = compile_model(spec, pipeline_options(cfg));
  const CompiledModel& m = prebuilt ? *prebuilt : local;
  if (!(m.spec == spec)) throw Error("prebuilt circuit was compiled for a different model");

  TrainReport rep;
  rep.spec = spec;
  rep.dataset = train_set.provenance;
  rep.train_rows = train_set.rows();
  rep.test_rows = test_set.rows();
  rep.batches_per_epoch = train_set.rows() / cfg.batch;
  rep.batch_cost = static_cost(m.circuit, cfg.cost);
  rep.partition_max_abs.assign(m.circuit.partitions.size(), 0);

  const QParams qx = m.input_qparams("X");
  const QParams qy = m.input_qparams("Y");
  Parameters fp32 = initial_parameters(spec, cfg.seed);
  NamedTensors<std::int64_t> codes;
  std::map<std::string, QParams> qp;
  for (const auto& [name, t] : fp32) {
    qp[name] = m.input_qparams(name);
    codes[name] = quantize(t, qp[name], &rep.weight_saturation);
  }
  auto dequantized = [&] {
    Parameters p;
    for (const auto& [name, c] : codes) p[name] = dequantize(c, qp.at(name));
    return p;
  };

  rep.initial_quant_acc = evaluate(spec, dequantized(), test_set);
  rep.initial_fp32_acc = evaluate(spec, fp32, test_set);
  rep.final_quant_acc = rep.last_quant_acc = rep.initial_quant_acc;
  rep.final_fp32_acc = rep.last_fp32_acc = rep.initial_fp32_acc;
  std::int64_t stall_q = 0, stall_f = 0;

  for (const auto& rows : detail::batch_schedule(train_set.rows(), cfg)) {
    auto [xb, yb] = detail::gather(train_set, rows);

    NamedTensors<std::int64_t> in = codes;
    in["X"] = quantize(xb, qx, &rep.input_saturation);
    in["Y"] = quantize(yb, qy);
    NamedTensors<std::int64_t> out;
    if (cfg.backend == Backend::Simulator) {
      try {
        auto [o, cost] = run_circuit(m.circuit, in, cfg.cost);
        out = std::move(o);
        for (std::size_t i = 0; i < cost.partition_max_abs.size(); ++i) {
          rep.partition_max_abs[i] = std::max(rep.partition_max_abs[i], cost.partition_max_abs[i]);
        }
      } catch (const SimError& e) {
        ++rep.fatal_errors;
        rep.fatal_message = e.what();
        break;
      }
    } else {
      out = evaluate_integer(m.integer_graph(), in);
    }
    // Decrypt, then re-encrypt onto each parameter's grid.
    for (auto& [name, c] : codes) {
      const Node& o = m.integer_graph().node(*m.integer_graph().find_output(name + "_out"));
      c = quantize(dequantize(out.at(name + "_out"), node_qparams(o)), qp.at(name), &rep.weight_saturation);
    }
    rep.total_latency_s += rep.batch_cost.latency_s;

    Parameters fin = fp32;
    fin["X"] = xb;
    fin["Y"] = yb;
    const auto fout = evaluate_float(m.float_graph, fin);
    for (auto& [name, t] : fp32) t = fout.at(name + "_out");

    const double aq = evaluate(spec, dequantized(), test_set);
    const double af = evaluate(spec, fp32, test_set);
    rep.quant_acc.push_back(aq);
    rep.fp32_acc.push_back(af);
    rep.last_quant_acc = aq;
    rep.last_fp32_acc = af;
    if (aq > rep.final_quant_acc) {
      rep.final_quant_acc = aq;
      rep.best_quant_batch = rep.batches();
      stall_q = 0;
    } else {
      ++stall_q;
    }
    if (af > rep.final_fp32_acc) {
      rep.final_fp32_acc = af;
      stall_f = 0;
    } else {
      ++stall_f;
    }
    if (cfg.patience > 0 && stall_q >= cfg.patience && stall_f >= cfg.patience) {
      rep.early_stopped = true;
      break;
    }
  }
  rep.final_codes = codes;
  rep.final_weights = dequantized();
  rep.final_fp32_weights = fp32;
  return rep;
}

/// Splits 80/20 (stratified), scales features to [-1, 1] on the training
/// part, then trains.
inline TrainReport train(const Dataset& data, const ModelSpec& spec, const TrainConfig& cfg,
                         const CompiledModel* prebuilt = nullptr) {
  cfg.validate();
  if (data.rows() == 0) throw DataError("dataset is empty");
  data.validate();
  const Split s = stratified_split(data, cfg.test_fraction, cfg.seed);
  const MinMaxScaler scaler = MinMaxScaler::fit(s.train);
  TrainReport r = train_split(scaler.apply(s.train), scaler.apply(s.test), spec, cfg, prebuilt);
  r.dataset = data.provenance;
  r.dataset_hash = dataset_hash(data);
  return r;
}

/// The fp32 track alone: held-out accuracy after each batch.
inline std::vector<double> train_fp32_reference(const Dataset& data, const ModelSpec& spec, const TrainConfig& cfg) {
  cfg.validate();
  const Split s = stratified_split(data, cfg.test_fraction, cfg.seed);
  const MinMaxScaler scaler = MinMaxScaler::fit(s.train);
  const Dataset tr = scaler.apply(s.train), te = scaler.apply(s.test);
  ModelSpec sp = spec;
  sp.batch = cfg.batch;
  sp.lr_exponent = cfg.lr_exponent;
  const Graph g = build_training_graph(sp);
  Parameters p = initial_parameters(sp, cfg.seed);
  std::vector<double> curve;
  for (const auto& rows : detail::batch_schedule(tr.rows(), cfg)) {
    auto [xb, yb] = detail::gather(tr, rows);
    Parameters in = p;
    in["X"] = xb;
    in["Y"] = yb;
    const auto out = evaluate_float(g, in);
    for (auto& [name, t] : p) t = out.at(name + "_out");
    curve.push_back(evaluate(sp, p, te));
  }
  return curve;
}

/// Curves as whitespace-separated columns after a commented header.
inline std::string to_text(const TrainReport& r) {
  std::ostringstream os;
  os << "# model " << to_string(r.spec.kind);
  for (auto h : r.spec.hidden) os << " hidden=" << h;
  if (!r.spec.hidden.empty()) os << " activation=" << to_string(r.spec.activation);
  os << " d=" << r.spec.features << " batch=" << r.spec.batch << " lr=2^" << r.spec.lr_exponent << "\n";
  os << "# dataset " << r.dataset << " hash=" << r.dataset_hash << " train=" << r.train_rows << " test=" << r.test_rows
     << "\n";
  os << "# batches " << r.batches() << (r.early_stopped ? " (early stop)" : "") << "\n";
  os << "# best_quant_acc " << r.final_quant_acc << " at batch " << r.best_quant_batch << "\n";
  os << "# best_fp32_acc " << r.final_fp32_acc << "\n";
  os << "# plateau_quant_acc " << r.plateau_quant_acc() << " plateau_fp32_acc " << r.plateau_fp32_acc() << "\n";
  os << "# last_quant_acc " << r.last_quant_acc << " last_fp32_acc " << r.last_fp32_acc << "\n";
  os << "# batch_latency_s " << r.batch_cost.latency_s << " total_latency_s " << r.total_latency_s << "\n";
  os << "# pbs_per_batch " << r.batch_cost.total_pbs() << " levelled_per_batch " << r.batch_cost.levelled_ops << "\n";
  os << "# input_clipped " << r.input_saturation.clipped << "/" << r.input_saturation.total << " weight_clipped "
     << r.weight_saturation.clipped << "/" << r.weight_saturation.total << "\n";
  os << "# fatal_errors " << r.fatal_errors << (r.fatal_message.empty() ? "" : " " + r.fatal_message) << "\n";
  os << "batch quant_acc fp32_acc\n";
  os << 0 << " " << r.initial_quant_acc << " " << r.initial_fp32_acc << "\n";
  for (std::size_t i = 0; i < r.quant_acc.size(); ++i) os << i + 1 << " " << r.quant_acc[i] << " " << r.fp32_acc[i] << "\n";
  return os.str();
}

}  // namespace qtrain
