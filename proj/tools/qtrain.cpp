// qtrain: calibrate, compile, train and benchmark quantized training circuits.

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "qtrain/qtrain.hpp"

namespace {

using namespace qtrain;

struct ModelFlags {
  std::string model = "logistic";
  std::int64_t d = 30;
  std::vector<std::int64_t> hidden;
  std::string activation = "relu";
  std::int64_t batch = 8;
  double lr = 1.0;
  int bits = 4;
  std::string rounding = "truncate";
  int calibration_batches = 64;
  std::uint64_t calibration_seed = 0;
};

void add_model_flags(CLI::App* app, ModelFlags& f) {
  app->add_option("--model", f.model, "logistic | mlp")->check(CLI::IsMember({"logistic", "mlp"}));
  app->add_option("--d", f.d, "feature count")->check(CLI::PositiveNumber);
  app->add_option("--hidden", f.hidden, "hidden layer sizes (mlp only)");
  app->add_option("--activation", f.activation, "hidden activation")->check(CLI::IsMember({"sigmoid", "relu"}));
  app->add_option("--batch", f.batch, "batch size")->check(CLI::PositiveNumber);
  app->add_option("--lr", f.lr, "learning rate, a power of two");
  app->add_option("--bits", f.bits, "quantization bit-width")->check(CLI::Range(2, 8));
  app->add_option("--rounding", f.rounding, "bit removal mode")->check(CLI::IsMember({"truncate", "nearest"}));
  app->add_option("--calibration-batches", f.calibration_batches, "calibration batches")->check(CLI::PositiveNumber);
  app->add_option("--calibration-seed", f.calibration_seed, "calibration data seed");
}

int lr_exponent(double lr) {
  int e = 0;
  const double m = std::frexp(lr, &e);
  if (!(lr > 0) || m != 0.5) throw CLI::ValidationError("--lr", "learning rate must be a power of two");
  return e - 1;
}

ModelSpec spec_from(const ModelFlags& f) {
  ModelSpec s;
  s.kind = model_kind_from_string(f.model);
  s.features = f.d;
  s.hidden = f.hidden;
  s.activation = activation_from_string(f.activation);
  s.batch = f.batch;
  s.lr_exponent = lr_exponent(f.lr);
  if (s.kind == ModelKind::Logistic && !s.hidden.empty()) {
    throw CLI::ValidationError("--hidden", "hidden layers are only valid with --model mlp");
  }
  if (s.kind == ModelKind::Mlp && s.hidden.empty()) s.hidden = {30};
  s.validate();
  return s;
}

PipelineOptions pipeline_from(const ModelFlags& f, int threads) {
  PipelineOptions o;
  o.quant.bits = f.bits;
  o.quant.rounding = rounding_from_string(f.rounding);
  o.calibration.batches = f.calibration_batches;
  o.calibration.seed = f.calibration_seed;
  o.calibration.threads = threads;
  return o;
}

int default_threads() {
  if (const char* env = std::getenv("QTRAIN_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
    std::cerr << "qtrain: ignoring invalid QTRAIN_THREADS='" << env << "'\n";
  }
  return 16;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
}

nlohmann::json weights_json(const Parameters& p) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, t] : p) {
    j[name] = {{"shape", {t.rows(), t.cols()}}, {"values", std::vector<double>(t.begin(), t.end())}};
  }
  return j;
}

Parameters weights_from_json(const nlohmann::json& j) {
  Parameters p;
  for (const auto& [name, v] : j.items()) {
    const auto shape = v.at("shape").get<std::vector<std::int64_t>>();
    const auto values = v.at("values").get<std::vector<double>>();
    FloatTensor t(Shape{shape.at(0), shape.at(1)});
    if (values.size() != t.size()) throw Error("weights '" + name + "' do not match their shape");
    std::copy(values.begin(), values.end(), t.begin());
    p[name] = std::move(t);
  }
  return p;
}

std::string bench_table(int threads) {
  std::ostringstream os;
  os << "source        model                 params batch latency_s threads WGC/s/T\n";
  auto row = [&](const std::string& src, const std::string& model, std::int64_t params, std::int64_t batch, double lat,
                 int thr) {
    const double wgc =
        wgc_rate(static_cast<double>(params), static_cast<double>(batch), lat, static_cast<double>(thr));
    os << std::left << std::setw(14) << src << std::setw(22) << model << std::right << std::setw(6) << params << " "
       << std::setw(5) << batch << " " << std::setw(9) << std::fixed << std::setprecision(2) << lat << " " << std::setw(7)
       << thr << " " << std::setw(7) << wgc << "\n";
  };
  row("published", "MLP (prior work)", 2720, 60, 144, 48);
  row("published", "MLP 30-30 breast", 930, 8, 149, 16);
  struct Case {
    const char* name;
    std::int64_t d;
    std::vector<std::int64_t> hidden;
  };
  for (const Case& c : {Case{"logistic d=30", 30, {}}, Case{"MLP d=30 h=30", 30, {30}}, Case{"logistic d=10", 10, {}},
                        Case{"MLP d=10 h=15", 10, {15}}}) {
    ModelSpec s;
    s.kind = c.hidden.empty() ? ModelKind::Logistic : ModelKind::Mlp;
    s.features = c.d;
    s.hidden = c.hidden;
    s.activation = Activation::ReLU;
    PipelineOptions o;
    o.calibration.threads = threads;
    const CompiledModel m = compile_model(s, o);
    CostModel cm;
    cm.threads = threads;
    const CostReport r = static_cost(m.circuit, cm);
    row("simulated", c.name, s.parameter_count(), s.batch, r.latency_s, threads);
  }
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantized training circuits under TFHE semantics"};
  app.require_subcommand(1);
  int threads = default_threads();
  app.add_option("--threads", threads, "worker / cost-model threads (default $QTRAIN_THREADS or 16)")
      ->check(CLI::PositiveNumber);

  // calibrate
  ModelFlags cal_f;
  std::string cal_out;
  auto* cal = app.add_subcommand("calibrate", "collect edge statistics of a training graph");
  add_model_flags(cal, cal_f);
  cal->add_option("--out", cal_out, "statistics file (default stdout)");

  // compile
  ModelFlags cmp_f;
  std::string cmp_out, cmp_cost, cmp_graph;
  bool refresh = false;
  auto* cmp = app.add_subcommand("compile", "compile a training graph to a partitioned circuit");
  add_model_flags(cmp, cmp_f);
  cmp->add_option("--out", cmp_out, "circuit dump (default stdout)");
  cmp->add_option("--cost", cmp_cost, "cost report text (default stderr)");
  cmp->add_option("--graph", cmp_graph, "also write the float training graph");
  cmp->add_flag("--refresh-weights", refresh, "cost an extra weight-refresh PBS per parameter");

  // train
  ModelFlags tr_f;
  std::string tr_dataset, tr_label, tr_out, tr_manifest, tr_weights, tr_backend = "sim";
  TrainConfig tr_cfg;
  bool no_shuffle = false;
  auto* tr = app.add_subcommand("train", "train on a dataset through the simulated circuit");
  add_model_flags(tr, tr_f);
  tr->add_option("--dataset", tr_dataset, "CSV path or synthetic:<kind>[:n[:d[:seed]]]")->required();
  tr->add_option("--label", tr_label, "label column (default last)");
  tr->add_option("--epochs", tr_cfg.epochs, "epochs")->check(CLI::NonNegativeNumber);
  tr->add_option("--seed", tr_cfg.seed, "split / init / shuffle seed");
  tr->add_option("--patience", tr_cfg.patience, "early-stop patience in batches, 0 disables")->check(CLI::NonNegativeNumber);
  tr->add_option("--max-batches", tr_cfg.max_batches, "cap on total batches")->check(CLI::NonNegativeNumber);
  tr->add_option("--backend", tr_backend, "sim | interpreter")->check(CLI::IsMember({"sim", "interpreter"}));
  tr->add_flag("--no-shuffle", no_shuffle, "keep dataset order");
  tr->add_option("--out", tr_out, "report file (default stdout)");
  tr->add_option("--manifest", tr_manifest, "run manifest file");
  tr->add_option("--weights-out", tr_weights, "final dequantized weights (JSON)");

  // eval
  std::string ev_manifest, ev_weights;
  auto* ev = app.add_subcommand("eval", "held-out accuracy of saved weights");
  ev->add_option("--manifest", ev_manifest, "manifest of the training run")->required();
  ev->add_option("--weights", ev_weights, "weights file from train --weights-out")->required();

  // report
  std::string rp_manifest, rp_out;
  bool rp_check = false;
  auto* rp = app.add_subcommand("report", "rerun a training job from its manifest");
  rp->add_option("--manifest", rp_manifest, "manifest file")->required();
  rp->add_option("--out", rp_out, "report file (default stdout)");
  rp->add_flag("--check", rp_check, "fail unless the rerun matches the stored report");

  // bench
  std::string bn_out;
  auto* bn = app.add_subcommand("bench", "WGC/s/T table next to published figures");
  bn->add_option("--out", bn_out, "table file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*cal) {
      const ModelSpec s = spec_from(cal_f);
      const auto o = pipeline_from(cal_f, threads);
      const Graph g = build_training_graph(s);
      write_text(cal_out, to_json(collect_stats(g, o.calibration)).dump(1) + "\n");
    } else if (*cmp) {
      const ModelSpec s = spec_from(cmp_f);
      const CompiledModel m = compile_model(s, pipeline_from(cmp_f, threads));
      CostModel cm;
      cm.threads = threads;
      cm.refresh_weights = refresh;
      auto dump = to_json(m.circuit);
      const CostReport r = static_cost(m.circuit, cm);
      dump["cost"] = to_json(r);
      write_text(cmp_out, dump.dump(1) + "\n");
      if (!cmp_graph.empty()) write_text(cmp_graph, serialize(m.float_graph));
      if (cmp_cost.empty()) {
        std::cerr << to_text(r);
      } else {
        write_text(cmp_cost, to_text(r));
      }
    } else if (*tr) {
      const ModelSpec s = spec_from(tr_f);
      const DatasetSource src{tr_dataset, tr_label};
      const Dataset d = load_dataset(src);
      if (d.rejected_rows) std::cerr << "qtrain: skipped " << d.rejected_rows << " rows\n";
      tr_cfg.batch = s.batch;
      tr_cfg.lr_exponent = s.lr_exponent;
      tr_cfg.bits = tr_f.bits;
      tr_cfg.rounding = rounding_from_string(tr_f.rounding);
      tr_cfg.calibration_batches = tr_f.calibration_batches;
      tr_cfg.calibration_seed = tr_f.calibration_seed;
      tr_cfg.backend = backend_from_string(tr_backend);
      tr_cfg.shuffle = !no_shuffle;
      tr_cfg.threads = threads;
      tr_cfg.cost.threads = threads;
      ModelSpec spec = s;
      spec.features = d.features();
      if (tr->count("--d") && s.features != d.features()) {
        throw DataError("--d " + std::to_string(s.features) + " does not match the dataset's " +
                        std::to_string(d.features()) + " features");
      }
      const TrainReport r = train(d, spec, tr_cfg);
      write_text(tr_out, to_text(r));
      if (!tr_weights.empty()) write_text(tr_weights, weights_json(r.final_weights).dump(1) + "\n");
      if (!tr_manifest.empty()) {
        RunManifest m;
        m.dataset = src;
        m.dataset_hash = dataset_hash(d);
        m.spec = spec;
        m.config = tr_cfg;
        m.report_path = tr_out;
        m.manifest_path = tr_manifest;
        write_text(tr_manifest, to_json(m).dump(1) + "\n");
      }
    } else if (*ev) {
      const RunManifest m = read_manifest(ev_manifest);
      std::ifstream in(ev_weights);
      if (!in) throw Error("cannot open '" + ev_weights + "'");
      const Parameters p = weights_from_json(nlohmann::json::parse(in));
      const Dataset d = load_dataset(m.dataset);
      const Split sp = stratified_split(d, m.config.test_fraction, m.config.seed);
      const MinMaxScaler sc = MinMaxScaler::fit(sp.train);
      std::cout << "accuracy " << evaluate(m.spec, p, sc.apply(sp.test)) << "\n";
    } else if (*rp) {
      const RunManifest m = read_manifest(rp_manifest);
      const std::string text = to_text(replay(m));
      if (rp_check) {
        std::ifstream in(m.report_path);
        if (!in) throw Error("manifest report '" + m.report_path + "' is missing");
        std::stringstream stored;
        stored << in.rdbuf();
        if (stored.str() != text) {
          std::cerr << "qtrain: rerun differs from " << m.report_path << "\n";
          return 3;
        }
        std::cerr << "qtrain: rerun matches " << m.report_path << "\n";
      }
      write_text(rp_out, text);
    } else if (*bn) {
      write_text(bn_out, bench_table(threads));
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "qtrain: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
