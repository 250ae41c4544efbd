#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "qtrain/dataset.hpp"
#include "qtrain/trainer.hpp"

namespace qtrain {

inline constexpr const char* kToolVersion = "0.1.0";

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"kind", to_string(s.kind)},       {"features", s.features},   {"hidden", s.hidden},
          {"activation", to_string(s.activation)}, {"batch", s.batch}, {"lr_exponent", s.lr_exponent}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.kind = model_kind_from_string(j.at("kind").get<std::string>());
  s.features = j.at("features").get<std::int64_t>();
  s.hidden = j.at("hidden").get<std::vector<std::int64_t>>();
  s.activation = activation_from_string(j.at("activation").get<std::string>());
  s.batch = j.at("batch").get<std::int64_t>();
  s.lr_exponent = j.at("lr_exponent").get<int>();
  s.validate();
  return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch", c.batch},
          {"lr_exponent", c.lr_exponent},
          {"bits", c.bits},
          {"seed", c.seed},
          {"patience", c.patience},
          {"shuffle", c.shuffle},
          {"rounding", to_string(c.rounding)},
          {"calibration_batches", c.calibration_batches},
          {"calibration_seed", c.calibration_seed},
          {"backend", to_string(c.backend)},
          {"threads", c.threads},
          {"test_fraction", c.test_fraction},
          {"max_batches", c.max_batches},
          {"cost_threads", c.cost.threads},
          {"refresh_weights", c.cost.refresh_weights}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.batch = j.at("batch").get<std::int64_t>();
  c.lr_exponent = j.at("lr_exponent").get<int>();
  c.bits = j.at("bits").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.patience = j.at("patience").get<int>();
  c.shuffle = j.at("shuffle").get<bool>();
  c.rounding = rounding_from_string(j.at("rounding").get<std::string>());
  c.calibration_batches = j.at("calibration_batches").get<int>();
  c.calibration_seed = j.at("calibration_seed").get<std::uint64_t>();
  c.backend = backend_from_string(j.at("backend").get<std::string>());
  c.threads = j.at("threads").get<int>();
  c.test_fraction = j.at("test_fraction").get<double>();
  c.max_batches = j.at("max_batches").get<std::int64_t>();
  c.cost.threads = j.at("cost_threads").get<int>();
  c.cost.refresh_weights = j.at("refresh_weights").get<bool>();
  c.validate();
  return c;
}

/// Where a dataset comes from: a CSV path or `synthetic:<kind>:<n>:<d>:<seed>`.
struct DatasetSource {
  std::string location;
  std::string label_column;

  bool synthetic() const { return location.rfind("synthetic:", 0) == 0; }
};

/// Loads `src`. Synthetic sources take optional `:n:d:seed` suffixes.
inline Dataset load_dataset(const DatasetSource& src) {
  if (!src.synthetic()) return load_csv(src.location, CsvOptions{src.label_column, true});
  std::vector<std::string> parts;
  std::string rest = src.location, item;
  std::stringstream ss(rest);
  while (std::getline(ss, item, ':')) parts.push_back(item);
  if (parts.size() < 2) throw DataError("synthetic source needs a kind: '" + src.location + "'");
  const SyntheticKind kind = synthetic_kind_from_string(parts[1]);
  auto num = [&](std::size_t i, std::int64_t def) -> std::int64_t {
    if (parts.size() <= i || parts[i].empty()) return def;
    try {
      return std::stoll(parts[i]);
    } catch (const std::exception&) {
      throw DataError("bad number '" + parts[i] + "' in synthetic source");
    }
  };
  return make_synthetic(kind, num(2, 2000), num(3, 10), static_cast<std::uint64_t>(num(4, 7)));
}

/// Everything needed to rerun a training job.
struct RunManifest {
  std::string tool_version = kToolVersion;
  DatasetSource dataset;
  std::string dataset_hash;
  ModelSpec spec;
  TrainConfig config;
  std::string report_path;
  std::string manifest_path;
};

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"format", "qtrain-manifest"},
          {"tool_version", m.tool_version},
          {"dataset", {{"location", m.dataset.location}, {"label_column", m.dataset.label_column}}},
          {"dataset_hash", m.dataset_hash},
          {"model", to_json(m.spec)},
          {"config", to_json(m.config)},
          {"seeds", {{"train", m.config.seed}, {"calibration", m.config.calibration_seed}}},
          {"artifacts", {{"report", m.report_path}, {"manifest", m.manifest_path}}}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "qtrain-manifest") throw Error("not a run manifest");
  RunManifest m;
  m.tool_version = j.at("tool_version").get<std::string>();
  m.dataset.location = j.at("dataset").at("location").get<std::string>();
  m.dataset.label_column = j.at("dataset").value("label_column", "");
  m.dataset_hash = j.at("dataset_hash").get<std::string>();
  m.spec = model_spec_from_json(j.at("model"));
  m.config = train_config_from_json(j.at("config"));
  m.report_path = j.at("artifacts").value("report", "");
  m.manifest_path = j.at("artifacts").value("manifest", "");
  return m;
}

inline RunManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path + "'");
  try {
    return manifest_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed manifest '" + path + "': " + e.what());
  }
}

/// Reruns the job a manifest describes; fails if the dataset changed.
inline TrainReport replay(const RunManifest& m) {
  const Dataset d = load_dataset(m.dataset);
  const std::string h = dataset_hash(d);
  if (h != m.dataset_hash) throw DataError("dataset hash " + h + " does not match manifest hash " + m.dataset_hash);
  return train(d, m.spec, m.config);
}

}  // namespace qtrain
