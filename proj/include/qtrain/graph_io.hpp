#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "qtrain/graph_ir.hpp"

namespace qtrain {

// Graph document layout (format "qtrain-graph", version 1):
//
//   nodes   [{id, kind, name, attrs{key: number}}]
//   edges   [{from, to, port}]          producer id, consumer id, input port
//   inputs  [node id]                   declared graph inputs, in order
//   outputs [node id]                   declared graph outputs, in order
//   shapes  {"<node id>": [rows, cols]} shape of each node's output edge
//   tables  [{input_bits, output_bits, entries, provenance}]
//
// Field names are part of the on-disk contract and do not change between
// versions; new fields may be added.

inline constexpr const char* kGraphFormat = "qtrain-graph";
inline constexpr int kGraphVersion = 1;

inline nlohmann::json table_to_json(const LutTable& t) {
  return {{"input_bits", t.input_bits},
          {"output_bits", t.output_bits},
          {"entries", t.entries},
          {"provenance", t.provenance}};
}

inline LutTable table_from_json(const nlohmann::json& j) {
  LutTable t;
  t.input_bits = j.at("input_bits").get<int>();
  t.output_bits = j.at("output_bits").get<int>();
  t.entries = j.at("entries").get<std::vector<std::int64_t>>();
  t.provenance = j.value("provenance", std::vector<std::string>{});
  if (t.input_bits < 0 || t.input_bits > 24 || t.entries.size() != (std::size_t{1} << t.input_bits)) {
    throw GraphError("table entry count does not match 2^input_bits");
  }
  return t;
}

inline nlohmann::json to_json(const Graph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  nlohmann::json shapes = nlohmann::json::object();
  for (const auto& n : g.nodes()) {
    nlohmann::json attrs = nlohmann::json::object();
    for (const auto& [k, v] : n.attrs) attrs[k] = v;
    nodes.push_back({{"id", n.id}, {"kind", to_string(n.kind)}, {"name", n.name}, {"attrs", attrs}});
    shapes[std::to_string(n.id)] = {n.shape.rows, n.shape.cols};
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges()) edges.push_back({{"from", e.from}, {"to", e.to}, {"port", e.port}});
  nlohmann::json tables = nlohmann::json::array();
  for (const auto& t : g.tables()) tables.push_back(table_to_json(t));
  return {{"format", kGraphFormat}, {"version", kGraphVersion}, {"nodes", nodes},   {"edges", edges},
          {"inputs", g.inputs()},   {"outputs", g.outputs()},   {"shapes", shapes}, {"tables", tables}};
}

inline std::string serialize(const Graph& g) { return to_json(g).dump(1); }

/// Parses and validates a graph document. Throws GraphError (malformed),
/// CycleError or ShapeError.
inline Graph graph_from_json(const nlohmann::json& doc) {
  try {
    if (doc.value("format", std::string{}) != kGraphFormat) throw GraphError("not a qtrain graph document");
    const auto& jnodes = doc.at("nodes");
    const std::size_t count = jnodes.size();
    std::vector<Node> nodes(count);
    std::vector<bool> seen(count, false);
    for (const auto& jn : jnodes) {
      const int id = jn.at("id").get<int>();
      if (id < 0 || static_cast<std::size_t>(id) >= count || seen[static_cast<std::size_t>(id)]) {
        throw GraphError("node ids must be unique and dense in [0, " + std::to_string(count) + ")");
      }
      seen[static_cast<std::size_t>(id)] = true;
      Node& n = nodes[static_cast<std::size_t>(id)];
      n.id = id;
      n.kind = node_kind_from_string(jn.at("kind").get<std::string>());
      n.name = jn.value("name", std::string{});
      const nlohmann::json attrs = jn.value("attrs", nlohmann::json::object());
      for (const auto& [k, v] : attrs.items()) n.attrs[k] = v.get<double>();
      n.inputs.assign(static_cast<std::size_t>(arity(n.kind)), -1);
    }
    for (const auto& je : doc.at("edges")) {
      const int from = je.at("from").get<int>(), to = je.at("to").get<int>(), port = je.at("port").get<int>();
      if (to < 0 || static_cast<std::size_t>(to) >= count || from < 0 || static_cast<std::size_t>(from) >= count) {
        throw GraphError("edge references a missing node");
      }
      auto& ins = nodes[static_cast<std::size_t>(to)].inputs;
      if (port < 0 || port >= static_cast<int>(ins.size()) || ins[static_cast<std::size_t>(port)] != -1) {
        throw GraphError("invalid or duplicate port " + std::to_string(port) + " on node " + std::to_string(to));
      }
      ins[static_cast<std::size_t>(port)] = from;
    }
    for (const auto& n : nodes) {
      for (int in : n.inputs) {
        if (in < 0) throw GraphError("node " + std::to_string(n.id) + " has an unconnected input port");
      }
    }
    const auto& jshapes = doc.at("shapes");
    for (auto& n : nodes) {
      const auto s = jshapes.at(std::to_string(n.id)).get<std::vector<std::int64_t>>();
      if (s.size() != 2 || s[0] < 1 || s[1] < 1) throw ShapeError("invalid shape for node " + std::to_string(n.id));
      n.shape = Shape{s[0], s[1]};
    }
    std::vector<LutTable> tables;
    const nlohmann::json jtables = doc.value("tables", nlohmann::json::array());
    for (const auto& jt : jtables) tables.push_back(table_from_json(jt));
    Graph g;
    g.set_raw(std::move(nodes), doc.at("inputs").get<std::vector<int>>(), doc.at("outputs").get<std::vector<int>>(),
              std::move(tables));
    for (int id : g.inputs()) {
      if (id < 0 || id >= g.size()) throw GraphError("declared input id out of range");
    }
    for (int id : g.outputs()) {
      if (id < 0 || id >= g.size()) throw GraphError("declared output id out of range");
    }
    validate(g);
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw GraphError(std::string("malformed graph document: ") + e.what());
  }
}

inline Graph deserialize(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw GraphError(std::string("malformed graph document: ") + e.what());
  }
  return graph_from_json(doc);
}

}  // namespace qtrain
