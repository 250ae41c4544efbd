#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qtrain/bits.hpp"
#include "qtrain/compiler.hpp"
#include "qtrain/error.hpp"
#include "qtrain/graph_ir.hpp"

namespace qtrain {

/// Plaintext stand-in for a TFHE ciphertext. The value is exact; noise is
/// only tracked as the number of levelled operations since the last PBS.
struct SimCiphertext {
  std::int64_t value = 0;
  int bit_width = 1;
  int noise = 0;
  int tag = -1;
};

/// Per-PBS latency in milliseconds, keyed by PBS input bit-width.
struct LatencyTable {
  std::map<int, double> ms;

  /// Latency of a `bits`-wide PBS: exact entry, else the next wider entry,
  /// else the widest entry scaled by 2 per extra bit.
  double at(int bits) const {
    if (ms.empty()) throw SimError("empty latency table");
    auto it = ms.lower_bound(bits);
    if (it != ms.end()) return it->second;
    const auto& [w, v] = *ms.rbegin();
    return std::ldexp(v, bits - w);
  }

  void validate() const {
    double prev = 0.0;
    for (const auto& [w, v] : ms) {
      if (w < 1 || !(v > 0.0)) throw SimError("latency table entries must be positive");
      if (v < prev) throw SimError("latency table must be non-decreasing in bit-width");
      prev = v;
    }
  }
};

// Shape of the default table before fitting: a fixed bootstrapping cost
// plus a term that doubles with each extra bit of PBS input.
inline double default_latency_shape(int bits) { return 8.0 + std::ldexp(0.5, bits); }

// Fitted so that the logistic d=30, B=8 training circuit estimates about
// 11.8 s per batch at 16 threads. A fit to one published figure, not a
// measurement of any TFHE implementation.
inline constexpr double kDefaultLatencyFit = 6.856;

inline LatencyTable default_latency_table() {
  LatencyTable t;
  for (int w = 1; w <= 24; ++w) t.ms[w] = kDefaultLatencyFit * default_latency_shape(w);
  return t;
}

struct CostModel {
  LatencyTable pbs = default_latency_table();
  double levelled_ms = 0.0;
  int threads = 16;
  // Refresh every updated weight with one extra PBS per batch instead of
  // the client-side decrypt / re-encrypt.
  bool refresh_weights = false;
  // Fail when a ciphertext accumulates more levelled ops than this since its
  // last PBS. 0 disables the check.
  int noise_threshold = 0;
};

/// Execution counters of one circuit run.
struct SimCounters {
  std::map<int, std::uint64_t> pbs_by_width;
  std::uint64_t levelled_ops = 0;
  int max_noise = 0;
  int noise_threshold = 0;

  void merge(const SimCounters& o) {
    for (const auto& [w, n] : o.pbs_by_width) pbs_by_width[w] += n;
    levelled_ops += o.levelled_ops;
    max_noise = std::max(max_noise, o.max_noise);
  }
};

namespace detail {

inline void check_width(const SimCiphertext& ct, const char* op) {
  if (!fits_signed(ct.value, ct.bit_width)) {
    throw SimError(std::string(op) + " result " + std::to_string(ct.value) + " overflows its " +
                   std::to_string(ct.bit_width) + "-bit ciphertext");
  }
}

inline void note_noise(SimCiphertext& ct, SimCounters& k) {
  k.max_noise = std::max(k.max_noise, ct.noise);
  if (k.noise_threshold > 0 && ct.noise > k.noise_threshold) {
    throw SimError("noise budget exhausted after " + std::to_string(ct.noise) + " levelled operations");
  }
}

}  // namespace detail

inline SimCiphertext encrypt(std::int64_t v, int bit_width, int tag = -1) {
  SimCiphertext ct{v, bit_width, 0, tag};
  detail::check_width(ct, "encrypt");
  return ct;
}

/// Levelled addition into a `width`-bit ciphertext (0 keeps the wider operand width).
inline SimCiphertext lev_add(const SimCiphertext& a, const SimCiphertext& b, SimCounters& k, int width = 0) {
  SimCiphertext r{a.value + b.value, width ? width : std::max(a.bit_width, b.bit_width), a.noise + b.noise + 1, a.tag};
  detail::check_width(r, "lev_add");
  detail::note_noise(r, k);
  ++k.levelled_ops;
  return r;
}

inline SimCiphertext lev_sub(const SimCiphertext& a, const SimCiphertext& b, SimCounters& k, int width = 0) {
  SimCiphertext r{a.value - b.value, width ? width : std::max(a.bit_width, b.bit_width), a.noise + b.noise + 1, a.tag};
  detail::check_width(r, "lev_sub");
  detail::note_noise(r, k);
  ++k.levelled_ops;
  return r;
}

/// Multiplication by a plaintext integer.
inline SimCiphertext lev_mul_const(const SimCiphertext& a, std::int64_t c, SimCounters& k, int width = 0) {
  SimCiphertext r{a.value * c, width ? width : a.bit_width, a.noise + 1, a.tag};
  detail::check_width(r, "lev_mul_const");
  detail::note_noise(r, k);
  ++k.levelled_ops;
  return r;
}

inline SimCiphertext pbs(const SimCiphertext& ct, const LutTable& table, SimCounters& k) {
  if (ct.bit_width != table.input_bits) {
    throw SimError("PBS on a " + std::to_string(ct.bit_width) + "-bit ciphertext with a " +
                   std::to_string(table.input_bits) + "-bit table");
  }
  SimCiphertext r{table.lookup(ct.value), std::max(table.output_bits, 1), 0, ct.tag};
  ++k.pbs_by_width[table.input_bits];
  return r;
}

/// Removes the n_r low bits of `ct` one at a time, then applies `table` to
/// the remaining (bit_width - n_r)-bit value. Each bit is moved to the MSB
/// by a plaintext multiply, read back by a 1-bit PBS and subtracted.
inline SimCiphertext rounded_pbs(const SimCiphertext& ct, int n_r, const LutTable& table, SimCounters& k,
                                 RoundingMode mode = RoundingMode::Truncate) {
  if (n_r < 0 || n_r >= ct.bit_width) {
    throw SimError("cannot remove " + std::to_string(n_r) + " bits from a " + std::to_string(ct.bit_width) +
                   "-bit ciphertext");
  }
  if (n_r == 0) return pbs(ct, table, k);
  const int w = ct.bit_width;
  SimCiphertext x = ct;
  if (mode == RoundingMode::Nearest) {
    x.value += rounding_offset(n_r, mode);
    x.noise += 1;
    ++k.levelled_ops;
    detail::check_width(x, "rounding offset");
  }
  for (int i = 0; i < n_r; ++i) {
    // Plaintext shift of bit i into the sign position (wraps modulo 2^w).
    const std::int64_t shifted = wrap_signed(x.value * (std::int64_t{1} << (w - 1 - i)), w);
    ++k.levelled_ops;
    const std::int64_t bit = shifted < 0 ? 1 : 0;
    ++k.pbs_by_width[1];
    x.value -= bit << i;
    ++k.levelled_ops;
    x.noise = 1;
    detail::note_noise(x, k);
  }
  SimCiphertext down{x.value >> n_r, w - n_r, x.noise, x.tag};
  return pbs(down, table, k);
}

/// Encrypted scalar product a*b = f_sq(a+b) - f_sq(a-b).
inline SimCiphertext quarter_square_product(const SimCiphertext& a, const SimCiphertext& b, const LutTable& fsq, SimCounters& k,
                                 int acc_width = 0) {
  const SimCiphertext s = pbs(lev_add(a, b, k, fsq.input_bits), fsq, k);
  const SimCiphertext d = pbs(lev_sub(a, b, k, fsq.input_bits), fsq, k);
  return lev_sub(s, d, k, acc_width ? acc_width : s.bit_width);
}

/// Estimated latency of a compiled batch circuit, level by level.
struct LatencyEstimate {
  std::vector<double> level_ms;
  double total_ms = 0.0;
  std::uint64_t refresh_pbs = 0;
};

inline LatencyEstimate estimate_latency(const CompiledCircuit& c, const CostModel& m) {
  m.pbs.validate();
  if (m.threads < 1) throw SimError("thread count must be positive");
  const double threads = static_cast<double>(m.threads);
  auto step = [&](double work_ms, std::uint64_t width) {
    return width == 0 ? 0.0 : work_ms / std::min(threads, static_cast<double>(width));
  };
  LatencyEstimate e;
  e.level_ms.assign(static_cast<std::size_t>(c.levels), 0.0);
  for (int level = 0; level < c.levels; ++level) {
    double t = 0.0;
    int max_nr = 0;
    for (const auto& p : c.partitions) {
      if (p.level == level) max_nr = std::max(max_nr, p.n_r);
    }
    // Bit removals proceed one bit at a time across all partitions of the level.
    for (int bit = 0; bit < max_nr; ++bit) {
      std::uint64_t count = 0;
      for (const auto& p : c.partitions) {
        if (p.level == level && p.n_r > bit) count += p.elements;
      }
      t += step(static_cast<double>(count) * m.pbs.at(1), count);
    }
    double work = 0.0, lev = 0.0;
    std::uint64_t width = 0;
    for (const auto& p : c.partitions) {
      if (p.level != level) continue;
      work += static_cast<double>(p.pbs_count) * m.pbs.at(p.pbs_bits);
      width += p.pbs_count;
      lev += static_cast<double>(p.levelled_ops) * m.levelled_ms;
    }
    t += step(work, width) + lev / threads;
    e.level_ms[static_cast<std::size_t>(level)] = t;
    e.total_ms += t;
  }
  if (m.refresh_weights) {
    double work = 0.0;
    for (int id : c.graph.outputs()) {
      const int src = c.graph.node(id).inputs[0];
      const auto& p = c.partition(c.partition_of[static_cast<std::size_t>(src)]);
      const int bits = c.tables[static_cast<std::size_t>(p.table)].output_bits;
      const auto n = static_cast<std::uint64_t>(c.graph.node(src).shape.size());
      e.refresh_pbs += n;
      work += static_cast<double>(n) * m.pbs.at(bits);
    }
    const double t = step(work, e.refresh_pbs);
    e.level_ms.push_back(t);
    e.total_ms += t;
  }
  return e;
}

/// params * batch / (latency_s * threads)
inline double wgc_rate(double params, double batch, double latency_s, double threads) {
  if (!(params > 0) || !(batch > 0) || !(latency_s > 0) || !(threads > 0)) {
    throw SimError("WGC/s/T needs positive parameter count, batch, latency and threads");
  }
  return params * batch / (latency_s * threads);
}

struct CostReport {
  std::map<int, std::uint64_t> pbs_by_width;
  std::uint64_t levelled_ops = 0;
  std::uint64_t refresh_pbs = 0;
  std::vector<double> level_ms;
  double latency_s = 0.0;
  int threads = 0;
  std::int64_t params = 0;
  std::int64_t batch = 0;
  int max_noise = 0;
  // Largest |value| seen in each partition's multi-sum.
  std::vector<std::int64_t> partition_max_abs;

  std::uint64_t total_pbs() const {
    std::uint64_t n = 0;
    for (const auto& [w, c] : pbs_by_width) n += c;
    return n + refresh_pbs;
  }
  double wgc() const {
    return latency_s > 0 && params > 0 ? wgc_rate(static_cast<double>(params), static_cast<double>(batch), latency_s, threads)
                                       : 0.0;
  }
};

inline std::int64_t circuit_param_count(const CompiledCircuit& c) {
  std::int64_t n = 0;
  for (int id : c.graph.outputs()) n += c.graph.node(id).shape.size();
  return n;
}

inline std::int64_t circuit_batch(const CompiledCircuit& c) {
  for (int id : c.graph.inputs()) {
    const Node& n = c.graph.node(id);
    if (static_cast<InputRole>(n.int_attr("role")) == InputRole::Data) return n.shape.rows;
  }
  return 0;
}

/// Cost of one circuit execution from the compiler's static counts.
inline CostReport static_cost(const CompiledCircuit& c, const CostModel& m = {}) {
  CostReport r;
  r.pbs_by_width = static_pbs_by_width(c);
  r.levelled_ops = c.total_levelled();
  const auto e = estimate_latency(c, m);
  r.level_ms = e.level_ms;
  r.refresh_pbs = e.refresh_pbs;
  r.latency_s = e.total_ms / 1000.0;
  r.threads = m.threads;
  r.params = circuit_param_count(c);
  r.batch = circuit_batch(c);
  return r;
}

inline nlohmann::json to_json(const CostReport& r) {
  nlohmann::json by_width = nlohmann::json::object();
  for (const auto& [w, n] : r.pbs_by_width) by_width[std::to_string(w)] = n;
  return {{"pbs_by_width", by_width},     {"pbs_total", r.total_pbs()},  {"refresh_pbs", r.refresh_pbs},
          {"levelled_ops", r.levelled_ops}, {"level_ms", r.level_ms},      {"latency_s", r.latency_s},
          {"threads", r.threads},          {"params", r.params},          {"batch", r.batch},
          {"wgc_per_s_per_thread", r.wgc()}, {"max_noise", r.max_noise}};
}

inline std::string to_text(const CostReport& r) {
  std::ostringstream os;
  os << "pbs by input width\n";
  for (const auto& [w, n] : r.pbs_by_width) os << "  " << w << "-bit  " << n << "\n";
  if (r.refresh_pbs) os << "  refresh " << r.refresh_pbs << "\n";
  os << "levelled ops      " << r.levelled_ops << "\n";
  os << "est. latency      " << r.latency_s << " s (" << r.threads << " threads)\n";
  os << "WGC/s/T           " << r.wgc() << "\n";
  return os.str();
}

namespace detail {

/// A node's value during simulation: ciphertexts, or plaintext constants.
struct SimValue {
  Shape shape;
  std::vector<SimCiphertext> ct;
  std::vector<std::int64_t> plain;
  bool encrypted = true;

  const SimCiphertext& at(std::int64_t r, std::int64_t c) const {
    const auto rr = shape.rows == 1 ? 0 : r, cc = shape.cols == 1 ? 0 : c;
    return ct[static_cast<std::size_t>(rr * shape.cols + cc)];
  }
  std::int64_t plain_at(std::int64_t r, std::int64_t c) const {
    const auto rr = shape.rows == 1 ? 0 : r, cc = shape.cols == 1 ? 0 : c;
    return plain[static_cast<std::size_t>(rr * shape.cols + cc)];
  }
};

class CircuitRunner {
 public:
  CircuitRunner(const CompiledCircuit& c, const CostModel& m) : c_(c), m_(m) {
    counters_.noise_threshold = m.noise_threshold;
    max_abs_.assign(c.partitions.size(), 0);
    values_.resize(static_cast<std::size_t>(c.graph.size()));
  }

  std::pair<NamedTensors<std::int64_t>, CostReport> run(const NamedTensors<std::int64_t>& inputs) {
    const Graph& g = c_.graph;
    for (int id : topo_order(g)) {
      const Node& n = g.node(id);
      SimValue& out = values_[static_cast<std::size_t>(id)];
      out.shape = n.shape;
      switch (n.kind) {
        case NodeKind::Input: encrypt_input(n, inputs, out); break;
        case NodeKind::Constant:
          out.encrypted = false;
          out.plain.assign(static_cast<std::size_t>(n.shape.size()), n.int_attr("value"));
          break;
        case NodeKind::Output: out = val(n.inputs[0]); break;
        case NodeKind::Transpose: transpose(n, out); break;
        case NodeKind::Add:
        case NodeKind::Sub: add_sub(n, out); break;
        case NodeKind::Mul:
          if (is_product(g, n)) product(n, out);
          else mul_const(n, out);
          break;
        case NodeKind::MatMul: product(n, out); break;
        case NodeKind::ReduceSum: reduce(n, out); break;
        case NodeKind::Lut: lookup(n, out); break;
        default: throw SimError("cannot simulate node kind " + to_string(n.kind));
      }
    }
    NamedTensors<std::int64_t> outs;
    for (int id : g.outputs()) {
      const SimValue& v = val(id);
      IntTensor t(v.shape);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = v.ct[i].value;
      outs[g.node(id).name] = std::move(t);
    }
    CostReport r = static_cost(c_, m_);
    r.pbs_by_width = counters_.pbs_by_width;
    r.levelled_ops = counters_.levelled_ops;
    r.max_noise = counters_.max_noise;
    r.partition_max_abs = max_abs_;
    return {std::move(outs), std::move(r)};
  }

 private:
  const SimValue& val(int id) const { return values_[static_cast<std::size_t>(id)]; }

  int width_of(int node) const {
    const int p = c_.partition_of[static_cast<std::size_t>(node)];
    return c_.partition(p).acc_bits;
  }

  void track(int node, const SimCiphertext& ct) {
    const int p = c_.partition_of[static_cast<std::size_t>(node)];
    if (p >= 0) {
      auto& m = max_abs_[static_cast<std::size_t>(p)];
      m = std::max(m, ct.value < 0 ? -ct.value : ct.value);
    }
  }

  void encrypt_input(const Node& n, const NamedTensors<std::int64_t>& inputs, SimValue& out) {
    const auto it = inputs.find(n.name);
    if (it == inputs.end()) throw SimError("missing circuit input '" + n.name + "'");
    if (!(it->second.shape() == n.shape)) {
      throw ShapeError("input '" + n.name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                       to_string(n.shape));
    }
    const Interval r = input_range(n);
    const int w = signed_bits(r);
    out.ct.clear();
    for (auto v : it->second) {
      if (!r.contains(v)) {
        throw SimError("input '" + n.name + "' value " + std::to_string(v) + " outside its declared range");
      }
      out.ct.push_back(encrypt(v, w, n.id));
    }
  }

  void transpose(const Node& n, SimValue& out) {
    const SimValue& a = val(n.inputs[0]);
    out.encrypted = a.encrypted;
    out.ct.resize(static_cast<std::size_t>(n.shape.size()));
    for (std::int64_t r = 0; r < n.shape.rows; ++r) {
      for (std::int64_t col = 0; col < n.shape.cols; ++col) {
        out.ct[static_cast<std::size_t>(r * n.shape.cols + col)] = a.at(col, r);
      }
    }
  }

  void add_sub(const Node& n, SimValue& out) {
    const SimValue& a = val(n.inputs[0]);
    const SimValue& b = val(n.inputs[1]);
    if (!a.encrypted || !b.encrypted) throw SimError("plaintext operand in levelled Add/Sub node " + std::to_string(n.id));
    const int w = width_of(n.id);
    out.ct.clear();
    for (std::int64_t r = 0; r < n.shape.rows; ++r) {
      for (std::int64_t col = 0; col < n.shape.cols; ++col) {
        auto ct = n.kind == NodeKind::Add ? lev_add(a.at(r, col), b.at(r, col), counters_, w)
                                          : lev_sub(a.at(r, col), b.at(r, col), counters_, w);
        track(n.id, ct);
        out.ct.push_back(ct);
      }
    }
  }

  void mul_const(const Node& n, SimValue& out) {
    const bool first_plain = !val(n.inputs[0]).encrypted;
    const SimValue& x = val(n.inputs[first_plain ? 1 : 0]);
    const SimValue& k = val(n.inputs[first_plain ? 0 : 1]);
    const int w = width_of(n.id);
    out.ct.clear();
    for (std::int64_t r = 0; r < n.shape.rows; ++r) {
      for (std::int64_t col = 0; col < n.shape.cols; ++col) {
        auto ct = lev_mul_const(x.at(r, col), k.plain_at(r, col), counters_, w);
        track(n.id, ct);
        out.ct.push_back(ct);
      }
    }
  }

  // f_sq(a+b) and f_sq(a-b) pairs, then the levelled accumulation in the
  // consuming partition.
  void product(const Node& n, SimValue& out) {
    const Graph& g = c_.graph;
    const int pid = c_.product_partition.at(n.id);
    const Partition& p = c_.partition(pid);
    const LutTable& fsq = c_.tables[static_cast<std::size_t>(p.table)];
    const SimValue& a = val(n.inputs[0]);
    const SimValue& b = val(n.inputs[1]);
    const int w = width_of(n.id);
    const std::int64_t k = n.kind == NodeKind::MatMul ? g.node(n.inputs[0]).shape.cols : 1;
    auto square_pair = [&](const SimCiphertext& x, const SimCiphertext& y) {
      const auto s = lev_add(x, y, counters_, p.pbs_bits);
      const auto d = lev_sub(x, y, counters_, p.pbs_bits);
      auto& m = max_abs_[static_cast<std::size_t>(pid)];
      m = std::max({m, s.value < 0 ? -s.value : s.value, d.value < 0 ? -d.value : d.value});
      return std::pair{pbs(s, fsq, counters_), pbs(d, fsq, counters_)};
    };
    out.ct.clear();
    for (std::int64_t r = 0; r < n.shape.rows; ++r) {
      for (std::int64_t col = 0; col < n.shape.cols; ++col) {
        SimCiphertext acc;
        for (std::int64_t i = 0; i < k; ++i) {
          const auto& x = n.kind == NodeKind::MatMul ? a.at(r, i) : a.at(r, col);
          const auto& y = n.kind == NodeKind::MatMul ? b.at(i, col) : b.at(r, col);
          const auto [fs, fd] = square_pair(x, y);
          if (i == 0) {
            acc = lev_sub(fs, fd, counters_, w);
          } else {
            acc = lev_sub(lev_add(acc, fs, counters_, w), fd, counters_, w);
          }
          track(n.id, acc);
        }
        out.ct.push_back(acc);
      }
    }
  }

  void reduce(const Node& n, SimValue& out) {
    const SimValue& a = val(n.inputs[0]);
    const int w = width_of(n.id);
    out.ct.clear();
    for (std::int64_t col = 0; col < a.shape.cols; ++col) {
      SimCiphertext acc = a.at(0, col);
      for (std::int64_t r = 1; r < a.shape.rows; ++r) {
        acc = lev_add(acc, a.at(r, col), counters_, w);
        track(n.id, acc);
      }
      acc.bit_width = w;
      out.ct.push_back(acc);
    }
  }

  void lookup(const Node& n, SimValue& out) {
    const Partition& p = c_.partition(c_.partition_of[static_cast<std::size_t>(n.id)]);
    const LutTable& t = c_.tables[static_cast<std::size_t>(p.table)];
    const SimValue& a = val(n.inputs[0]);
    out.ct.clear();
    for (const auto& x : a.ct) {
      SimCiphertext in = x;
      in.bit_width = p.round_bits;
      detail::check_width(in, "rounded PBS input");
      out.ct.push_back(rounded_pbs(in, p.n_r, t, counters_, p.rounding));
    }
  }

  const CompiledCircuit& c_;
  const CostModel& m_;
  SimCounters counters_;
  std::vector<std::int64_t> max_abs_;
  std::vector<SimValue> values_;
};

}  // namespace detail

/// Executes one batch circuit on quantized ("encrypted") inputs.
inline std::pair<NamedTensors<std::int64_t>, CostReport> run_circuit(const CompiledCircuit& c,
                                                                     const NamedTensors<std::int64_t>& inputs,
                                                                     const CostModel& m = {}) {
  return detail::CircuitRunner(c, m).run(inputs);
}

}  // namespace qtrain
