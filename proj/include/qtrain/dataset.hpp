#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qtrain/calibration.hpp"
#include "qtrain/error.hpp"
#include "qtrain/tensor.hpp"

namespace qtrain {

/// Binary classification data: one row per example, labels in {0, 1}.
struct Dataset {
  FloatTensor x;
  std::vector<int> y;
  std::vector<std::string> feature_names;
  std::string provenance;
  // Rows skipped during lenient CSV ingestion.
  std::int64_t rejected_rows = 0;

  std::int64_t rows() const { return x.rows(); }
  std::int64_t features() const { return x.cols(); }

  void validate() const {
    if (static_cast<std::int64_t>(y.size()) != x.rows()) throw DataError("label count does not match row count");
    for (double v : x) {
      if (!std::isfinite(v)) throw DataError("dataset contains a non-finite value");
    }
    for (int l : y) {
      if (l != 0 && l != 1) throw DataError("labels must be 0 or 1");
    }
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d;
    d.x = FloatTensor(Shape{static_cast<std::int64_t>(idx.size()), features()});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::int64_t c = 0; c < features(); ++c) d.x(static_cast<std::int64_t>(i), c) = x(static_cast<std::int64_t>(idx[i]), c);
      d.y.push_back(y[idx[i]]);
    }
    d.feature_names = feature_names;
    d.provenance = provenance;
    return d;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.x == b.x && a.y == b.y && a.feature_names == b.feature_names;
  }
};

/// FNV-1a over shape, feature bits and labels, as 16 hex digits.
inline std::string dataset_hash(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::int64_t shape[2] = {d.rows(), d.features()};
  mix(shape, sizeof shape);
  for (double v : d.x) mix(&v, sizeof v);
  for (int l : d.y) mix(&l, sizeof l);
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

struct CsvOptions {
  // Label column name; empty selects the last column.
  std::string label_column;
  // Strict mode fails on the first bad row; lenient mode skips and counts it.
  bool strict = true;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(cell);
      cell.clear();
    } else if (ch != '\r') {
      cell += ch;
    }
  }
  out.push_back(cell);
  for (auto& c : out) {
    const auto b = c.find_first_not_of(" \t");
    const auto e = c.find_last_not_of(" \t");
    c = b == std::string::npos ? std::string{} : c.substr(b, e - b + 1);
  }
  return out;
}

inline bool is_missing(const std::string& cell) { return cell.empty() || cell == "?" || cell == "NA" || cell == "nan"; }

inline bool parse_double(const std::string& cell, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(cell, &used);
    return used == cell.size() && std::isfinite(out);
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace detail

/// Reads a CSV file with a header row. Numeric label columns must hold 0/1;
/// a two-valued text column is mapped to 0/1 in sorted order.
inline Dataset load_csv(const std::string& path, const CsvOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + path + "' is empty");
  const auto header = detail::split_csv_line(line);
  std::size_t label_col = header.size() - 1;
  if (!opt.label_column.empty()) {
    auto it = std::find(header.begin(), header.end(), opt.label_column);
    if (it == header.end()) throw DataError("'" + path + "' has no column '" + opt.label_column + "'");
    label_col = static_cast<std::size_t>(it - header.begin());
  }
  if (header.size() < 2) throw DataError("'" + path + "' needs at least one feature and one label column");

  std::vector<std::vector<double>> rows;
  std::vector<std::string> labels;
  std::int64_t rejected = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    std::string problem;
    std::vector<double> row;
    if (cells.size() != header.size()) {
      problem = "has " + std::to_string(cells.size()) + " fields, expected " + std::to_string(header.size());
    } else {
      for (std::size_t c = 0; c < cells.size() && problem.empty(); ++c) {
        if (detail::is_missing(cells[c])) {
          problem = "is missing '" + header[c] + "'";
        } else if (c != label_col) {
          double v = 0.0;
          if (!detail::parse_double(cells[c], v)) problem = "has unparseable '" + header[c] + "' value '" + cells[c] + "'";
          row.push_back(v);
        }
      }
    }
    if (!problem.empty()) {
      if (opt.strict) throw DataError("'" + path + "' row " + std::to_string(line_no) + " " + problem);
      ++rejected;
      continue;
    }
    rows.push_back(std::move(row));
    labels.push_back(cells[label_col]);
  }
  if (rows.empty()) throw DataError("'" + path + "' has no data rows");

  const std::set<std::string> distinct(labels.begin(), labels.end());
  if (distinct.size() > 2) throw DataError("label column of '" + path + "' has more than two classes");
  bool numeric = true;
  for (const auto& l : distinct) {
    double v = 0.0;
    numeric = numeric && detail::parse_double(l, v) && (v == 0.0 || v == 1.0);
  }
  Dataset d;
  d.x = FloatTensor(Shape{static_cast<std::int64_t>(rows.size()), static_cast<std::int64_t>(header.size() - 1)});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) d.x(static_cast<std::int64_t>(r), static_cast<std::int64_t>(c)) = rows[r][c];
    if (numeric) {
      d.y.push_back(std::stod(labels[r]) == 1.0 ? 1 : 0);
    } else {
      d.y.push_back(labels[r] == *distinct.begin() ? 0 : 1);
    }
  }
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c != label_col) d.feature_names.push_back(header[c]);
  }
  d.provenance = "csv:" + path;
  d.rejected_rows = rejected;
  d.validate();
  return d;
}

enum class SyntheticKind { Separable, XorLike, GaussianBlobs };

inline std::string to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::Separable: return "separable";
    case SyntheticKind::XorLike: return "xor-like";
    case SyntheticKind::GaussianBlobs: return "gaussian-blobs";
  }
  return "?";
}

inline SyntheticKind synthetic_kind_from_string(const std::string& s) {
  if (s == "separable") return SyntheticKind::Separable;
  if (s == "xor-like" || s == "xor") return SyntheticKind::XorLike;
  if (s == "gaussian-blobs" || s == "blobs") return SyntheticKind::GaussianBlobs;
  throw DataError("unknown synthetic dataset kind '" + s + "'");
}

/// Deterministic, class-balanced synthetic data in [-1, 1]^d. Row i has
/// label i % 2.
inline Dataset make_synthetic(SyntheticKind kind, std::int64_t n, std::int64_t d, std::uint64_t seed) {
  if (n < 2) throw DataError("synthetic datasets need at least two rows");
  if (d < 1) throw DataError("synthetic datasets need at least one feature");
  if (kind == SyntheticKind::XorLike && d < 2) throw DataError("xor-like data needs at least two features");
  std::uint64_t state = seed ^ 0xA0761D6478BD642FULL;
  auto uniform = [&] { return detail::uniform_pm1(state); };
  auto normal = [&] {
    // Box-Muller on the same platform-independent stream.
    const double u1 = 0.5 * (uniform() + 1.0), u2 = 0.5 * (uniform() + 1.0);
    return std::sqrt(-2.0 * std::log(std::max(u1, 1e-300))) * std::cos(6.283185307179586 * u2);
  };
  std::vector<double> dir(static_cast<std::size_t>(d));
  double norm = 0.0;
  for (auto& v : dir) {
    v = normal();
    norm += v * v;
  }
  for (auto& v : dir) v /= std::sqrt(norm);

  Dataset out;
  out.x = FloatTensor(Shape{n, d});
  std::vector<double> row(static_cast<std::size_t>(d));
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    for (;;) {
      if (kind == SyntheticKind::GaussianBlobs) {
        // Class means at +-0.385 along `dir`, sigma 0.3: about 90% Bayes accuracy.
        const double sign = label ? 1.0 : -1.0;
        for (std::size_t c = 0; c < row.size(); ++c) row[c] = std::clamp(sign * 0.385 * dir[c] + 0.3 * normal(), -1.0, 1.0);
        break;
      }
      for (auto& v : row) v = uniform();
      if (kind == SyntheticKind::Separable) {
        const double m = std::inner_product(row.begin(), row.end(), dir.begin(), 0.0);
        if (std::fabs(m) >= 0.05 && (m > 0) == (label == 1)) break;
      } else {
        const bool a = row[0] > 0, b = row[1] > 0;
        if (std::fabs(row[0]) >= 0.1 && std::fabs(row[1]) >= 0.1 && (a != b) == (label == 1)) break;
      }
    }
    for (std::int64_t c = 0; c < d; ++c) out.x(i, c) = row[static_cast<std::size_t>(c)];
    out.y.push_back(label);
  }
  for (std::int64_t c = 0; c < d; ++c) out.feature_names.push_back("x" + std::to_string(c));
  out.provenance = "synthetic:" + to_string(kind) + ":n=" + std::to_string(n) + ":d=" + std::to_string(d) +
                   ":seed=" + std::to_string(seed);
  return out;
}

struct Split {
  Dataset train;
  Dataset test;
};

/// Stratified split keeping the class ratio in both parts.
inline Split stratified_split(const Dataset& d, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw DataError("test fraction must be in (0, 1)");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> train, test;
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.y.size(); ++i) {
      if (d.y[i] == cls) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  if (train.empty() || test.empty()) throw DataError("split leaves an empty partition");
  return {d.subset(train), d.subset(test)};
}

/// Per-feature affine map to [-1, 1], fitted on one dataset.
struct MinMaxScaler {
  std::vector<double> lo, hi;

  static MinMaxScaler fit(const Dataset& d) {
    MinMaxScaler s;
    s.lo.assign(static_cast<std::size_t>(d.features()), std::numeric_limits<double>::infinity());
    s.hi.assign(static_cast<std::size_t>(d.features()), -std::numeric_limits<double>::infinity());
    for (std::int64_t r = 0; r < d.rows(); ++r) {
      for (std::int64_t c = 0; c < d.features(); ++c) {
        s.lo[static_cast<std::size_t>(c)] = std::min(s.lo[static_cast<std::size_t>(c)], d.x(r, c));
        s.hi[static_cast<std::size_t>(c)] = std::max(s.hi[static_cast<std::size_t>(c)], d.x(r, c));
      }
    }
    return s;
  }

  /// Values outside the fitted range are clipped.
  Dataset apply(const Dataset& d) const {
    Dataset out = d;
    for (std::int64_t r = 0; r < d.rows(); ++r) {
      for (std::int64_t c = 0; c < d.features(); ++c) {
        const double l = lo[static_cast<std::size_t>(c)], h = hi[static_cast<std::size_t>(c)];
        out.x(r, c) = h > l ? std::clamp(2.0 * (d.x(r, c) - l) / (h - l) - 1.0, -1.0, 1.0) : 0.0;
      }
    }
    return out;
  }
};

}  // namespace qtrain
