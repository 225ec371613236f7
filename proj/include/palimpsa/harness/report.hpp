#pragma once

// NDJSON and CSV writers. Every NDJSON record carries the config digest and
// seed, and records never contain wall-clock times unless the caller adds
// them, so reruns of the same configuration produce identical files.

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "palimpsa/errors.hpp"
#include "palimpsa/mqar/train.hpp"

namespace palimpsa::harness {

class NdjsonWriter {
 public:
  NdjsonWriter(const std::string& path, std::string digest, std::uint64_t seed)
      : out_(path, std::ios::trunc), digest_(std::move(digest)), seed_(seed) {
    if (!out_) throw ConfigError("cannot write " + path);
  }

  void write(nlohmann::json record) {
    record["digest"] = digest_;
    record["seed"] = seed_;
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::string digest_;
  std::uint64_t seed_;
};

class CsvWriter {
 public:
  CsvWriter(const std::string& path, std::vector<std::string> header) : out_(path, std::ios::trunc), cols_(header.size()) {
    if (!out_) throw ConfigError("cannot write " + path);
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != cols_) throw ConfigError("csv: row width does not match the header");
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << escape(cells[i]);
    out_ << '\n';
    out_.flush();
  }

  static std::string escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string r = "\"";
    for (char c : s) {
      if (c == '"') r += '"';
      r += c;
    }
    return r + "\"";
  }

 private:
  std::ofstream out_;
  std::size_t cols_;
};

/// NaN becomes JSON null.
inline nlohmann::json number_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(); }

inline nlohmann::json to_json(const mqar::Diagnostics& d) {
  return {{"mean_log_N", number_or_null(d.mean_log_N)},
          {"ratio_per_head", d.ratio_per_head},
          {"imin_margin_per_head", d.imin_margin_per_head},
          {"train_loss", number_or_null(d.train_loss)},
          {"query_accuracy", number_or_null(d.query_accuracy)}};
}

inline nlohmann::json to_json(const mqar::MetricRecord& r) {
  return {{"kind", r.eval ? "eval" : "train"},
          {"step", r.step},
          {"stage", r.stage},
          {"loss", number_or_null(r.loss)},
          {"accuracy", number_or_null(r.accuracy)},
          {"lr", r.lr},
          {"grad_norm", number_or_null(r.grad_norm)},
          {"diagnostics", to_json(r.diag)}};
}

inline std::string format_double(double x, int precision = 6) {
  if (!std::isfinite(x)) return "nan";
  std::ostringstream s;
  s.precision(precision);
  s << x;
  return s.str();
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir + ": " + ec.message());
}

}  // namespace palimpsa::harness
