#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/nets/train.hpp"

namespace kamal {

struct MetricsRow {
  std::string experiment;
  std::string method;  // ensemble | baseline | layerwise | joint | teacher{i}
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy_whole = 0.0;
  std::vector<double> accuracy_parts;
  std::size_t param_count = 0;
  double wall_seconds = 0.0;
  std::string status = "ok";
};

// Shortest round-trip decimal form; locale independent.
inline std::string format_number(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

// Header row plus one line per row, LF endings. The number of part columns
// is the widest row's; shorter rows leave the extra cells empty.
inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::size_t parts = 0;
  for (const auto& r : rows) parts = std::max(parts, r.accuracy_parts.size());
  std::string out = "experiment,method,seed,epoch,split,loss,accuracy_whole";
  for (std::size_t i = 1; i <= parts; ++i) out += ",accuracy_part" + std::to_string(i);
  out += ",param_count,wall_seconds,status\n";
  for (const auto& r : rows) {
    out += csv_field(r.experiment) + ',' + csv_field(r.method) + ',' + std::to_string(r.seed) + ',' +
           std::to_string(r.epoch) + ',' + csv_field(r.split) + ',' + format_number(r.loss) + ',' +
           format_number(r.accuracy_whole);
    for (std::size_t i = 0; i < parts; ++i) {
      out += ',';
      if (i < r.accuracy_parts.size()) out += format_number(r.accuracy_parts[i]);
    }
    out += ',' + std::to_string(r.param_count) + ',' + format_number(r.wall_seconds) + ',' + r.status + '\n';
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require<IoError>(static_cast<bool>(os), "cannot open '", path.string(), "' for writing");
  os << text;
  require<IoError>(static_cast<bool>(os), "write failed for '", path.string(), "'");
}

inline void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  write_text(path, metrics_csv(rows));
}

// TrainLog records as rows of one (experiment, method, seed).
inline void append_log(std::vector<MetricsRow>& rows, const TrainLog& log, const std::string& experiment,
                       const std::string& method, std::uint64_t seed, std::size_t param_count) {
  for (const auto& r : log.records)
    rows.push_back({experiment, method, seed, r.epoch, r.split, r.loss, r.accuracy_whole, r.accuracy_parts,
                    param_count, 0.0, "ok"});
}

}  // namespace kamal
