#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "refuel/error.hpp"

namespace refuel {

using Json = nlohmann::json;

inline constexpr int kReportVersion = 1;

/// Shortest decimal that parses back to the same double.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256: digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

struct Curve {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  friend bool operator==(const Curve&, const Curve&) = default;
};

struct RunReport {
  std::string kind = "report";
  std::map<std::string, double> metrics;
  std::map<std::string, std::string> labels;
  std::map<std::string, Curve> curves;
  Json config = Json::object();
  std::vector<std::uint64_t> seeds;
  int version = kReportVersion;

  friend bool operator==(const RunReport&, const RunReport&) = default;
};

inline void validate_report(const RunReport& r) {
  for (const auto& [name, v] : r.metrics)
    if (!std::isfinite(v)) throw NumericalError("report metric '" + name + "' is not finite");
  for (const auto& [name, c] : r.curves)
    for (const auto& row : c.rows) {
      if (row.size() != c.columns.size()) throw SchemaError("curve '" + name + "' has a ragged row");
      for (double v : row)
        if (!std::isfinite(v)) throw NumericalError("curve '" + name + "' has a non-finite entry");
    }
}

inline Json report_to_json(const RunReport& r) {
  Json curves = Json::object();
  for (const auto& [name, c] : r.curves) curves[name] = {{"columns", c.columns}, {"rows", c.rows}};
  return Json{{"version", r.version}, {"kind", r.kind},     {"metrics", r.metrics}, {"labels", r.labels},
              {"curves", curves},     {"config", r.config}, {"seeds", r.seeds}};
}

inline RunReport report_from_json(const Json& j) {
  try {
    if (!j.is_object() || !j.contains("version")) throw SchemaError("report: missing version");
    if (j.at("version").get<int>() != kReportVersion)
      throw VersionError("report: unsupported version " + j.at("version").dump());
    RunReport r;
    r.kind = j.at("kind").get<std::string>();
    r.metrics = j.at("metrics").get<std::map<std::string, double>>();
    r.labels = j.at("labels").get<std::map<std::string, std::string>>();
    for (const auto& [name, c] : j.at("curves").items())
      r.curves[name] = Curve{c.at("columns").get<std::vector<std::string>>(),
                             c.at("rows").get<std::vector<std::vector<double>>>()};
    r.config = j.at("config");
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    return r;
  } catch (const Json::exception& e) {
    throw SchemaError(std::string("report: ") + e.what());
  }
}

/// Canonical form: sorted keys, no whitespace. The content hash is taken
/// over these bytes.
inline std::string canonical_dump(const Json& j) { return j.dump(); }

inline std::string curve_csv(const Curve& c) {
  std::string out;
  for (std::size_t i = 0; i < c.columns.size(); ++i) out += (i ? "," : "") + c.columns[i];
  out += '\n';
  for (const auto& row : c.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + format_double(row[i]);
    out += '\n';
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Writes report.json, report.sha256 and curves/<name>.csv. Returns the
/// content hash.
inline std::string emit_report(const RunReport& r, const std::filesystem::path& out_dir) {
  validate_report(r);
  const Json j = report_to_json(r);
  const std::string hash = sha256_hex(canonical_dump(j));
  write_text(out_dir / "report.json", j.dump(2) + "\n");
  write_text(out_dir / "report.sha256", hash + "  report.json\n");
  for (const auto& [name, c] : r.curves) write_text(out_dir / "curves" / (name + ".csv"), curve_csv(c));
  return hash;
}

inline RunReport load_report(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw SchemaError("report: " + std::string(e.what()));
  }
  return report_from_json(j);
}

}  // namespace refuel
