#ifndef SAE_IO_HPP
#define SAE_IO_HPP

// CSV ingestion with aggregated validation, table writers, run configuration
// and chain checkpoints.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sae/error.hpp"
#include "sae/model.hpp"
#include "sae/predict.hpp"
#include "sae/sampler.hpp"

namespace sae {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- CSV input

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  return out;
}

inline std::string fmt(double v, int digits = 17) {
  if (std::isnan(v)) return "NaN";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

/// One parsed table: column name -> index, rows with their file line numbers.
struct CsvTable {
  std::map<std::string, std::size_t> columns;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;
  std::vector<std::string> issues;  ///< malformed rows, reported together with field errors
};

inline CsvTable read_csv(const fs::path& path, const std::vector<std::string>& required) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  CsvTable t;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  std::vector<std::string> issues;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    auto fields = split_csv(line);
    if (!header) {
      if (!fields.empty() && fields[0].size() >= 3 && fields[0].compare(0, 3, "\xEF\xBB\xBF") == 0)
        fields[0] = fields[0].substr(3);
      for (std::size_t k = 0; k < fields.size(); ++k) t.columns[fields[k]] = k;
      for (const auto& r : required)
        if (!t.columns.count(r)) issues.push_back(path.string() + ": missing column '" + r + "'");
      if (!issues.empty()) throw ValidationError(issues);
      header = true;
      continue;
    }
    if (fields.size() != t.columns.size()) {
      issues.push_back(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.columns.size()) +
                       " fields, found " + std::to_string(fields.size()));
      continue;
    }
    t.rows.push_back(std::move(fields));
    t.lines.push_back(lineno);
  }
  if (!header) throw ValidationError({path.string() + ": empty file (no header row)"});
  t.issues = std::move(issues);
  return t;
}

/// Field accessors that record problems instead of throwing.
class RowReader {
 public:
  RowReader(const CsvTable& t, const fs::path& path, std::vector<std::string>& issues)
      : t_(t), path_(path.string()), issues_(issues) {}

  void at(std::size_t r) {
    row_ = r;
    ok_ = true;
  }
  bool ok() const { return ok_; }

  double number(const std::string& col) {
    const std::string& s = t_.rows[row_][t_.columns.at(col)];
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      fail(col + " = '" + s + "' is not a finite number");
      return 0.0;
    }
  }

  long long integer(const std::string& col) {
    const std::string& s = t_.rows[row_][t_.columns.at(col)];
    try {
      std::size_t used = 0;
      const long long v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      fail(col + " = '" + s + "' is not an integer");
      return 0;
    }
  }

  void fail(const std::string& msg) {
    issues_.push_back(path_ + ":" + std::to_string(t_.lines[row_]) + ": " + msg);
    ok_ = false;
  }

 private:
  const CsvTable& t_;
  std::string path_;
  std::vector<std::string>& issues_;
  std::size_t row_ = 0;
  bool ok_ = true;
};

struct CommonFields {
  Location loc;
  int stratum = 0;
  double v_tc = 0.0;
};

inline CommonFields read_common(RowReader& r, int q, std::map<long long, std::size_t>& seen_ids) {
  CommonFields c;
  const long long id = r.integer("id");
  if (r.ok() && !seen_ids.emplace(id, 0).second) r.fail("duplicate id " + std::to_string(id));
  c.loc = {r.number("x_km"), r.number("y_km"), static_cast<std::int64_t>(id)};
  const long long s = r.integer("stratum");
  if (s < 0 || (q > 0 && s >= q))
    r.fail("stratum " + std::to_string(s) + " outside 0.." + (q > 0 ? std::to_string(q - 1) : std::string("inf")));
  c.stratum = static_cast<int>(s);
  c.v_tc = r.number("v_tc_pct");
  if (!(c.v_tc >= 0.0 && c.v_tc <= 100.0)) r.fail("v_tc_pct = " + fmt(c.v_tc, 6) + " outside [0, 100]");
  return c;
}

}  // namespace detail

/// `num_strata` <= 0 accepts any non-negative stratum.
inline std::vector<PlotRecord> load_plots(const fs::path& path, int num_strata = 0) {
  const auto t = detail::read_csv(path, {"id", "x_km", "y_km", "stratum", "y_mgha", "x_ch_m", "v_tc_pct"});
  std::vector<std::string> issues = t.issues;
  detail::RowReader r(t, path, issues);
  std::map<long long, std::size_t> ids;
  std::vector<PlotRecord> out;
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    r.at(k);
    const auto c = detail::read_common(r, num_strata, ids);
    PlotRecord p{c.loc, r.number("y_mgha"), c.stratum, r.number("x_ch_m"), c.v_tc};
    if (r.ok()) out.push_back(p);
  }
  if (!issues.empty()) throw ValidationError(issues);
  for (const auto& p : out)
    if (p.y < 0.0 || p.x_ch < 0.0) {
      detail::warn(path.string() + ": negative y_mgha or x_ch_m present (kept)");
      break;
    }
  return out;
}

inline std::vector<LidarRecord> load_lidar(const fs::path& path, int num_strata = 0) {
  const auto t = detail::read_csv(path, {"id", "x_km", "y_km", "stratum", "x_ch_m", "v_tc_pct"});
  std::vector<std::string> issues = t.issues;
  detail::RowReader r(t, path, issues);
  std::map<long long, std::size_t> ids;
  std::vector<LidarRecord> out;
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    r.at(k);
    const auto c = detail::read_common(r, num_strata, ids);
    LidarRecord l{c.loc, c.stratum, r.number("x_ch_m"), c.v_tc};
    if (r.ok()) out.push_back(l);
  }
  if (!issues.empty()) throw ValidationError(issues);
  return out;
}

inline std::vector<PredictionCell> load_cells(const fs::path& path, int num_strata = 0) {
  const auto t = detail::read_csv(path, {"id", "x_km", "y_km", "stratum", "v_tc_pct", "area_ha"});
  std::vector<std::string> issues = t.issues;
  detail::RowReader r(t, path, issues);
  std::map<long long, std::size_t> ids;
  std::vector<PredictionCell> out;
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    r.at(k);
    const auto c = detail::read_common(r, num_strata, ids);
    const double area = r.number("area_ha");
    if (!(area > 0.0)) r.fail("area_ha must be positive");
    if (r.ok()) out.push_back({c.loc, c.stratum, c.v_tc, area});
  }
  if (!issues.empty()) throw ValidationError(issues);
  return out;
}

// --------------------------------------------------------------- CSV output

/// Writes a table atomically-enough (temp file then rename), with an optional
/// fingerprint header comment.
class TableWriter {
 public:
  TableWriter(const fs::path& path, const std::vector<std::string>& header, const std::string& fingerprint = {})
      : path_(path), tmp_(path.string() + ".tmp"), out_(tmp_, std::ios::binary) {
    if (!out_) throw InvalidArgument("cannot write " + path.string());
    if (!fingerprint.empty()) out_ << "# fingerprint: " << fingerprint << '\n';
    row(header);
  }
  ~TableWriter() {
    if (out_.is_open()) close();
  }
  TableWriter(const TableWriter&) = delete;
  TableWriter& operator=(const TableWriter&) = delete;

  void row(const std::vector<std::string>& cells) {
    for (std::size_t k = 0; k < cells.size(); ++k) out_ << (k ? "," : "") << cells[k];
    out_ << '\n';
  }

  void close() {
    out_.close();
    fs::rename(tmp_, path_);
  }

 private:
  fs::path path_, tmp_;
  std::ofstream out_;
};

inline void write_plots(const fs::path& path, std::span<const PlotRecord> plots, const std::string& fp = {}) {
  TableWriter w(path, {"id", "x_km", "y_km", "stratum", "y_mgha", "x_ch_m", "v_tc_pct"}, fp);
  using detail::fmt;
  for (const auto& p : plots)
    w.row({std::to_string(p.location.id), fmt(p.location.x), fmt(p.location.y), std::to_string(p.stratum), fmt(p.y),
           fmt(p.x_ch), fmt(p.v_tc)});
}

inline void write_lidar(const fs::path& path, std::span<const LidarRecord> lidar, const std::string& fp = {}) {
  TableWriter w(path, {"id", "x_km", "y_km", "stratum", "x_ch_m", "v_tc_pct"}, fp);
  using detail::fmt;
  for (const auto& l : lidar)
    w.row({std::to_string(l.location.id), fmt(l.location.x), fmt(l.location.y), std::to_string(l.stratum),
           fmt(l.x_ch), fmt(l.v_tc)});
}

inline void write_cells(const fs::path& path, std::span<const PredictionCell> cells, const std::string& fp = {}) {
  TableWriter w(path, {"id", "x_km", "y_km", "stratum", "v_tc_pct", "area_ha"}, fp);
  using detail::fmt;
  for (const auto& c : cells)
    w.row({std::to_string(c.location.id), fmt(c.location.x), fmt(c.location.y), std::to_string(c.stratum),
           fmt(c.v_tc), fmt(c.cell_area)});
}

// ------------------------------------------------------------ configuration

/// FNV-1a, 64 bit, as 16 hex digits.
inline std::string fnv1a_hex(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct StagePriorOverrides {
  std::optional<std::vector<double>> noise_scales;
  std::optional<std::vector<double>> effect_scales;
  std::optional<double> spatial_scale;
};

struct RunConfig {
  static constexpr int kSchemaVersion = 1;

  json raw;  ///< the configuration as read, after CLI overrides
  fs::path base_dir;

  std::optional<fs::path> plots, lidar, cells;
  int num_strata = 0;  ///< 0 = infer as max stratum + 1
  SubmodelSpec outcome_spec = SubmodelSpec::make(Variant::full);
  SubmodelSpec covariate_spec = SubmodelSpec::make(Variant::full);
  GraphOptions graph;
  DuplicatePolicy duplicates = DuplicatePolicy::reject;
  DecayPrior decay = DecayPrior::uniform_rate;
  double range_min_km = 1.0, range_max_km = 500.0;
  StagePriorOverrides outcome_priors, covariate_priors;
  McmcConfig mcmc;
  PredictionOptions prediction;
  std::vector<double> stability_ha{6.25, 12.5, 25.0, 50.0, 100.0};
  std::map<int, double> stratum_areas_ha;  ///< survey areas; empty = from cells
  long checkpoint_every = 0;               ///< iterations between checkpoint writes; 0 = end only
  fs::path output = ".";
  int threads = 1;

  /// Hash of the canonical configuration, excluding fields that cannot
  /// change results (thread count, output location).
  std::string fingerprint() const {
    json j = raw;
    j.erase("threads");
    j.erase("output");
    return fnv1a_hex(j.dump());
  }
};

namespace detail {

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed,
                           std::vector<std::string>& issues) {
  if (!j.is_object()) {
    issues.push_back(where + ": expected an object");
    return;
  }
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) issues.push_back(where + ": unknown key '" + k + "'");
  }
}

template <class T>
void get_to(const json& j, const char* key, T& out, const std::string& where, std::vector<std::string>& issues) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const std::exception& e) {
    issues.push_back(where + "." + key + ": " + e.what());
  }
}

inline StagePriorOverrides parse_stage_priors(const json& j, const std::string& where, std::vector<std::string>& issues) {
  StagePriorOverrides o;
  reject_unknown(j, where, {"noise_scales", "effect_scales", "spatial_scale"}, issues);
  std::vector<double> v;
  double d = 0.0;
  if (j.contains("noise_scales")) {
    get_to(j, "noise_scales", v, where, issues);
    o.noise_scales = v;
  }
  if (j.contains("effect_scales")) {
    get_to(j, "effect_scales", v, where, issues);
    o.effect_scales = v;
  }
  if (j.contains("spatial_scale")) {
    get_to(j, "spatial_scale", d, where, issues);
    o.spatial_scale = d;
  }
  return o;
}

}  // namespace detail

/// Parses a configuration document. `base_dir` anchors relative data paths.
inline RunConfig parse_config(const json& doc, const fs::path& base_dir = ".") {
  std::vector<std::string> issues;
  RunConfig c;
  c.raw = doc;
  c.base_dir = base_dir;
  detail::reject_unknown(doc, "config",
                         {"schema_version", "seed", "data", "model", "priors", "mcmc", "prediction", "stability",
                          "survey", "simulation", "checkpoint_every", "output", "threads"},
                         issues);
  if (!doc.is_object()) throw ValidationError(issues);
  if (!doc.contains("schema_version") || doc["schema_version"] != RunConfig::kSchemaVersion)
    issues.push_back("config.schema_version: must be " + std::to_string(RunConfig::kSchemaVersion));
  const bool seed_ok = doc.contains("seed") && doc["seed"].is_number_integer() &&
                       (doc["seed"].is_number_unsigned() || doc["seed"].get<std::int64_t>() >= 0);
  if (!seed_ok)
    issues.push_back("config.seed: required non-negative integer (reproducibility)");
  else
    c.mcmc.seed = doc["seed"].get<std::uint64_t>();
  c.prediction.seed = c.mcmc.seed;

  auto path_of = [&](const json& j, const char* key) -> std::optional<fs::path> {
    if (!j.contains(key)) return std::nullopt;
    if (!j[key].is_string()) {
      issues.push_back(std::string("config.data.") + key + ": expected a path string");
      return std::nullopt;
    }
    fs::path p = j[key].get<std::string>();
    return p.is_absolute() ? p : base_dir / p;
  };
  if (doc.contains("data")) {
    const auto& d = doc["data"];
    detail::reject_unknown(d, "config.data", {"plots", "lidar", "cells", "num_strata"}, issues);
    c.plots = path_of(d, "plots");
    c.lidar = path_of(d, "lidar");
    c.cells = path_of(d, "cells");
    detail::get_to(d, "num_strata", c.num_strata, "config.data", issues);
  }
  if (doc.contains("model")) {
    const auto& m = doc["model"];
    detail::reject_unknown(m, "config.model", {"variant", "covariate_variant", "neighbors", "ordering", "duplicates"},
                           issues);
    try {
      if (m.contains("variant")) c.outcome_spec = SubmodelSpec::parse(m["variant"].get<std::string>());
      if (m.contains("covariate_variant")) c.covariate_spec = SubmodelSpec::parse(m["covariate_variant"].get<std::string>());
    } catch (const std::exception& e) {
      issues.push_back(std::string("config.model: ") + e.what());
    }
    detail::get_to(m, "neighbors", c.graph.m, "config.model", issues);
    std::string ord = "coordinate", dup = "reject";
    detail::get_to(m, "ordering", ord, "config.model", issues);
    detail::get_to(m, "duplicates", dup, "config.model", issues);
    if (ord == "coordinate") c.graph.ordering = OrderingRule::coordinate;
    else if (ord == "maxmin") c.graph.ordering = OrderingRule::maxmin;
    else if (ord == "input") c.graph.ordering = OrderingRule::input;
    else issues.push_back("config.model.ordering: expected coordinate, maxmin or input");
    if (dup == "reject") c.duplicates = DuplicatePolicy::reject;
    else if (dup == "jitter") c.duplicates = DuplicatePolicy::jitter;
    else issues.push_back("config.model.duplicates: expected reject or jitter");
  }
  if (doc.contains("priors")) {
    const auto& p = doc["priors"];
    detail::reject_unknown(p, "config.priors", {"decay", "range_min_km", "range_max_km", "outcome", "covariate"}, issues);
    std::string decay = "uniform_rate";
    detail::get_to(p, "decay", decay, "config.priors", issues);
    if (decay == "uniform_rate") c.decay = DecayPrior::uniform_rate;
    else if (decay == "uniform_range") c.decay = DecayPrior::uniform_range;
    else issues.push_back("config.priors.decay: expected uniform_rate or uniform_range");
    detail::get_to(p, "range_min_km", c.range_min_km, "config.priors", issues);
    detail::get_to(p, "range_max_km", c.range_max_km, "config.priors", issues);
    if (p.contains("outcome")) c.outcome_priors = detail::parse_stage_priors(p["outcome"], "config.priors.outcome", issues);
    if (p.contains("covariate"))
      c.covariate_priors = detail::parse_stage_priors(p["covariate"], "config.priors.covariate", issues);
  }
  if (doc.contains("mcmc")) {
    const auto& m = doc["mcmc"];
    detail::reject_unknown(m, "config.mcmc", {"n_iter", "n_burn", "thin", "n_chains", "step_sd", "adapt", "target_accept"},
                           issues);
    detail::get_to(m, "n_iter", c.mcmc.n_iter, "config.mcmc", issues);
    detail::get_to(m, "n_burn", c.mcmc.n_burn, "config.mcmc", issues);
    detail::get_to(m, "thin", c.mcmc.thin, "config.mcmc", issues);
    detail::get_to(m, "n_chains", c.mcmc.n_chains, "config.mcmc", issues);
    detail::get_to(m, "step_sd", c.mcmc.step_sd, "config.mcmc", issues);
    detail::get_to(m, "adapt", c.mcmc.adapt, "config.mcmc", issues);
    detail::get_to(m, "target_accept", c.mcmc.target_accept, "config.mcmc", issues);
    try {
      c.mcmc.validate();
    } catch (const std::exception& e) {
      issues.push_back(std::string("config.mcmc: ") + e.what());
    }
  }
  if (doc.contains("prediction")) {
    const auto& p = doc["prediction"];
    detail::reject_unknown(p, "config.prediction",
                           {"mode", "neighbors", "max_draws", "allow_novel_strata", "truncate_at_zero"}, issues);
    std::string mode = "independent";
    detail::get_to(p, "mode", mode, "config.prediction", issues);
    if (mode == "independent") c.prediction.mode = PredictionMode::independent;
    else if (mode == "sequential") c.prediction.mode = PredictionMode::sequential;
    else issues.push_back("config.prediction.mode: expected independent or sequential");
    detail::get_to(p, "neighbors", c.prediction.m, "config.prediction", issues);
    detail::get_to(p, "max_draws", c.prediction.max_draws, "config.prediction", issues);
    detail::get_to(p, "allow_novel_strata", c.prediction.allow_novel_strata, "config.prediction", issues);
    detail::get_to(p, "truncate_at_zero", c.prediction.truncate_at_zero, "config.prediction", issues);
  }
  if (doc.contains("stability")) {
    const auto& s = doc["stability"];
    detail::reject_unknown(s, "config.stability", {"ha_per_location"}, issues);
    detail::get_to(s, "ha_per_location", c.stability_ha, "config.stability", issues);
  }
  if (doc.contains("survey")) {
    const auto& s = doc["survey"];
    detail::reject_unknown(s, "config.survey", {"stratum_areas_ha"}, issues);
    if (s.contains("stratum_areas_ha")) {
      if (!s["stratum_areas_ha"].is_object()) {
        issues.push_back("config.survey.stratum_areas_ha: expected an object keyed by stratum id");
      } else {
        for (const auto& [k, v] : s["stratum_areas_ha"].items()) {
          try {
            c.stratum_areas_ha[std::stoi(k)] = v.get<double>();
          } catch (const std::exception&) {
            issues.push_back("config.survey.stratum_areas_ha: bad entry '" + k + "'");
          }
        }
      }
    }
  }
  detail::get_to(doc, "checkpoint_every", c.checkpoint_every, "config", issues);
  if (doc.contains("output")) {
    std::string out;
    detail::get_to(doc, "output", out, "config", issues);
    c.output = fs::path(out).is_absolute() ? fs::path(out) : base_dir / out;
  } else {
    c.output = base_dir;
  }
  detail::get_to(doc, "threads", c.threads, "config", issues);
  if (c.threads < 1) issues.push_back("config.threads: must be at least 1");
  c.prediction.threads = c.threads;
  if (!issues.empty()) throw ValidationError(issues);
  return c;
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config " + path.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ValidationError({path.string() + ": " + e.what()});
  }
}

/// Reads a config file and applies CLI overrides (which enter the fingerprint,
/// except threads and output).
inline RunConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed = {},
                             std::optional<int> threads = {}, std::optional<fs::path> output = {}) {
  json doc = read_json_file(path);
  if (seed) doc["seed"] = *seed;
  if (threads) doc["threads"] = *threads;
  if (output) doc["output"] = fs::absolute(*output).string();
  return parse_config(doc, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

// --------------------------------------------------------------- checkpoints

namespace detail {

inline json to_binary(const Eigen::VectorXd& v) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(v.size()) * sizeof(double));
  if (!bytes.empty()) std::memcpy(bytes.data(), v.data(), bytes.size());
  return json::binary(std::move(bytes));
}

inline json to_binary(const Eigen::MatrixXd& m) {
  json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(m.size()) * sizeof(double));
  if (!bytes.empty()) std::memcpy(bytes.data(), m.data(), bytes.size());
  j["data"] = json::binary(std::move(bytes));
  return j;
}

inline Eigen::VectorXd vector_from(const json& j) {
  const auto& b = j.get_binary();
  if (b.size() % sizeof(double)) throw InvalidArgument("checkpoint: corrupt vector payload");
  Eigen::VectorXd v(static_cast<Eigen::Index>(b.size() / sizeof(double)));
  if (!b.empty()) std::memcpy(v.data(), b.data(), b.size());
  return v;
}

inline Eigen::MatrixXd matrix_from(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>(), cols = j.at("cols").get<Eigen::Index>();
  const auto& b = j.at("data").get_binary();
  if (b.size() != static_cast<std::size_t>(rows * cols) * sizeof(double)) throw InvalidArgument("checkpoint: corrupt matrix payload");
  Eigen::MatrixXd m(rows, cols);
  if (!b.empty()) std::memcpy(m.data(), b.data(), b.size());
  return m;
}

inline json state_to_json(const StageState& s) {
  return {{"intercept", s.intercept},
          {"stratum_intercepts", to_binary(s.stratum_intercepts)},
          {"slopes", to_binary(s.slopes)},
          {"stratum_slopes", to_binary(s.stratum_slopes)},
          {"effect_variances", to_binary(s.effect_variances)},
          {"spatial", to_binary(s.spatial)},
          {"sigma2", s.theta.sigma2},
          {"phi", s.theta.phi},
          {"noise_variances", to_binary(s.noise_variances)}};
}

inline StageState state_from_json(const json& j) {
  StageState s;
  s.intercept = j.at("intercept").get<double>();
  s.stratum_intercepts = vector_from(j.at("stratum_intercepts"));
  s.slopes = vector_from(j.at("slopes"));
  s.stratum_slopes = vector_from(j.at("stratum_slopes"));
  s.effect_variances = vector_from(j.at("effect_variances"));
  s.spatial = vector_from(j.at("spatial"));
  s.theta = {j.at("sigma2").get<double>(), j.at("phi").get<double>()};
  s.noise_variances = vector_from(j.at("noise_variances"));
  return s;
}

}  // namespace detail

struct CheckpointFile {
  std::string fingerprint;
  Stage stage = Stage::outcome;
  std::string variant;
  ChainCheckpoint chain;
};

inline void write_checkpoint(const fs::path& path, const CheckpointFile& f) {
  const auto& c = f.chain;
  json j;
  j["format"] = "sae-checkpoint";
  j["version"] = 1;
  j["fingerprint"] = f.fingerprint;
  j["stage"] = stage_name(f.stage);
  j["variant"] = f.variant;
  j["chain"] = c.chain;
  j["iteration"] = c.iteration;
  j["state"] = detail::state_to_json(c.state);
  j["rng_state"] = c.rng_state;
  j["step_sd"] = c.step_sd;
  j["post_accepted"] = c.post_accepted;
  j["post_proposed"] = c.post_proposed;
  j["late_burn_alpha"] = c.late_burn_alpha;
  j["late_burn_count"] = c.late_burn_count;
  json draws = json::array();
  for (const auto& d : c.samples.draws) draws.push_back(detail::state_to_json(d));
  j["draws"] = std::move(draws);
  j["loglik"] = detail::to_binary(c.samples.loglik);
  j["acceptance"] = c.samples.acceptance;
  j["burnin_acceptance"] = c.samples.burnin_acceptance;
  j["final_step_sd"] = c.samples.step_sd;
  const auto bytes = json::to_cbor(j);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  fs::rename(tmp, path);
}

inline CheckpointFile read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json j;
  try {
    j = json::from_cbor(bytes);
  } catch (const std::exception& e) {
    throw ValidationError({path.string() + ": not a checkpoint (" + e.what() + ")"});
  }
  if (j.value("format", "") != "sae-checkpoint") throw ValidationError({path.string() + ": not a checkpoint"});
  CheckpointFile f;
  f.fingerprint = j.at("fingerprint").get<std::string>();
  f.stage = j.at("stage").get<std::string>() == "outcome" ? Stage::outcome : Stage::covariate;
  f.variant = j.at("variant").get<std::string>();
  auto& c = f.chain;
  c.chain = j.at("chain").get<int>();
  c.iteration = j.at("iteration").get<long>();
  c.state = detail::state_from_json(j.at("state"));
  c.rng_state = j.at("rng_state").get<std::string>();
  c.step_sd = j.at("step_sd").get<double>();
  c.post_accepted = j.at("post_accepted").get<long>();
  c.post_proposed = j.at("post_proposed").get<long>();
  c.late_burn_alpha = j.at("late_burn_alpha").get<double>();
  c.late_burn_count = j.at("late_burn_count").get<long>();
  for (const auto& d : j.at("draws")) c.samples.draws.push_back(detail::state_from_json(d));
  c.samples.loglik = detail::matrix_from(j.at("loglik"));
  c.samples.acceptance = j.at("acceptance").get<double>();
  c.samples.burnin_acceptance = j.at("burnin_acceptance").get<double>();
  c.samples.step_sd = j.at("final_step_sd").get<double>();
  return f;
}

// ----------------------------------------------------------- draw matrices

/// Binary draws file: magic, rows, cols, then column-major doubles for x and y.
inline void write_draws(const fs::path& path, const PredictiveSamples& ps, const std::string& fingerprint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  const char magic[8] = {'S', 'A', 'E', 'D', 'R', 'A', 'W', '1'};
  out.write(magic, 8);
  char fp[16] = {};
  std::memcpy(fp, fingerprint.data(), std::min<std::size_t>(16, fingerprint.size()));
  out.write(fp, 16);
  const std::uint64_t rows = static_cast<std::uint64_t>(ps.y.rows()), cols = static_cast<std::uint64_t>(ps.y.cols());
  out.write(reinterpret_cast<const char*>(&rows), 8);
  out.write(reinterpret_cast<const char*>(&cols), 8);
  for (auto idx : ps.draw_index) {
    const std::uint64_t v = idx;
    out.write(reinterpret_cast<const char*>(&v), 8);
  }
  out.write(reinterpret_cast<const char*>(ps.x.data()), static_cast<std::streamsize>(ps.x.size() * 8));
  out.write(reinterpret_cast<const char*>(ps.y.data()), static_cast<std::streamsize>(ps.y.size() * 8));
}

inline PredictiveSamples read_draws(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path.string() + " (run predict first)");
  char magic[8];
  char fp[16];
  std::uint64_t rows = 0, cols = 0;
  in.read(magic, 8);
  in.read(fp, 16);
  in.read(reinterpret_cast<char*>(&rows), 8);
  in.read(reinterpret_cast<char*>(&cols), 8);
  if (!in || std::memcmp(magic, "SAEDRAW1", 8) != 0) throw ValidationError({path.string() + ": not a draws file"});
  PredictiveSamples ps;
  ps.draw_index.resize(rows);
  for (auto& v : ps.draw_index) {
    std::uint64_t d = 0;
    in.read(reinterpret_cast<char*>(&d), 8);
    v = static_cast<std::size_t>(d);
  }
  ps.x.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  ps.y.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  in.read(reinterpret_cast<char*>(ps.x.data()), static_cast<std::streamsize>(ps.x.size() * 8));
  in.read(reinterpret_cast<char*>(ps.y.data()), static_cast<std::streamsize>(ps.y.size() * 8));
  if (!in) throw ValidationError({path.string() + ": truncated draws file"});
  return ps;
}

}  // namespace sae

#endif  // SAE_IO_HPP
