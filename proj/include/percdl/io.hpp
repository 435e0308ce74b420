#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "percdl/common.hpp"
#include "percdl/core.hpp"
#include "percdl/federated.hpp"
#include "percdl/metrics.hpp"
#include "percdl/solvers.hpp"
#include "percdl/synth.hpp"
#include "percdl/transforms.hpp"

namespace percdl::io {

using json = nlohmann::json;

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot open for writing: " + path.string());
  out << content;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json load_json(const std::filesystem::path& path) {
  return json::parse(read_text_file(path));
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Matrices and core types
// ---------------------------------------------------------------------------

inline json mat_to_json(const Mat& m) {
  json data = json::array();
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

inline Mat mat_from_json(const json& j) {
  const Index rows = j.at("rows").get<Index>();
  const Index cols = j.at("cols").get<Index>();
  const auto& data = j.at("data");
  if (static_cast<Index>(data.size()) != rows * cols)
    throw InvalidInput("mat_from_json: data length mismatch");
  Mat m(rows, cols);
  Index idx = 0;
  for (Index i = 0; i < rows; ++i)
    for (Index jj = 0; jj < cols; ++jj) m(i, jj) = data[static_cast<std::size_t>(idx++)].get<double>();
  return m;
}

inline json dictionary_to_json(const Dictionary& dict) {
  json atoms = json::array();
  for (const Mat& a : dict.atoms) atoms.push_back(mat_to_json(a));
  return {{"atom_count", dict.atom_count()},
          {"atom_length", dict.atom_length()},
          {"channel_count", dict.channel_count()},
          {"atoms", std::move(atoms)}};
}

inline Dictionary dictionary_from_json(const json& j) {
  Dictionary dict;
  for (const auto& a : j.at("atoms")) dict.atoms.push_back(mat_from_json(a));
  if (dict.atom_count() != j.at("atom_count").get<Index>())
    throw InvalidInput("dictionary_from_json: atom_count mismatch");
  return dict;
}

inline json activations_to_json(const ActivationSet& acts) {
  json lists = json::array();
  for (const auto& per_series : acts.lists) {
    json series = json::array();
    for (const auto& per_atom : per_series) {
      json atom = json::array();
      for (const Activation& a : per_atom)
        atom.push_back({{"position", a.position}, {"amplitude", a.amplitude}});
      series.push_back(std::move(atom));
    }
    lists.push_back(std::move(series));
  }
  return {{"subject_count", acts.subject_count()},
          {"atom_count", acts.atom_count()},
          {"sample_count", acts.sample_count},
          {"atom_length", acts.atom_length},
          {"lists", std::move(lists)}};
}

inline ActivationSet activations_from_json(const json& j) {
  ActivationSet acts;
  acts.sample_count = j.at("sample_count").get<Index>();
  acts.atom_length = j.at("atom_length").get<Index>();
  for (const auto& series : j.at("lists")) {
    std::vector<std::vector<Activation>> per_series;
    for (const auto& atom : series) {
      std::vector<Activation> list;
      for (const auto& a : atom)
        list.push_back({a.at("position").get<Index>(), a.at("amplitude").get<double>()});
      per_series.push_back(std::move(list));
    }
    acts.lists.push_back(std::move(per_series));
  }
  return acts;
}

inline json warp_config_to_json(const WarpConfig& w) {
  return {{"depth", w.depth}, {"width", w.width}, {"sigma", w.sigma},
          {"theta_margin", w.theta_margin}};
}

inline WarpConfig warp_config_from_json(const json& j) {
  WarpConfig w;
  w.depth = j.value("depth", w.depth);
  w.width = j.value("width", w.width);
  w.sigma = j.value("sigma", w.sigma);
  w.theta_margin = j.value("theta_margin", w.theta_margin);
  return w;
}

inline json transform_to_json(const TransformKind& kind) {
  json j = {{"type", to_string(kind.type)}};
  if (kind.type == TransformType::timewarp) j["warp"] = warp_config_to_json(kind.warp);
  return j;
}

inline TransformKind transform_from_json(const json& j) {
  TransformKind kind;
  kind.type = transform_type_from_string(j.at("type").get<std::string>());
  if (j.contains("warp")) kind.warp = warp_config_from_json(j.at("warp"));
  return kind;
}

inline json personalization_to_json(const PersonalizationMatrix& p) {
  json params = json::array();
  for (const auto& per_series : p.params) {
    json series = json::array();
    for (const Mat& a : per_series) series.push_back(mat_to_json(a));
    params.push_back(std::move(series));
  }
  return {{"subject_count", p.subject_count()},
          {"atom_count", p.atom_count()},
          {"depth", p.depth},
          {"width", p.width},
          {"params", std::move(params)}};
}

inline PersonalizationMatrix personalization_from_json(const json& j) {
  PersonalizationMatrix p;
  p.depth = j.at("depth").get<Index>();
  p.width = j.at("width").get<Index>();
  for (const auto& series : j.at("params")) {
    std::vector<Mat> per_series;
    for (const auto& a : series) per_series.push_back(mat_from_json(a));
    p.params.push_back(std::move(per_series));
  }
  return p;
}

inline json fit_config_to_json(const FitConfig& c) {
  return {{"lambda", c.lambda},
          {"n_init", c.n_init},
          {"n_perso", c.n_perso},
          {"ipu_steps", c.ipu_steps},
          {"ipu_step_scale", c.ipu_step_scale},
          {"ipu_fixed_step", c.ipu_fixed_step},
          {"ipu_mode", c.ipu_mode == IpuMode::polyak ? "polyak" : "fixed"},
          {"cdu_mode", c.cdu_mode == CduMode::least_squares ? "least_squares" : "barycenter"},
          {"sigma_interp", c.sigma_interp},
          {"theta_margin", c.theta_margin},
          {"recenter_atoms", c.recenter_atoms},
          {"rng_seed", c.rng_seed},
          {"parallelism", c.parallelism}};
}

inline FitConfig fit_config_from_json(const json& j) {
  FitConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.n_init = j.value("n_init", c.n_init);
  c.n_perso = j.value("n_perso", c.n_perso);
  c.ipu_steps = j.value("ipu_steps", c.ipu_steps);
  c.ipu_step_scale = j.value("ipu_step_scale", c.ipu_step_scale);
  c.ipu_fixed_step = j.value("ipu_fixed_step", c.ipu_fixed_step);
  if (j.contains("ipu_mode"))
    c.ipu_mode = j.at("ipu_mode").get<std::string>() == "fixed" ? IpuMode::fixed_step : IpuMode::polyak;
  if (j.contains("cdu_mode"))
    c.cdu_mode = j.at("cdu_mode").get<std::string>() == "barycenter" ? CduMode::barycenter
                                                                     : CduMode::least_squares;
  c.sigma_interp = j.value("sigma_interp", c.sigma_interp);
  c.theta_margin = j.value("theta_margin", c.theta_margin);
  c.recenter_atoms = j.value("recenter_atoms", c.recenter_atoms);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.parallelism = j.value("parallelism", c.parallelism);
  return c;
}

inline json fit_result_to_json(const FitResult& res, const TransformKind& kind) {
  return {{"transform", transform_to_json(kind)},
          {"dictionary", dictionary_to_json(res.dictionary)},
          {"activations", activations_to_json(res.activations)},
          {"personalization", personalization_to_json(res.personalization)},
          {"objective_trace", res.objective_trace},
          {"wall_time_seconds", res.wall_time_seconds},
          {"warnings", res.warnings}};
}

inline FitResult fit_result_from_json(const json& j) {
  FitResult res;
  res.dictionary = dictionary_from_json(j.at("dictionary"));
  res.activations = activations_from_json(j.at("activations"));
  res.personalization = personalization_from_json(j.at("personalization"));
  res.objective_trace = j.at("objective_trace").get<std::vector<double>>();
  res.wall_time_seconds = j.value("wall_time_seconds", 0.0);
  res.warnings = j.value("warnings", std::vector<std::string>{});
  return res;
}

// ---------------------------------------------------------------------------
// CSV dataset exchange: one file per series (header row of channel names, one
// row per sample) plus a JSON manifest.
// ---------------------------------------------------------------------------

inline void write_series_csv(const std::filesystem::path& path, const Mat& series,
                             const std::vector<std::string>& channel_names) {
  std::ostringstream out;
  for (Index p = 0; p < series.cols(); ++p) {
    if (p > 0) out << ',';
    out << (p < static_cast<Index>(channel_names.size())
                ? channel_names[static_cast<std::size_t>(p)]
                : "ch" + std::to_string(p));
  }
  out << '\n';
  for (Index i = 0; i < series.rows(); ++i) {
    for (Index p = 0; p < series.cols(); ++p) {
      if (p > 0) out << ',';
      out << format_double(series(i, p));
    }
    out << '\n';
  }
  write_text_file(path, out.str());
}

inline std::pair<Mat, std::vector<std::string>> read_series_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open series CSV: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput("empty series CSV: " + path.string());
  std::vector<std::string> names;
  {
    std::stringstream header(line);
    std::string cell;
    while (std::getline(header, cell, ',')) names.push_back(cell);
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::vector<double> values;
    while (std::getline(row, cell, ',')) values.push_back(std::stod(cell));
    if (values.size() != names.size())
      throw InvalidInput("ragged CSV row in " + path.string());
    rows.push_back(std::move(values));
  }
  Mat m(static_cast<Index>(rows.size()), static_cast<Index>(names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  return {std::move(m), std::move(names)};
}

// Writes s0000.csv ... plus manifest.json into dir; returns the manifest path.
inline std::filesystem::path write_dataset(const std::filesystem::path& dir,
                                           const TimeSeriesDataset& dataset) {
  std::filesystem::create_directories(dir);
  json files = json::array();
  std::vector<std::string> channel_names;
  for (Index p = 0; p < dataset.channel_count(); ++p)
    channel_names.push_back("ch" + std::to_string(p));
  for (std::size_t s = 0; s < dataset.series.size(); ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "s%04zu.csv", s);
    write_series_csv(dir / name, dataset.series[s], channel_names);
    files.push_back(name);
  }
  json manifest = {{"files", files},
                   {"labels", dataset.labels},
                   {"subject_count", dataset.subject_count()},
                   {"sample_count", dataset.sample_count()},
                   {"channel_count", dataset.channel_count()}};
  const auto path = dir / "manifest.json";
  write_json(path, manifest);
  return path;
}

inline TimeSeriesDataset load_dataset(const std::filesystem::path& manifest_path) {
  const json manifest = load_json(manifest_path);
  const auto dir = manifest_path.parent_path();
  TimeSeriesDataset dataset;
  for (const auto& f : manifest.at("files"))
    dataset.series.push_back(read_series_csv(dir / f.get<std::string>()).first);
  if (manifest.contains("labels"))
    dataset.labels = manifest.at("labels").get<std::vector<std::string>>();
  validate_dataset(dataset);
  if (manifest.contains("sample_count") &&
      dataset.sample_count() != manifest.at("sample_count").get<Index>())
    throw InvalidInput("dataset manifest: sample_count mismatch with CSV contents");
  if (manifest.contains("channel_count") &&
      dataset.channel_count() != manifest.at("channel_count").get<Index>())
    throw InvalidInput("dataset manifest: channel_count mismatch with CSV contents");
  return dataset;
}

// ---------------------------------------------------------------------------
// Synthetic specs and ground truth
// ---------------------------------------------------------------------------

inline json noise_to_json(const NoiseSpec& n) {
  switch (n.kind) {
    case NoiseSpec::Kind::none: return {{"kind", "none"}};
    case NoiseSpec::Kind::gaussian: return {{"kind", "gaussian"}, {"snr_db", n.snr_db}};
    case NoiseSpec::Kind::impulse: return {{"kind", "impulse"}, {"fraction", n.impulse_fraction}};
  }
  return {{"kind", "none"}};
}

inline NoiseSpec noise_from_json(const json& j) {
  NoiseSpec n;
  const std::string kind = j.value("kind", "none");
  if (kind == "none") {
    n.kind = NoiseSpec::Kind::none;
  } else if (kind == "gaussian") {
    n.kind = NoiseSpec::Kind::gaussian;
    n.snr_db = j.at("snr_db").get<double>();
  } else if (kind == "impulse") {
    n.kind = NoiseSpec::Kind::impulse;
    n.impulse_fraction = j.at("fraction").get<double>();
  } else {
    throw InvalidInput("unknown noise kind: " + kind);
  }
  return n;
}

inline json synth_spec_to_json(const SynthSpec& s) {
  json j = {{"S", s.S},       {"N", s.N},   {"K", s.K},
            {"r", s.r},       {"L", s.L},   {"P", s.P},
            {"seed", s.seed}, {"warp", warp_config_to_json(s.warp)},
            {"noise", noise_to_json(s.noise)}};
  if (!s.base_atoms.empty()) {
    json atoms = json::array();
    for (const Mat& a : s.base_atoms) atoms.push_back(mat_to_json(a));
    j["base_atoms"] = std::move(atoms);
  }
  return j;
}

inline SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s;
  s.S = j.value("S", s.S);
  s.N = j.value("N", s.N);
  s.K = j.value("K", s.K);
  s.r = j.value("r", s.r);
  s.L = j.value("L", s.L);
  s.P = j.value("P", s.P);
  s.seed = j.value("seed", s.seed);
  if (j.contains("warp")) s.warp = warp_config_from_json(j.at("warp"));
  if (j.contains("noise")) s.noise = noise_from_json(j.at("noise"));
  if (j.contains("base_atoms"))
    for (const auto& a : j.at("base_atoms")) s.base_atoms.push_back(mat_from_json(a));
  return s;
}

inline json ground_truth_to_json(const GroundTruth& truth) {
  return {{"dictionary", dictionary_to_json(truth.dictionary)},
          {"activations", activations_to_json(truth.activations)},
          {"parameters", personalization_to_json(truth.parameters)}};
}

inline std::pair<Dictionary, ActivationSet> ground_truth_from_json(const json& j) {
  return {dictionary_from_json(j.at("dictionary")), activations_from_json(j.at("activations"))};
}

// ---------------------------------------------------------------------------
// Communication stats and experiment reports
// ---------------------------------------------------------------------------

inline json comm_stats_to_json(const CommStats& stats) {
  json rounds = json::array();
  for (const auto& r : stats.rounds)
    rounds.push_back({{"round", r.round},
                      {"phase", r.phase},
                      {"up_messages", r.up_messages},
                      {"down_messages", r.down_messages},
                      {"up_scalars", r.up_scalars},
                      {"down_scalars", r.down_scalars}});
  return {{"rounds", std::move(rounds)}};
}

inline json message_to_json(const Message& m) {
  json j;
  j["direction"] = m.up ? "up" : "down";
  j["scalar_count"] = m.scalar_count();
  switch (m.kind) {
    case Message::Kind::broadcast: {
      j["kind"] = "broadcast";
      json atoms = json::array();
      for (const Mat& a : m.atoms) atoms.push_back(mat_to_json(a));
      j["atoms"] = std::move(atoms);
      j["scales"] = m.scales;
      break;
    }
    case Message::Kind::individual_barycenter: {
      j["kind"] = "individual_barycenter";
      json payload = json::array();
      for (std::size_t k = 0; k < m.present.size(); ++k) {
        if (m.present[k])
          payload.push_back({{"atom", k}, {"barycenter", mat_to_json(m.barycenters[k])}});
        else
          payload.push_back({{"atom", k}, {"absent", true}});
      }
      j["payload"] = std::move(payload);
      break;
    }
    case Message::Kind::weighted_stats: {
      j["kind"] = "weighted_stats";
      json payload = json::array();
      for (std::size_t k = 0; k < m.weights.size(); ++k) {
        if (m.weights[k] > 0)
          payload.push_back({{"atom", k},
                             {"weight", m.weights[k]},
                             {"params", mat_to_json(m.params[k])},
                             {"stats", mat_to_json(m.stats[k])}});
        else
          payload.push_back({{"atom", k}, {"absent", true}});
      }
      j["payload"] = std::move(payload);
      break;
    }
  }
  return j;
}

// Tidy CSV: one row per cell per replicate.
inline std::string experiment_report_to_csv(const ExperimentReport& report) {
  std::ostringstream out;
  out << "experiment,method,measure,axis,replicate,value,seed\n";
  for (const auto& cell : report.cells) {
    std::string axis;
    for (std::size_t i = 0; i < cell.axis.size(); ++i) {
      if (i > 0) axis += ';';
      axis += cell.axis[i].first + "=" + format_double(cell.axis[i].second);
    }
    for (std::size_t r = 0; r < cell.values.size(); ++r) {
      out << report.name << ',' << cell.method << ',' << cell.measure << ',' << axis << ',' << r
          << ',' << format_double(cell.values[r]) << ','
          << (r < cell.seeds.size() ? std::to_string(cell.seeds[r]) : "") << '\n';
    }
  }
  return out.str();
}

inline json experiment_report_to_json(const ExperimentReport& report) {
  json cells = json::array();
  for (const auto& cell : report.cells) {
    json axis = json::array();
    for (const auto& [name, value] : cell.axis) axis.push_back({{"name", name}, {"value", value}});
    cells.push_back({{"method", cell.method},
                     {"measure", cell.measure},
                     {"axis", std::move(axis)},
                     {"replicates", cell.values.size()},
                     {"mean", cell.mean()},
                     {"stddev", cell.stddev()},
                     {"ci95_halfwidth", cell.ci95_halfwidth()},
                     {"failed", cell.failed},
                     {"values", cell.values},
                     {"seeds", cell.seeds}});
  }
  json j = {{"name", report.name}, {"master_seed", report.master_seed}, {"cells", std::move(cells)}};
  j["summary"] = report.summary;
  return j;
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double wall_time_seconds = 0.0;
};

inline void write_run_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  json j = {{"command", m.command}, {"config", m.config},
            {"seed", m.seed},       {"inputs", m.inputs},
            {"outputs", m.outputs}, {"toolkit_version", kVersion},
            {"wall_time_seconds", m.wall_time_seconds}};
  write_json(dir / "run_manifest.json", j);
}

}  // namespace percdl::io
