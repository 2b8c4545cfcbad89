#pragma once

// The fitted abstraction of a network over a dataset: feature maps,
// partitions, network structure and tables, plus provenance. Also hosts the
// fitting pipeline, the runtime monitors and the .bna container.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "featcov/binary_io.hpp"
#include "featcov/bn.hpp"
#include "featcov/discretise.hpp"
#include "featcov/feature.hpp"
#include "featcov/model.hpp"
#include "featcov/model_io.hpp"

namespace featcov {

struct LayerFeatureConfig {
  std::size_t layer = 0; ///< Activations index (0 is the input layer)
  Technique technique = Technique::pca;
  std::size_t components = 2;
};

struct AbstractionConfig {
  std::vector<LayerFeatureConfig> layers;
  DiscretisationConfig discretisation;
  double epsilon = 1e-3;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["layers"] = nlohmann::json::array();
    for (const auto &l : layers)
      j["layers"].push_back({{"layer", l.layer}, {"technique", to_string(l.technique)}, {"components", l.components}});
    const auto &d = discretisation;
    j["discretisation"] = {{"strategy", to_string(d.strategy)},
                           {"bins", d.bins},
                           {"extended", d.extended},
                           {"relative_dmin", d.density.relative_dmin}};
    if (d.density.dmin)
      j["discretisation"]["dmin"] = *d.density.dmin;
    if (d.density.bandwidth)
      j["discretisation"]["bandwidth"] = *d.density.bandwidth;
    j["epsilon"] = epsilon;
    j["seed"] = seed;
    return j;
  }
};

struct Provenance {
  std::string model_hash;
  std::string dataset_hash;
  std::string config_hash;
  std::string config; ///< JSON text of the AbstractionConfig
  std::string model_path;
  double epsilon = 1e-3;
  std::uint64_t seed = 0;
};

struct BNAbstraction {
  BNStructure structure;
  ProbabilityTables tables;
  std::vector<FeatureMap> feature_maps; ///< one per analysed layer
  Provenance provenance;

  std::vector<std::size_t> analysed_layers() const {
    std::vector<std::size_t> out;
    for (const auto &L : structure.layers)
      out.push_back(L.model_layer);
    return out;
  }

  std::vector<Partition> partitions(std::size_t layer_pos) const {
    std::vector<Partition> out;
    for (auto id : structure.layers.at(layer_pos).nodes)
      out.push_back(structure.nodes[id].partition);
    return out;
  }
};

/// Feature values of every analysed layer for one evaluated input.
inline std::vector<std::vector<double>> features_of(const BNAbstraction &a, const Activations &act) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < a.structure.layers.size(); ++i)
    out.push_back(project(a.feature_maps[i], act[a.structure.layers[i].model_layer].pre));
  return out;
}

inline IntervalTrace trace_of_features(const BNAbstraction &a, const std::vector<std::vector<double>> &feats) {
  IntervalTrace tr;
  for (std::size_t i = 0; i < feats.size(); ++i)
    tr.push_back(elicited_combination(a.partitions(i), feats[i]));
  return tr;
}

inline IntervalTrace trace_of(const BNAbstraction &a, const Activations &act) {
  return trace_of_features(a, features_of(a, act));
}

inline std::vector<IntervalTrace> traces_of(const BNAbstraction &a, const Model &m,
                                            const std::vector<std::vector<double>> &inputs) {
  std::vector<IntervalTrace> out;
  out.reserve(inputs.size());
  for (const auto &x : inputs)
    out.push_back(trace_of(a, forward(m, x)));
  return out;
}

/// Pre-activation matrices (samples x neurons) of the requested layers.
inline std::vector<Eigen::MatrixXd> collect_preacts(const Model &m, const std::vector<std::vector<double>> &inputs,
                                                    const std::vector<std::size_t> &layers) {
  std::vector<Eigen::MatrixXd> out;
  for (auto l : layers) {
    if (l > m.layers.size())
      throw ArgumentError("abstraction", "model has no layer " + std::to_string(l));
    out.emplace_back(static_cast<Eigen::Index>(inputs.size()), static_cast<Eigen::Index>(m.layer_size(l)));
  }
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    auto act = forward(m, inputs[n]);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto &pre = act[layers[i]].pre;
      for (std::size_t k = 0; k < pre.size(); ++k)
        out[i](static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) = pre[k];
    }
  }
  return out;
}

inline void check_abstraction(const BNAbstraction &a) {
  if (a.tables.sample_count == 0)
    throw ArgumentError("abstraction", "abstraction has no fitted data");
  if (a.feature_maps.size() != a.structure.layers.size())
    throw ShapeError("abstraction", "one feature map per analysed layer is required");
  for (std::size_t i = 0; i < a.feature_maps.size(); ++i)
    if (a.feature_maps[i].components() != a.structure.layers[i].nodes.size())
      throw ShapeError("abstraction", "feature map of layer " + std::to_string(a.structure.layers[i].model_layer) +
                                          " does not match its node count");
}

/// Fits feature maps and partitions on `train`, builds the structure and
/// fits the tables on the same inputs.
inline BNAbstraction abstract(const Model &m, const Dataset &train, const AbstractionConfig &cfg) {
  validate(m);
  validate(train, m);
  if (train.size() < 2)
    throw ArgumentError("abstraction", "need at least 2 training inputs");
  if (cfg.layers.size() < 2)
    throw ArgumentError("abstraction", "need at least 2 analysed layers");
  std::vector<std::size_t> layers;
  for (const auto &l : cfg.layers)
    layers.push_back(l.layer);
  auto preacts = collect_preacts(m, train.inputs, layers);

  BNAbstraction a;
  std::vector<std::vector<Partition>> parts;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    a.feature_maps.push_back(
        fit_feature_map(cfg.layers[i].technique, preacts[i], cfg.layers[i].components, cfg.seed, layers[i]));
    Eigen::MatrixXd feats = project_dataset(a.feature_maps.back(), preacts[i]);
    std::vector<Partition> ps;
    for (Eigen::Index j = 0; j < feats.cols(); ++j) {
      std::vector<double> col(feats.col(j).data(), feats.col(j).data() + feats.rows());
      auto p = discretise(col, cfg.discretisation);
      p.layer = layers[i];
      p.component = static_cast<std::size_t>(j);
      ps.push_back(std::move(p));
    }
    parts.push_back(std::move(ps));
  }
  a.structure = build_structure(layers, parts);
  a.tables = fit_tables(a.structure, traces_of(a, m, train.inputs));

  a.provenance.model_hash = io::sha256_hex(serialize_model(m, io::DType::f64));
  a.provenance.dataset_hash = io::sha256_hex(serialize_dataset(train, io::DType::f64));
  a.provenance.config = cfg.to_json().dump();
  a.provenance.config_hash = io::sha256_hex(a.provenance.config);
  a.provenance.epsilon = cfg.epsilon;
  a.provenance.seed = cfg.seed;
  return a;
}

/// Tables of the same structure fitted on another dataset.
inline ProbabilityTables refit(const BNAbstraction &a, const Model &m, const std::vector<std::vector<double>> &inputs) {
  auto traces = traces_of(a, m, inputs);
  return fit_tables(a.structure, traces);
}

// --- monitors -----------------------------------------------------------------

enum class Verdict { in_distribution, outlier };

struct MonitorVerdict {
  Verdict kind = Verdict::in_distribution;
  double joint_probability = 0;
  IntervalTrace trace;
};

/// An input whose elicited combinations have joint probability zero is an
/// outlier.
inline MonitorVerdict monitor_outlier(const BNAbstraction &a, const Model &m, std::span<const double> x) {
  check_abstraction(a);
  if (a.tables.smoothing != 0.0)
    throw ArgumentError("monitor", "outlier detection is undefined on smoothed tables");
  MonitorVerdict v;
  v.trace = trace_of(a, forward(m, x));
  v.joint_probability = joint_probability(a.structure, a.tables, v.trace);
  v.kind = v.joint_probability == 0.0 ? Verdict::outlier : Verdict::in_distribution;
  return v;
}

struct ShiftRow {
  std::size_t node = 0;
  std::size_t row = 0;
  double distance = 0;
};

struct ShiftReport {
  std::vector<double> node_distance; ///< max over compared rows, per node
  double global_distance = 0;
  double threshold = 0;
  std::vector<ShiftRow> flagged; ///< rows whose distance exceeds the threshold
  ProbabilityTables operational;
};

/// Refits the tables on the operational inputs and compares them row by
/// row with the fitted ones (total variation). Rows the operational data
/// does not exercise are skipped; rows it exercises that the fitting data
/// never did count as distance 1.
inline ShiftReport monitor_shift(const BNAbstraction &a, const Model &m,
                                 const std::vector<std::vector<double>> &operational, double threshold = 0.1) {
  check_abstraction(a);
  if (operational.empty())
    throw ArgumentError("monitor", "operational dataset is empty");
  ShiftReport rep;
  rep.threshold = threshold;
  rep.operational = refit(a, m, operational);
  rep.node_distance.assign(a.structure.node_count(), 0.0);
  for (std::size_t id = 0; id < a.structure.node_count(); ++id) {
    const auto &base = a.tables.nodes[id];
    const auto &op = rep.operational.nodes[id];
    for (std::size_t r = 0; r < op.rows; ++r) {
      if (!op.observed(r))
        continue;
      double d = 1.0;
      if (base.observed(r)) {
        d = 0.0;
        for (std::size_t k = 0; k < op.intervals; ++k)
          d += std::abs(op.prob(r, k) - base.prob(r, k));
        d *= 0.5;
      }
      rep.node_distance[id] = std::max(rep.node_distance[id], d);
      if (d > threshold)
        rep.flagged.push_back({id, r, d});
    }
    rep.global_distance = std::max(rep.global_distance, rep.node_distance[id]);
  }
  return rep;
}

// --- .bna container -------------------------------------------------------------
//
//   BNA 1
//   json <n>
//   <n bytes of JSON: provenance, layers, nodes, table layout>
//   <binary payload: feature maps (.bnf blobs), boundaries, counts, probabilities>

inline std::string serialize_abstraction(const BNAbstraction &a) {
  check_abstraction(a);
  io::ByteWriter payload;
  nlohmann::json j;
  const auto &p = a.provenance;
  j["provenance"] = {{"model_hash", p.model_hash},   {"dataset_hash", p.dataset_hash},
                     {"config_hash", p.config_hash}, {"config", p.config},
                     {"model_path", p.model_path},   {"epsilon", p.epsilon},
                     {"seed", p.seed}};
  j["sample_count"] = a.tables.sample_count;
  j["smoothing"] = a.tables.smoothing;
  j["layers"] = nlohmann::json::array();
  for (std::size_t i = 0; i < a.structure.layers.size(); ++i) {
    auto blob = serialize_feature_map(a.feature_maps[i]);
    j["layers"].push_back({{"model_layer", a.structure.layers[i].model_layer},
                           {"nodes", a.structure.layers[i].nodes},
                           {"feature_map", {{"offset", payload.size()}, {"length", blob.size()}}}});
    payload.put_text(blob);
  }
  j["nodes"] = nlohmann::json::array();
  for (std::size_t id = 0; id < a.structure.node_count(); ++id) {
    const auto &n = a.structure.nodes[id];
    const auto &nt = a.tables.nodes[id];
    nlohmann::json jn = {{"layer_pos", n.layer_pos},
                         {"component", n.component},
                         {"strategy", to_string(n.partition.strategy)},
                         {"extended", n.partition.extended},
                         {"degenerate", n.partition.degenerate},
                         {"note", n.partition.note},
                         {"boundary_count", n.partition.boundaries.size()},
                         {"boundaries_offset", payload.size()}};
    for (double b : n.partition.boundaries)
      payload.put_f64(b);
    jn["rows"] = nt.rows;
    jn["intervals"] = nt.intervals;
    jn["counts_offset"] = payload.size();
    for (auto c : nt.counts)
      payload.put_u64(c);
    jn["row_counts_offset"] = payload.size();
    for (auto c : nt.row_counts)
      payload.put_u64(c);
    jn["probs_offset"] = payload.size();
    for (double v : nt.probs)
      payload.put_f64(v);
    j["nodes"].push_back(std::move(jn));
  }
  auto text = j.dump(1);
  return "BNA 1\njson " + std::to_string(text.size()) + "\n" + text + payload.bytes();
}

inline BNAbstraction parse_abstraction(std::string_view bytes) {
  const std::string mod = "abstraction";
  auto line = [&](std::size_t &pos) {
    auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos)
      throw FormatError(mod, "truncated header");
    auto s = std::string(bytes.substr(pos, nl - pos));
    pos = nl + 1;
    return s;
  };
  std::size_t pos = 0;
  if (line(pos) != "BNA 1")
    throw FormatError(mod, "bad magic or unsupported version");
  auto toks = io::split_ws(line(pos));
  if (toks.size() != 2 || toks[0] != "json")
    throw FormatError(mod, "missing json length");
  const auto len = static_cast<std::size_t>(io::parse_int(toks[1], mod));
  if (pos + len > bytes.size())
    throw FormatError(mod, "truncated json header");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(mod, std::string("bad json header: ") + e.what());
  }
  const auto payload = bytes.substr(pos + len);
  io::ByteReader r(payload, mod);

  BNAbstraction a;
  try {
    const auto &p = j.at("provenance");
    a.provenance.model_hash = p.at("model_hash").get<std::string>();
    a.provenance.dataset_hash = p.at("dataset_hash").get<std::string>();
    a.provenance.config_hash = p.at("config_hash").get<std::string>();
    a.provenance.config = p.at("config").get<std::string>();
    a.provenance.model_path = p.at("model_path").get<std::string>();
    a.provenance.epsilon = p.at("epsilon").get<double>();
    a.provenance.seed = p.at("seed").get<std::uint64_t>();

    std::vector<std::size_t> model_layers;
    for (const auto &jl : j.at("layers")) {
      model_layers.push_back(jl.at("model_layer").get<std::size_t>());
      const auto off = jl.at("feature_map").at("offset").get<std::size_t>();
      const auto flen = jl.at("feature_map").at("length").get<std::size_t>();
      if (off + flen > payload.size())
        throw FormatError(mod, "feature map block out of range");
      a.feature_maps.push_back(parse_feature_map(payload.substr(off, flen)));
    }
    std::vector<std::vector<Partition>> parts(model_layers.size());
    std::vector<NodeTable> tables;
    for (const auto &jn : j.at("nodes")) {
      Partition part;
      const auto lp = jn.at("layer_pos").get<std::size_t>();
      if (lp >= model_layers.size())
        throw FormatError(mod, "node refers to unknown layer");
      part.layer = model_layers[lp];
      part.component = jn.at("component").get<std::size_t>();
      part.strategy = parse_strategy(jn.at("strategy").get<std::string>());
      part.extended = jn.at("extended").get<bool>();
      part.degenerate = jn.at("degenerate").get<bool>();
      part.note = jn.at("note").get<std::string>();
      r.seek(jn.at("boundaries_offset").get<std::size_t>());
      part.boundaries = r.get_reals(jn.at("boundary_count").get<std::size_t>(), io::DType::f64);
      for (std::size_t b = 1; b < part.boundaries.size(); ++b)
        if (!(part.boundaries[b] > part.boundaries[b - 1]))
          throw FormatError(mod, "partition boundaries are not increasing");
      if (part.component != parts[lp].size())
        throw FormatError(mod, "nodes are not in component order");
      parts[lp].push_back(std::move(part));

      NodeTable nt;
      nt.rows = jn.at("rows").get<std::size_t>();
      nt.intervals = jn.at("intervals").get<std::size_t>();
      r.seek(jn.at("counts_offset").get<std::size_t>());
      nt.counts.resize(nt.rows * nt.intervals);
      for (auto &c : nt.counts)
        c = r.get_u64();
      r.seek(jn.at("row_counts_offset").get<std::size_t>());
      nt.row_counts.resize(nt.rows);
      for (auto &c : nt.row_counts)
        c = r.get_u64();
      r.seek(jn.at("probs_offset").get<std::size_t>());
      nt.probs = r.get_reals(nt.rows * nt.intervals, io::DType::f64);
      tables.push_back(std::move(nt));
    }
    a.structure = build_structure(model_layers, parts);
    if (tables.size() != a.structure.node_count())
      throw FormatError(mod, "table count differs from node count");
    for (std::size_t id = 0; id < tables.size(); ++id) {
      const auto &n = a.structure.nodes[id];
      const std::size_t rows = n.layer_pos == 0 ? 1 : a.structure.layers[n.layer_pos - 1].combos;
      if (tables[id].rows != rows || tables[id].intervals != n.intervals())
        throw FormatError(mod, "table of " + a.structure.node_name(id) + " has the wrong shape");
    }
    a.tables.nodes = std::move(tables);
    a.tables.sample_count = j.at("sample_count").get<std::uint64_t>();
    a.tables.smoothing = j.at("smoothing").get<double>();
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(mod, std::string("bad json header: ") + e.what());
  }
  check_abstraction(a);
  return a;
}

inline void save_abstraction(const BNAbstraction &a, const std::filesystem::path &path) {
  io::write_file_atomic(path, serialize_abstraction(a));
}

inline BNAbstraction load_abstraction(const std::filesystem::path &path) {
  return parse_abstraction(io::read_file(path, "abstraction"));
}

} // namespace featcov
