// featcov: command-line front end.
//
//   featcov abstract  --model m.bnm --dataset X.bnd --layer 2:pca:2 --layer 3:pca:2 --out a.bna
//   featcov coverage  --bn a.bna [--dataset X.bnd] [--model m.bnm] [--epsilon e] [--report r.csv]
//   featcov infer     --bn a.bna --query L3.f0 [--evidence L2.f1=0,...] | --evidential --evidence ...
//   featcov monitor   --bn a.bna --dataset X.bnd --mode outlier|shift
//   featcov concolic  --model m.bnm --bn a.bna --seed-set X0.bnd --out dir/
//   featcov inspect   a.bna [--tables]
//
// Every subcommand accepts --config FILE (TOML/INI); flags override it.
// Exit status: 0 success, 1 domain error, 2 usage error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "featcov/featcov.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace featcov;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool parse_switch(const std::string &v, const std::string &flag) {
  if (v == "on" || v == "true" || v == "1")
    return true;
  if (v == "off" || v == "false" || v == "0")
    return false;
  throw UsageError(flag + " expects on or off, got '" + v + "'");
}

json provenance_json(const Provenance &p) {
  return {{"model_hash", p.model_hash}, {"dataset_hash", p.dataset_hash}, {"config_hash", p.config_hash},
          {"seed", p.seed},             {"epsilon", p.epsilon}};
}

std::string provenance_comment(const Provenance &p) {
  return "# model_hash=" + p.model_hash + " dataset_hash=" + p.dataset_hash + " config_hash=" + p.config_hash +
         " seed=" + std::to_string(p.seed) + "\n";
}

/// The model given on the command line, or the one recorded in the
/// abstraction's provenance (relative to the .bna file). Either way it must
/// hash to the recorded value.
Model resolve_model(const std::string &flag, const BNAbstraction &bn, const fs::path &bn_path) {
  fs::path path = flag;
  if (flag.empty()) {
    if (bn.provenance.model_path.empty())
      throw UsageError("--model is required: the abstraction records no model path");
    path = bn.provenance.model_path;
    if (path.is_relative())
      path = bn_path.parent_path() / path;
    if (!fs::exists(path))
      throw UsageError("recorded model " + path.string() + " not found; pass --model");
  }
  auto m = load_model(path);
  if (io::sha256_hex(serialize_model(m, io::DType::f64)) != bn.provenance.model_hash)
    throw Error("cli", "model " + path.string() + " does not match the abstraction's provenance");
  return m;
}

LayerFeatureConfig parse_layer(const std::string &s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  for (std::string p; std::getline(ss, p, ':');)
    parts.push_back(p);
  if (parts.empty() || parts.size() > 3)
    throw UsageError("--layer expects INDEX[:TECHNIQUE[:COMPONENTS]], got '" + s + "'");
  LayerFeatureConfig c;
  try {
    c.layer = std::stoul(parts[0]);
    if (parts.size() > 1)
      c.technique = parse_technique(parts[1]);
    if (parts.size() > 2)
      c.components = std::stoul(parts[2]);
  } catch (const std::logic_error &) {
    throw UsageError("bad --layer value '" + s + "'");
  }
  return c;
}

Evidence parse_evidence(const BNStructure &s, const std::string &text) {
  Evidence ev;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty())
      continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw UsageError("evidence item '" + item + "' is not NODE=INTERVAL");
    try {
      ev.emplace_back(s.find_node(item.substr(0, eq)), std::stoul(item.substr(eq + 1)));
    } catch (const std::logic_error &) {
      throw UsageError("bad evidence item '" + item + "'");
    }
  }
  return ev;
}

std::string csv_of(const BNStructure &s, const CoverageReport &rep, const Provenance &p) {
  std::ostringstream os;
  os << provenance_comment(p);
  write_coverage_csv(os, s, rep);
  return os.str();
}

json coverage_json(const BNStructure &s, const CoverageReport &rep) {
  json j = {{"epsilon", rep.epsilon},
            {"bfcov", to_double(rep.bfcov)},
            {"bfdcov", to_double(rep.bfdcov)},
            {"bfxcov", to_double(rep.bfxcov)},
            {"bfcov_exact", rep.bfcov.str()},
            {"bfdcov_exact", rep.bfdcov.str()},
            {"bfxcov_exact", rep.bfxcov.str()}};
  j["nodes"] = json::array();
  for (const auto &n : rep.nodes)
    j["nodes"].push_back(
        {{"node", s.node_name(n.node)}, {"kind", to_string(n.kind)}, {"covered", n.covered}, {"total", n.total}});
  return j;
}

void print_tables(std::ostream &os, const BNAbstraction &a) {
  const auto &s = a.structure;
  for (std::size_t id = 0; id < s.node_count(); ++id) {
    const auto &nt = a.tables.nodes[id];
    os << "table " << s.node_name(id) << '\n';
    for (std::size_t r = 0; r < nt.rows; ++r) {
      os << "  row " << r << " count " << nt.row_counts[r] << ':';
      for (std::size_t k = 0; k < nt.intervals; ++k)
        os << ' ' << io::format_real(nt.prob(r, k));
      os << '\n';
    }
  }
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Bayesian-network abstraction, coverage and concolic testing of feed-forward networks"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI configuration file (flags take precedence)");
  bool as_json = false;
  app.add_flag("--json", as_json, "Also print reports as JSON");

  // abstract
  auto *ab = app.add_subcommand("abstract", "Fit a feature-level Bayesian network abstraction");
  std::string ab_model, ab_data, ab_out, ab_strategy = "quantile", ab_ext = "on";
  std::vector<std::string> ab_layers;
  std::size_t ab_bins = 3;
  double ab_eps = 1e-3, ab_dmin = 0, ab_bw = 0, ab_rel_dmin = 0.01;
  std::uint64_t ab_seed = 0;
  ab->add_option("--model", ab_model, "Model (.bnm)")->required()->check(CLI::ExistingFile);
  ab->add_option("--dataset", ab_data, "Fitting dataset (.bnd)")->required()->check(CLI::ExistingFile);
  ab->add_option("--layer", ab_layers, "Analysed layer INDEX[:pca|pca_scaled|ica[:COMPONENTS]] (repeat)")
      ->required();
  ab->add_option("--strategy", ab_strategy, "uniform, quantile or kde")->capture_default_str();
  ab->add_option("--bins", ab_bins, "Bins for k-bins strategies")->capture_default_str();
  ab->add_option("--extended", ab_ext, "Add empty open end intervals (on/off)")->capture_default_str();
  ab->add_option("--dmin", ab_dmin, "Absolute density threshold (kde)");
  ab->add_option("--relative-dmin", ab_rel_dmin, "Density threshold relative to the peak (kde)")
      ->capture_default_str();
  ab->add_option("--bandwidth", ab_bw, "Kernel bandwidth (kde); Silverman's rule when absent");
  ab->add_option("--epsilon", ab_eps, "Default coverage threshold recorded with the abstraction")
      ->capture_default_str();
  ab->add_option("--seed", ab_seed, "Seed for randomised steps (ICA)")->capture_default_str();
  ab->add_option("--out", ab_out, "Output abstraction (.bna)")->required();

  // coverage
  auto *cv = app.add_subcommand("coverage", "Coverage of a test set");
  std::string cv_bn, cv_data, cv_model, cv_report;
  std::optional<double> cv_eps;
  cv->add_option("--bn", cv_bn, "Abstraction (.bna)")->required()->check(CLI::ExistingFile);
  cv->add_option("--dataset", cv_data, "Test set (.bnd); the abstraction's own tables when absent")
      ->check(CLI::ExistingFile);
  cv->add_option("--model", cv_model, "Model (.bnm); defaults to the recorded model")->check(CLI::ExistingFile);
  cv->add_option("--epsilon", cv_eps, "Coverage threshold; defaults to the recorded one");
  cv->add_option("--report", cv_report, "Write the CSV report here instead of stdout");

  // infer
  auto *in = app.add_subcommand("infer", "MAP and evidential queries");
  std::string in_bn, in_query, in_evidence;
  bool in_evidential = false;
  double in_smooth = 0;
  in->add_option("--bn", in_bn, "Abstraction (.bna)")->required()->check(CLI::ExistingFile);
  in->add_option("--query", in_query, "Query node (e.g. L3.f0) for a MAP query");
  in->add_option("--evidence", in_evidence, "Evidence NODE=INTERVAL[,NODE=INTERVAL...]");
  in->add_flag("--evidential", in_evidential, "Posterior tables of the first analysed layer given the evidence");
  in->add_option("--smoothing", in_smooth, "Additive smoothing constant (inference only)");

  // monitor
  auto *mo = app.add_subcommand("monitor", "Outlier and covariate-shift monitors");
  std::string mo_bn, mo_data, mo_model, mo_mode = "outlier", mo_report;
  double mo_threshold = 0.1;
  mo->add_option("--bn", mo_bn, "Abstraction (.bna)")->required()->check(CLI::ExistingFile);
  mo->add_option("--dataset", mo_data, "Operational inputs (.bnd)")->required()->check(CLI::ExistingFile);
  mo->add_option("--model", mo_model, "Model (.bnm); defaults to the recorded model")->check(CLI::ExistingFile);
  mo->add_option("--mode", mo_mode, "outlier or shift")->check(CLI::IsMember({"outlier", "shift"}))
      ->capture_default_str();
  mo->add_option("--threshold", mo_threshold, "Shift threshold on total-variation distance")
      ->capture_default_str();
  mo->add_option("--report", mo_report, "Write the CSV report here instead of stdout");

  // concolic
  auto *cc = app.add_subcommand("concolic", "Coverage-guided concolic test generation");
  std::string cc_model, cc_bn, cc_seeds, cc_out, cc_crit = "bfc", cc_repl = "off", cc_filter = "on",
                                                 cc_heur = "closeness", cc_relu = "phase", cc_dump;
  std::optional<double> cc_eps;
  std::size_t cc_iters = 100;
  double cc_linf = 0.3;
  std::uint64_t cc_seed = 0;
  bool cc_clip = false;
  cc->add_option("--model", cc_model, "Model (.bnm)")->required()->check(CLI::ExistingFile);
  cc->add_option("--bn", cc_bn, "Abstraction (.bna)")->required()->check(CLI::ExistingFile);
  cc->add_option("--seed-set", cc_seeds, "Initial test set X0 (.bnd, labelled)")->required()
      ->check(CLI::ExistingFile);
  cc->add_option("--criterion", cc_crit, "bfc (feature) or bfdc (feature dependence)")
      ->check(CLI::IsMember({"bfc", "bfdc"}))->capture_default_str();
  cc->add_option("--epsilon", cc_eps, "Coverage threshold; defaults to the recorded one");
  cc->add_option("--iters", cc_iters, "Iteration cap")->capture_default_str();
  cc->add_option("--oracle-linf", cc_linf, "Oracle L-infinity bound")->capture_default_str();
  cc->add_option("--replication", cc_repl, "Replication constraints (on/off)")->capture_default_str();
  cc->add_option("--improve-filter", cc_filter, "Keep only inputs closer to their target (on/off)")
      ->capture_default_str();
  cc->add_option("--heuristic", cc_heur, "Candidate selection: closeness, random or label-stratified")
      ->capture_default_str();
  cc->add_option("--relu", cc_relu, "ReLU encoding: phase (fixed from the candidate) or relax")
      ->check(CLI::IsMember({"phase", "relax"}))->capture_default_str();
  cc->add_flag("--clip", cc_clip, "Clip solver output into the input domain instead of rejecting it");
  cc->add_option("--seed", cc_seed, "Seed for the random heuristic")->capture_default_str();
  cc->add_option("--dump-lp", cc_dump, "Write every LP to this directory");
  cc->add_option("--out", cc_out, "Output directory")->required();

  // inspect
  auto *ip = app.add_subcommand("inspect", "Print structure, partitions and tables of an abstraction");
  std::string ip_bn;
  bool ip_tables = false;
  ip->add_option("bn", ip_bn, "Abstraction (.bna)")->required()->check(CLI::ExistingFile);
  ip->add_flag("--tables", ip_tables, "Print every table entry");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*ab) {
      AbstractionConfig cfg;
      for (const auto &l : ab_layers)
        cfg.layers.push_back(parse_layer(l));
      auto &d = cfg.discretisation;
      d.strategy = parse_strategy(ab_strategy);
      d.bins = ab_bins;
      d.extended = parse_switch(ab_ext, "--extended");
      d.density.relative_dmin = ab_rel_dmin;
      if (ab->count("--dmin"))
        d.density.dmin = ab_dmin;
      if (ab->count("--bandwidth"))
        d.density.bandwidth = ab_bw;
      cfg.epsilon = ab_eps;
      cfg.seed = ab_seed;
      const auto m = load_model(ab_model);
      const auto data = load_dataset(ab_data);
      auto bn = abstract(m, data, cfg);
      const fs::path out = ab_out;
      bn.provenance.model_path = fs::proximate(fs::absolute(ab_model), fs::absolute(out).parent_path()).string();
      save_abstraction(bn, out);
      std::cout << "abstraction: " << bn.structure.node_count() << " nodes over layers";
      for (auto l : bn.analysed_layers())
        std::cout << ' ' << l;
      std::cout << ", fitted on " << bn.tables.sample_count << " inputs -> " << out.string() << '\n';
      for (std::size_t id = 0; id < bn.structure.node_count(); ++id)
        if (bn.structure.nodes[id].partition.degenerate)
          std::cerr << "note: " << bn.structure.node_name(id) << ": " << bn.structure.nodes[id].partition.note << '\n';
      if (as_json)
        std::cout << json({{"nodes", bn.structure.node_count()}, {"provenance", provenance_json(bn.provenance)}})
                  << '\n';
      return 0;
    }

    if (*cv) {
      auto bn = load_abstraction(cv_bn);
      if (!cv_data.empty()) {
        const auto m = resolve_model(cv_model, bn, cv_bn);
        bn.tables = refit(bn, m, load_dataset(cv_data).inputs);
        bn.provenance.dataset_hash = io::sha256_hex(serialize_dataset(load_dataset(cv_data), io::DType::f64));
      }
      const auto rep = coverage_report(bn.structure, bn.tables, cv_eps.value_or(bn.provenance.epsilon));
      const auto csv = csv_of(bn.structure, rep, bn.provenance);
      if (cv_report.empty())
        std::cout << csv;
      else
        io::write_file_atomic(cv_report, csv);
      if (as_json) {
        auto j = coverage_json(bn.structure, rep);
        j["provenance"] = provenance_json(bn.provenance);
        std::cout << j.dump() << '\n';
      }
      return 0;
    }

    if (*in) {
      auto bn = load_abstraction(in_bn);
      if (in_smooth > 0)
        bn.tables = smoothed(bn.tables, in_smooth);
      const auto ev = parse_evidence(bn.structure, in_evidence);
      json j;
      if (in_evidential) {
        if (ev.empty())
          throw UsageError("--evidential needs --evidence");
        const auto post = evidential_update(bn.structure, bn.tables, ev);
        for (std::size_t j2 = 0; j2 < post.size(); ++j2) {
          const auto id = bn.structure.layers[0].nodes[j2];
          std::cout << bn.structure.node_name(id) << ':';
          for (double p : post[j2])
            std::cout << ' ' << io::format_real(p);
          std::cout << '\n';
          j["posterior"][bn.structure.node_name(id)] = post[j2];
        }
      } else {
        if (in_query.empty())
          throw UsageError("infer needs --query or --evidential");
        const auto q = bn.structure.find_node(in_query);
        const auto r = map_query(bn.structure, bn.tables, ev, q);
        std::cout << "map " << bn.structure.node_name(q) << " interval " << r.interval << " probability "
                  << io::format_real(r.probability) << '\n';
        j = {{"node", bn.structure.node_name(q)}, {"interval", r.interval}, {"probability", r.probability}};
      }
      if (as_json)
        std::cout << j.dump() << '\n';
      return 0;
    }

    if (*mo) {
      const auto bn = load_abstraction(mo_bn);
      const auto m = resolve_model(mo_model, bn, mo_bn);
      const auto data = load_dataset(mo_data);
      validate(data, m);
      std::ostringstream os;
      os << provenance_comment(bn.provenance);
      json j;
      if (mo_mode == "outlier") {
        std::size_t outliers = 0;
        os << "input,verdict,joint_probability\n";
        for (std::size_t n = 0; n < data.size(); ++n) {
          const auto v = monitor_outlier(bn, m, data.inputs[n]);
          outliers += v.kind == Verdict::outlier;
          os << n << ',' << (v.kind == Verdict::outlier ? "outlier" : "in_distribution") << ','
             << io::format_real(v.joint_probability) << '\n';
          j["verdicts"].push_back(v.kind == Verdict::outlier);
        }
        j["outliers"] = outliers;
        std::cerr << outliers << " of " << data.size() << " inputs flagged as outliers\n";
      } else {
        const auto rep = monitor_shift(bn, m, data.inputs, mo_threshold);
        os << "node,max_distance\n";
        for (std::size_t id = 0; id < rep.node_distance.size(); ++id) {
          os << bn.structure.node_name(id) << ',' << io::format_real(rep.node_distance[id]) << '\n';
          j["nodes"][bn.structure.node_name(id)] = rep.node_distance[id];
        }
        os << "all," << io::format_real(rep.global_distance) << '\n';
        j["global_distance"] = rep.global_distance;
        j["shift"] = rep.global_distance > mo_threshold;
        std::cerr << "global distance " << io::format_real(rep.global_distance)
                  << (rep.global_distance > mo_threshold ? " exceeds" : " within") << " threshold "
                  << io::format_real(mo_threshold) << '\n';
      }
      if (mo_report.empty())
        std::cout << os.str();
      else
        io::write_file_atomic(mo_report, os.str());
      if (as_json)
        std::cout << j.dump() << '\n';
      return 0;
    }

    if (*cc) {
      const auto m = load_model(cc_model);
      const auto bn = load_abstraction(cc_bn);
      const auto seeds = load_dataset(cc_seeds);
      ConcolicConfig cfg;
      cfg.criterion = cc_crit == "bfc" ? CriterionKind::feature : CriterionKind::feature_dependence;
      cfg.epsilon = cc_eps.value_or(bn.provenance.epsilon);
      cfg.max_iterations = cc_iters;
      cfg.oracle_linf = cc_linf;
      cfg.replication = parse_switch(cc_repl, "--replication");
      cfg.improvement_filter = parse_switch(cc_filter, "--improve-filter");
      cfg.heuristic = parse_heuristic(cc_heur);
      cfg.relu = cc_relu == "phase" ? ReluEncoding::phase_fixed : ReluEncoding::relaxation;
      cfg.clip = cc_clip;
      cfg.seed = cc_seed;
      if (!cc_dump.empty())
        cfg.dump_lp_dir = cc_dump;
      const auto res = run(m, bn, seeds, cfg);
      const fs::path out = cc_out;
      fs::create_directories(out);
      save_dataset(generated_inputs(res.state), out / "generated.bnd", io::DType::f64);
      std::ostringstream adv, log;
      adv << provenance_comment(bn.provenance);
      write_adversarial_csv(adv, res.state.adversarials);
      io::write_file_atomic(out / "adversarial.csv", adv.str());
      log << provenance_comment(bn.provenance);
      write_iteration_csv(log, bn.structure, res.log);
      io::write_file_atomic(out / "iterations.csv", log.str());
      io::write_file_atomic(out / "coverage.csv", csv_of(bn.structure, res.final_coverage, bn.provenance));
      json summary = {{"iterations", res.log.size()},
                      {"stop", to_string(res.stop)},
                      {"generated", res.state.tests.size() - res.state.seed_count},
                      {"adversarial", res.state.adversarials.size()},
                      {"rejected_seeds", res.rejected_seeds},
                      {"coverage_series", res.coverage_series},
                      {"coverage", coverage_json(bn.structure, res.final_coverage)},
                      {"provenance", provenance_json(bn.provenance)}};
      io::write_file_atomic(out / "summary.json", summary.dump(1) + "\n");
      std::cout << res.log.size() << " iterations (" << to_string(res.stop) << "), "
                << res.state.tests.size() - res.state.seed_count << " inputs generated, "
                << res.state.adversarials.size() << " adversarial; "
                << (cfg.criterion == CriterionKind::feature ? "bfcov " : "bfdcov ")
                << io::format_real(res.coverage_series.front()) << " -> "
                << io::format_real(res.coverage_series.back()) << '\n';
      if (res.rejected_seeds)
        std::cerr << res.rejected_seeds << " misclassified seed inputs were dropped\n";
      if (as_json)
        std::cout << summary.dump() << '\n';
      return 0;
    }

    if (*ip) {
      const auto bn = load_abstraction(ip_bn);
      const auto &s = bn.structure;
      std::cout << "nodes " << s.node_count() << '\n';
      std::cout << "edges " << s.edges().size() << '\n';
      for (auto [from, to] : s.edges())
        std::cout << "edge " << s.node_name(from) << " -> " << s.node_name(to) << '\n';
      std::cout << "samples " << bn.tables.sample_count << '\n';
      json j = {{"nodes", s.node_count()}, {"edges", s.edges().size()}, {"samples", bn.tables.sample_count}};
      for (std::size_t i = 0; i < s.layers.size(); ++i) {
        const auto &fm = bn.feature_maps[i];
        std::cout << "layer " << s.layers[i].model_layer << ' ' << to_string(fm.technique) << " components "
                  << fm.components() << " combinations " << s.layers[i].combos << '\n';
      }
      for (std::size_t id = 0; id < s.node_count(); ++id) {
        const auto &n = s.nodes[id];
        const auto &nt = bn.tables.nodes[id];
        std::cout << "node " << s.node_name(id) << " intervals " << n.intervals() << " table " << nt.rows << 'x'
                  << nt.intervals << " strategy " << to_string(n.partition.strategy) << " boundaries";
        for (double b : n.partition.boundaries)
          std::cout << ' ' << io::format_real(b);
        if (n.partition.degenerate)
          std::cout << " (" << n.partition.note << ')';
        std::cout << '\n';
        j["tables"][s.node_name(id)] = {{"rows", nt.rows}, {"intervals", nt.intervals}};
      }
      if (ip_tables)
        print_tables(std::cout, bn);
      std::cout << "provenance model " << bn.provenance.model_hash << " dataset " << bn.provenance.dataset_hash
                << " config " << bn.provenance.config_hash << " seed " << bn.provenance.seed << '\n';
      if (as_json) {
        j["provenance"] = provenance_json(bn.provenance);
        std::cout << j.dump() << '\n';
      }
      return 0;
    }
  } catch (const UsageError &e) {
    std::cerr << "featcov: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << e.what() << '\n';
    return 1;
  }
  return 2;
}
