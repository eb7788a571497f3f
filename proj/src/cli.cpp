#include "histoprog/cli.hpp"

#include <algorithm>
#include <functional>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "histoprog/errors.hpp"
#include "histoprog/pipeline.hpp"

namespace histoprog::cli {

namespace {

std::string option_name(const std::string& section, const std::string& key) {
  std::string name = "--" + (section.empty() ? key : section + "-" + key);
  std::replace(name.begin(), name.end(), '_', '-');
  return name;
}

// Values from a sectioned INI file fill every option not given on the command line.
void apply_config_file(CLI::App& app, const std::string& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ValidationError("config " + path + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  auto apply = [&](const std::string& section, const std::string& key, const std::string& value) {
    const std::string name = option_name(section, key);
    CLI::Option* opt = app.get_option_no_throw(name);
    if (!opt || name == "--config") {
      throw ValidationError("config " + path + ": unknown key '" + (section.empty() ? "" : section + ".") + key + "'");
    }
    if (opt->count() > 0) return;
    opt->add_result(value);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ValidationError("config " + path + ": bad value for " + section + "." + key + ": " + e.what());
    }
  };
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      apply("", name, node.data());
    } else {
      for (const auto& [key, leaf] : node) apply(name, key, leaf.data());
    }
  }
}

}  // namespace

int run(int argc, const char* const* argv) {
  PipelineConfig cfg;
  std::string config_path;
  CLI::App app{"Explainable survival prediction from tile-embedding bags", "histoprog"};
  app.require_subcommand(1);

  app.add_option("--config", config_path, "Sectioned INI config; command-line flags take precedence");
  app.add_option("--out,--io-output-dir", cfg.io.output_dir, "Output directory")->capture_default_str();
  app.add_option("--seed", cfg.seed, "Base seed for every stage")->capture_default_str();
  app.add_option("--threads", cfg.threads, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--manifest,--io-manifest", cfg.io.manifest, "Manifest TSV (default <out>/cohort/manifest.tsv)");

  app.add_option("--mil-variant", cfg.mil.variant, "abmil-ib, abmil or additive-mil")->capture_default_str();
  app.add_option("--mil-lr", cfg.mil.lr)->capture_default_str();
  app.add_option("--mil-weight-decay", cfg.mil.weight_decay)->capture_default_str();
  app.add_option("--mil-epochs", cfg.mil.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--mil-grad-accum", cfg.mil.grad_accum)->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--mil-k-folds", cfg.mil.k_folds)->check(CLI::Range(2, 1000))->capture_default_str();
  app.add_option("--mil-seed", cfg.mil.seed);

  app.add_option("--sae-n-latents", cfg.sae.n_latents)->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--sae-k", cfg.sae.k)->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--sae-lr", cfg.sae.lr)->capture_default_str();
  app.add_option("--sae-epochs", cfg.sae.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--sae-batch-size", cfg.sae.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--sae-tail-fraction", cfg.sae.tail_fraction)->check(CLI::Range(0.0, 1.0))->capture_default_str();
  app.add_option("--sae-norm-target", cfg.sae.norm_target, "0 means sqrt(dim)")->capture_default_str();
  app.add_option("--sae-seed", cfg.sae.seed);

  app.add_option("--selection-n-per-sign", cfg.selection.n_per_sign)->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--selection-top-m", cfg.selection.top_m)->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--selection-examples-per-pattern", cfg.selection.examples_per_pattern)->capture_default_str();
  app.add_option("--selection-seed", cfg.selection.seed);

  app.add_option("--survival-shorter-cutoff", cfg.survival.shorter_days)->capture_default_str();
  app.add_option("--survival-longer-cutoff", cfg.survival.longer_days)->capture_default_str();

  double prevalence = 0.3;
  auto& s = cfg.synth;
  app.add_option("--synth-dir", cfg.synth_dir, "Cohort directory written by synth (default <out>/cohort)");
  app.add_option("--synth-seed", cfg.synth_seed);
  app.add_option("--synth-patients-per-hospital", s.n_patients_per_hospital)->capture_default_str();
  app.add_option("--synth-hospitals", s.n_hospitals)->capture_default_str();
  app.add_option("--synth-tiles-min", s.tiles_min)->capture_default_str();
  app.add_option("--synth-tiles-max", s.tiles_max)->capture_default_str();
  app.add_option("--synth-dim", s.dim)->capture_default_str();
  app.add_option("--synth-atoms", s.n_true_atoms)->capture_default_str();
  app.add_option("--synth-k-true", s.k_true)->capture_default_str();
  app.add_option("--synth-noise-sigma,--noise-sigma", s.noise_sigma)->capture_default_str();
  app.add_option("--synth-prevalence", prevalence, "Fraction of tiles carrying a prognostic atom")
      ->capture_default_str();

  const std::map<std::string, std::pair<std::string, std::function<void(const PipelineConfig&)>>> commands = {
      {"synth", {"Generate a synthetic cohort with a planted dictionary", cmd_synth}},
      {"cv", {"Stratified k-fold MIL training and test-fold metrics", cmd_cv}},
      {"score", {"Per-tile decision scores from each patient's test-fold model", cmd_score}},
      {"sample", {"Decision-score-weighted tile sampling per hospital", cmd_sample}},
      {"train-sae", {"Train the TopK sparse autoencoder on all tiles", cmd_train_sae}},
      {"encode", {"Encode the sampled tiles with the SAE", cmd_encode}},
      {"select", {"Per-hospital pattern differences, top patterns and example tiles", cmd_select}},
      {"survival", {"Risk groups, Kaplan-Meier curves and adjusted Cox regression", cmd_survival}},
      {"report", {"Heatmaps and a summary of all stages", cmd_report}},
  };
  std::function<void(const PipelineConfig&)> chosen;
  for (const auto& [name, entry] : commands) {
    auto* sub = app.add_subcommand(name, entry.first);
    sub->fallthrough();
    sub->callback([&chosen, fn = entry.second] { chosen = fn; });
  }

  try {
    app.parse(argc, argv);
    if (!config_path.empty()) apply_config_file(app, config_path);
    if (prevalence != 0.3 || app.get_option("--synth-prevalence")->count() > 0) {
      s.prognostic_atoms = SynthSpec::default_prognostic_atoms(prevalence);
    }
    if (!chosen) throw ValidationError("no command given");
    chosen(cfg);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"histoprog"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(int(argv.size()), argv.data());
}

}  // namespace histoprog::cli
