#include <iostream>

#include <CLI11.hpp>

#include "tickgp/cli/experiment.hpp"

namespace {

using namespace tickgp;

Config load_with_overrides(const std::string& path, const std::vector<std::string>& overrides) {
  Config cfg = path.empty() ? Config{} : Config::load(path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not section.key=value");
    cfg.set(o.substr(0, eq), o.substr(eq + 1));
  }
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"Convolutional and TICK Gaussian process classifiers"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("config", config_path, "config file (INI sections)")->required();
    sub->add_option("-s,--set", overrides, "override, e.g. train.steps=100");
  };

  auto* train = app.add_subcommand("train", "train a model and write its run directory");
  add_config(train);

  EvalOptions eo;
  std::string ks = "1,2,3";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint: metrics.csv and proba.csv");
  eval->add_option("checkpoint", eo.checkpoint, "checkpoint file")->required();
  eval->add_option("--images", eo.images, "IDX images (default: the checkpoint's test split)");
  eval->add_option("--labels", eo.labels, "IDX labels");
  eval->add_option("--semeion", eo.semeion, "Semeion text file");
  eval->add_option("--classes", eo.classes, "class subset of the evaluation data")->delimiter(',');
  eval->add_option("--pad-to", eo.pad_to, "zero-pad images to N x N");
  eval->add_option("--k", ks, "comma-separated k values for top-k error");
  eval->add_option("--samples", eo.samples, "Monte-Carlo samples K");
  eval->add_option("--seed", eo.seed, "seed");
  eval->add_option("--out", eo.out_dir, "output directory");

  auto* bench = app.add_subcommand("bench-sampling", "marginal vs full-covariance sampling benchmark");
  add_config(bench);

  double lengthscale = 1.0 / (2.0 * std::numbers::pi);
  std::size_t samples = 1000, grid = 2000;
  std::uint64_t seed = 0;
  auto* cross = app.add_subcommand("crossings", "zero-crossing rate of SE-GP draws: analytic vs Monte Carlo");
  cross->add_option("--lengthscale", lengthscale, "SE lengthscale");
  cross->add_option("--samples", samples, "number of draws");
  cross->add_option("--grid", grid, "grid points on [0, 1]");
  cross->add_option("--seed", seed, "seed");

  std::string map_ckpt, map_images, map_labels, map_out = "patch_map";
  std::size_t map_index = 0, map_samples = 3, map_head = 0;
  auto* pmap = app.add_subcommand("patch-map", "PGM samples of the patch-response function on one image");
  pmap->add_option("checkpoint", map_ckpt, "checkpoint file")->required();
  pmap->add_option("--images", map_images, "IDX images")->required();
  pmap->add_option("--labels", map_labels, "IDX labels")->required();
  pmap->add_option("--index", map_index, "image index");
  pmap->add_option("--samples", map_samples, "number of samples");
  pmap->add_option("--head", map_head, "output head (class)");
  pmap->add_option("--seed", seed, "seed");
  pmap->add_option("--out", map_out, "output prefix");

  app.add_subcommand("config-reference", "print every config key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (train->parsed()) {
    run_train(load_with_overrides(config_path, overrides), std::cout);
  } else if (eval->parsed()) {
    Config tmp;
    tmp.set("data.classes", ks);
    eo.ks.clear();
    for (int k : tmp.int_list("data.classes")) {
      if (k < 1) throw ConfigError("--k values must be >= 1");
      eo.ks.push_back(static_cast<std::size_t>(k));
    }
    run_eval(eo, std::cout);
  } else if (bench->parsed()) {
    run_bench_sampling(load_with_overrides(config_path, overrides), std::cout);
  } else if (cross->parsed()) {
    Rng rng = make_rng(seed, 5);
    CrossingReport r = zero_crossing_experiment(lengthscale, samples, grid, rng);
    if (!r.warning.empty()) std::cerr << "warning: " << r.warning << '\n';
    std::cout << "lengthscale " << format_double(r.lengthscale) << '\n'
              << "analytic up-crossings " << format_double(r.analytic_up) << '\n'
              << "monte-carlo up-crossings " << format_double(r.mc_up) << " +- " << format_double(r.mc_up_se)
              << '\n'
              << "analytic crossings (both directions) " << format_double(r.analytic_total) << '\n'
              << "monte-carlo crossings (both directions) " << format_double(r.mc_total) << " +- "
              << format_double(r.mc_total_se) << '\n';
  } else if (pmap->parsed()) {
    ImageBatch data = load_idx(map_images, map_labels);
    run_patch_map(map_ckpt, data, map_index, map_samples, map_head, seed, map_out);
  } else {
    std::cout << config_reference();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const tickgp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const tickgp::ShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const tickgp::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const tickgp::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
