#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "tickgp/cli/config.hpp"
#include "tickgp/kernels/crossings.hpp"
#include "tickgp/training/init.hpp"
#include "tickgp/training/train.hpp"

namespace tickgp {

namespace fs = std::filesystem;

inline ModelConfig model_config(const Config& c) {
  ModelConfig m;
  m.type = parse_model_type(c.str("model.type"));
  m.depth = c.count("model.depth");
  m.num_inducing = c.count("model.num_inducing");
  m.hidden_inducing = c.count("model.hidden_inducing");
  m.patch_size = c.count("model.patch_size");
  m.hidden_patch_size = c.count("model.hidden_patch_size");
  m.weights = c.flag("model.weights");
  m.tick_all_layers = c.flag("model.tick_all_layers");
  m.shared_inducing = c.flag("model.shared_inducing");
  m.patch_family = parse_family(c.str("model.patch_kernel"));
  m.location_family = parse_family(c.str("model.location_kernel"));
  m.patch_variance = c.real("model.patch_variance");
  m.hidden_patch_variance = c.real("model.hidden_patch_variance");
  m.patch_lengthscale = c.real("model.patch_lengthscale");
  m.location_lengthscale = c.real("model.location_lengthscale");
  m.weight_init = c.real("model.weight_init");
  m.final_q_scale = c.real("model.final_q_scale");
  m.hidden_q_scale = c.real("model.hidden_q_scale");
  m.jitter = c.real("model.jitter");
  const std::string lik = c.str("model.likelihood");
  if (lik == "softmax")
    m.likelihood = LikelihoodKind::Softmax;
  else if (lik == "gaussian")
    m.likelihood = LikelihoodKind::Gaussian;
  else
    throw ConfigError("unknown model.likelihood '" + lik + "' (expected softmax or gaussian)");
  m.noise_variance = c.real("model.noise_variance");
  m.mc_samples_eval = c.count("train.eval_samples");
  if (m.jitter < 0.0) throw ConfigError("model.jitter must be >= 0");
  if (m.num_inducing == 0 || m.hidden_inducing == 0) throw ConfigError("inducing counts must be >= 1");
  if (m.mc_samples_eval == 0) throw ConfigError("train.eval_samples must be >= 1");
  return m;
}

inline TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.batch_size = c.count("train.batch_size");
  t.steps = c.count("train.steps");
  t.schedule.kind = parse_schedule(c.str("train.schedule"));
  t.schedule.start = c.real("train.lr");
  t.schedule.tau = c.real("train.decay_tau");
  t.schedule.factor = c.real("train.decay_factor");
  t.schedule.every = c.count("train.decay_every");
  t.adam.beta1 = c.real("train.adam_beta1");
  t.adam.beta2 = c.real("train.adam_beta2");
  t.adam.epsilon = c.real("train.adam_epsilon");
  t.seed = c.count("train.seed");
  t.eval_interval = c.count("train.eval_interval");
  t.checkpoint_interval = c.count("train.checkpoint_interval");
  t.train_samples = c.count("train.train_samples");
  t.eval_samples = c.count("train.eval_samples");
  t.clip_norm = c.real("train.clip_norm");
  if (t.batch_size == 0 || t.steps == 0) throw ConfigError("train.batch_size and train.steps must be >= 1");
  if (t.schedule.start <= 0.0) throw ConfigError("train.lr must be positive");
  if (t.train_samples == 0 || t.eval_samples == 0) throw ConfigError("Monte-Carlo sample counts must be >= 1");
  return t;
}

/// Training or test split as described by the data.* keys.
inline ImageBatch load_split(const Config& c, bool train) {
  const std::string format = c.str("data.format");
  ImageBatch b;
  if (format == "idx") {
    b = train ? load_idx(c.str("data.train_images"), c.str("data.train_labels"))
              : load_idx(c.str("data.test_images"), c.str("data.test_labels"));
  } else if (format == "cifar10") {
    auto paths = c.string_list(train ? "data.cifar_train" : "data.cifar_test");
    if (paths.empty()) throw ConfigError(std::string("data.") + (train ? "cifar_train" : "cifar_test") + " is empty");
    b = load_cifar10_grey(paths);
  } else {
    throw ConfigError("unknown data.format '" + format + "'");
  }
  if (auto classes = c.int_list("data.classes"); !classes.empty()) b = subset_classes(b, classes);
  if (const std::size_t n = c.count(train ? "data.train_size" : "data.test_size")) b = b.head(n);
  b.validate();
  return b;
}

/// Checkpoint metadata needed to rebuild the architecture.
inline std::map<std::string, std::string> model_metadata(const DeepModel& m, std::size_t height, std::size_t width,
                                                         std::size_t num_classes) {
  return {{"height", std::to_string(height)},
          {"width", std::to_string(width)},
          {"num_classes", std::to_string(num_classes)},
          {"num_train", std::to_string(m.num_train)}};
}

inline std::size_t metadata_count(const Checkpoint& c, const std::string& key) {
  auto it = c.metadata.find(key);
  if (it == c.metadata.end()) throw DataError("checkpoint metadata lacks '" + key + "'");
  try {
    return std::stoull(it->second);
  } catch (const std::exception&) {
    throw DataError("checkpoint metadata '" + key + "' = '" + it->second + "' is not a count");
  }
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
inline DeepModel model_from_checkpoint(const Checkpoint& ck) {
  const Config cfg = Config::parse(ck.config, "checkpoint config");
  DeepModel m = build_model(model_config(cfg), metadata_count(ck, "height"), metadata_count(ck, "width"),
                            metadata_count(ck, "num_classes"), metadata_count(ck, "num_train"));
  apply_checkpoint(ck, m.params);
  return m;
}

struct EvalResult {
  bool classification = true;
  Tensor proba;  // [N x C]; Gaussian likelihood: [N x 2] predictive mean and variance of f
  std::vector<std::pair<std::size_t, double>> top_k;  // (k, error %)
  NllResult nll_full, nll_miss;
  double elbo = 0.0;
};

/// Predictive probabilities (K samples), top-k errors, NLLs and the ELBO with the evaluation set as data.
/// A Gaussian likelihood yields the ELBO and the latent predictive moments only.
inline EvalResult evaluate(const DeepModel& model, const ImageBatch& data, const std::vector<std::size_t>& ks,
                           std::size_t k_samples, Rng& rng, std::size_t chunk = 500) {
  const std::size_t n = data.size(), c = latent_dim(model.likelihood);
  const bool classification = std::holds_alternative<SoftmaxLikelihood>(model.likelihood);
  if (n == 0) throw DataError("evaluation set is empty");
  if (classification)
    for (std::size_t k : ks)
      if (k < 1 || k > c) throw ConfigError("k=" + std::to_string(k) + " outside [1, " + std::to_string(c) + "]");
  const auto& first = model.layers.front().spec.scheme;
  if (data.height() != first.image_height || data.width() != first.image_width)
    throw ShapeError("evaluation images are " + std::to_string(data.height()) + "x" + std::to_string(data.width()) +
                     " but the model expects " + std::to_string(first.image_height) + "x" +
                     std::to_string(first.image_width));
  EvalResult r;
  r.classification = classification;
  r.proba = Tensor(Shape{n, classification ? c : 2});
  const Tensor labels = data.label_tensor();
  double data_term = 0.0;
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    ImageBatch b = data.select(idx);
    Tensor y(Shape{idx.size()});
    for (std::size_t i = 0; i < idx.size(); ++i) y[i] = labels[idx[i]];
    if (!classification) {
      data_term += model.expected_log_lik(Var(b.images), y, rng, k_samples).item();
      Var f = constant(model.propagate(Var(b.images), rng, k_samples));
      const Tensor fv = f.value();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double m = 0.0, sq = 0.0;
        for (std::size_t s = 0; s < k_samples; ++s) {
          const double v = fv[s * idx.size() + i];
          m += v;
          sq += v * v;
        }
        m /= static_cast<double>(k_samples);
        r.proba(start + i, 0) = m;
        r.proba(start + i, 1) = std::max(sq / static_cast<double>(k_samples) - m * m, 0.0);
      }
      continue;
    }
    Var f = constant(model.propagate(Var(b.images), rng, k_samples));
    data_term += sum(log_prob(model.bound_likelihood(), f, y)).item() / static_cast<double>(k_samples);
    Tensor p = std::get<SoftmaxLikelihood>(model.likelihood).predict_proba(f.value());
    std::copy(p.values().begin(), p.values().end(), r.proba.data() + start * c);
  }
  r.elbo = data_term - model.kl().item();
  if (!classification) return r;
  for (std::size_t k : ks) r.top_k.emplace_back(k, top_k_error(r.proba, data.labels, k));
  r.nll_full = nll(r.proba, data.labels, NllSubset::Full);
  r.nll_miss = nll(r.proba, data.labels, NllSubset::Misclassified);
  return r;
}

inline const std::vector<std::string>& metrics_header() {
  static const std::vector<std::string> h = {"step", "metric", "value"};
  return h;
}

inline void write_metrics(CsvWriter& out, std::size_t step, const EvalResult& r) {
  if (!r.classification) {
    out.write(step, std::string("elbo"), r.elbo);
    return;
  }
  for (const auto& [k, e] : r.top_k) out.write(step, "top" + std::to_string(k) + "_error_pct", e);
  out.write(step, std::string("nll_full"), r.nll_full.value);
  out.write(step, std::string("nll_misclassified"), r.nll_miss.value);
  out.write(step, std::string("misclassified_count"), r.nll_miss.count);
  out.write(step, std::string("misclassified_empty"), static_cast<int>(r.nll_miss.empty));
  out.write(step, std::string("elbo"), r.elbo);
}

inline void write_proba(const std::string& path, const EvalResult& r, const std::vector<int>& labels) {
  const std::size_t c = r.proba.dim(1);
  std::vector<std::string> header = {"index", "label"};
  if (r.classification)
    for (std::size_t j = 0; j < c; ++j) header.push_back("p" + std::to_string(j));
  else
    header.insert(header.end(), {"mean", "variance"});
  CsvWriter out(path, header);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::vector<std::string> row = {std::to_string(i), std::to_string(labels[i])};
    for (std::size_t j = 0; j < c; ++j) row.push_back(format_double(r.proba(i, j)));
    out.row(row);
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

/// Model initialized from data, warm-started when train.warm_start names a checkpoint.
inline DeepModel prepare_model(const Config& cfg, const ImageBatch& train, std::ostream& log) {
  Rng init_rng = make_rng(cfg.count("train.seed"), 0);
  std::vector<std::string> warnings;
  DeepModel model = init_model(model_config(cfg), train, init_rng, &warnings);
  model.set_sampling_mode(parse_sampling_mode(cfg.str("model.sampling")));
  for (const auto& w : warnings) log << "warning: " << w << '\n';
  if (const auto& path = cfg.str("train.warm_start"); !path.empty()) {
    DeepModel src = model_from_checkpoint(load_checkpoint(path));
    for (const auto& name : warm_start(model, src))
      log << "warning: warm start kept the initial value of '" << name << "' (shape differs)\n";
  }
  return model;
}

/// cmd train: writes config.resolved, log.csv, timing.csv, metrics.csv, proba.csv, checkpoints/step_<t>.
inline void run_train(const Config& cfg, std::ostream& log) {
  const fs::path out = cfg.str("output.dir");
  const TrainConfig tc = train_config(cfg);
  ImageBatch train_set = load_split(cfg, true);
  fs::create_directories(out);
  write_text(out / "config.resolved", cfg.resolved());
  DeepModel model = prepare_model(cfg, train_set, log);
  std::optional<ImageBatch> test_set;
  const bool has_test = cfg.str("data.format") == "cifar10" ? !cfg.str("data.cifar_test").empty()
                                                            : !cfg.str("data.test_images").empty();
  if (has_test) test_set = load_split(cfg, false);
  CsvWriter metrics;
  if (test_set) metrics = CsvWriter((out / "metrics.csv").string(), metrics_header());
  Rng eval_rng = make_rng(tc.seed, 3);
  const std::vector<std::size_t> ks = {1, 2, 3};
  auto eval_ks = [&] {
    std::vector<std::size_t> v;
    for (auto k : ks)
      if (k <= train_set.num_classes) v.push_back(k);
    return v;
  };
  TrainHooks hooks;
  hooks.config_text = cfg.resolved();
  hooks.metadata = model_metadata(model, train_set.height(), train_set.width(), train_set.num_classes);
  hooks.on_step = [&](const StepRecord& r) {
    if (tc.steps <= 20 || r.step % std::max<std::size_t>(tc.steps / 20, 1) == 0)
      log << "step " << r.step << " lr " << r.lr << " elbo " << r.elbo << " t " << r.elapsed_s << "s\n";
  };
  if (test_set)
    hooks.on_eval = [&](std::size_t step) {
      if (step == tc.steps) return;  // the final evaluation below covers it
      write_metrics(metrics, step, evaluate(model, *test_set, eval_ks(), tc.eval_samples, eval_rng));
    };
  train(model, train_set, tc, out.string(), hooks);
  if (test_set) {
    EvalResult r = evaluate(model, *test_set, eval_ks(), tc.eval_samples, eval_rng);
    write_metrics(metrics, tc.steps, r);
    write_proba((out / "proba.csv").string(), r, test_set->labels);
    if (r.classification) log << "test top1 error " << r.top_k.front().second << "% nll " << r.nll_full.value << '\n';
  }
}

struct EvalOptions {
  std::string checkpoint;
  std::string images, labels;  // IDX pair; empty -> the checkpoint config's test split
  std::string semeion;         // Semeion text file instead of IDX
  std::vector<int> classes;    // subset applied to external evaluation data
  std::size_t pad_to = 0;      // zero-pad to pad_to x pad_to
  std::vector<std::size_t> ks = {1, 2, 3};
  std::size_t samples = 5;
  std::uint64_t seed = 0;
  std::string out_dir = "eval";
};

/// cmd eval: writes metrics.csv and proba.csv into out_dir. Returns the result.
inline EvalResult run_eval(const EvalOptions& o, std::ostream& log) {
  if (o.samples == 0) throw ConfigError("--samples must be >= 1");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  DeepModel model = model_from_checkpoint(ck);
  ImageBatch data;
  if (!o.semeion.empty()) {
    data = load_semeion(o.semeion);
  } else if (!o.images.empty()) {
    data = load_idx(o.images, o.labels);
  } else {
    data = load_split(Config::parse(ck.config, "checkpoint config"), false);
  }
  const bool external = !o.semeion.empty() || !o.images.empty();
  if (!o.classes.empty()) {
    if (!external) throw ConfigError("--classes applies to --images or --semeion data only");
    data = subset_classes(data, o.classes);
  }
  if (o.pad_to) data = pad_center(data, o.pad_to, o.pad_to);
  const std::size_t c = latent_dim(model.likelihood);
  const bool classification = std::holds_alternative<SoftmaxLikelihood>(model.likelihood);
  if (classification && data.num_classes > c)
    throw ShapeError("evaluation data has " + std::to_string(data.num_classes) + " classes, model has " +
                     std::to_string(c));
  if (classification) data.num_classes = c;
  for (std::size_t k : o.ks)
    if (classification && (k < 1 || k > c)) throw ConfigError("k=" + std::to_string(k) + " outside [1, " + std::to_string(c) + "]");
  Rng rng = make_rng(o.seed, 3);
  EvalResult r = evaluate(model, data, o.ks, o.samples, rng);
  fs::create_directories(o.out_dir);
  CsvWriter metrics((fs::path(o.out_dir) / "metrics.csv").string(), metrics_header());
  write_metrics(metrics, ck.step, r);
  write_proba((fs::path(o.out_dir) / "proba.csv").string(), r, data.labels);
  if (!r.classification) {
    log << "evaluated " << data.size() << " images: elbo " << format_double(r.elbo) << '\n';
    return r;
  }
  log << "evaluated " << data.size() << " images: top1 error " << r.top_k.front().second << "% nll "
      << r.nll_full.value << " nll(misclassified) " << r.nll_miss.value << " (" << r.nll_miss.count << ")\n";
  return r;
}

struct BenchPhase {
  SamplingMode mode = SamplingMode::Marginal;
  std::size_t steps = 0;
  double seconds = 0.0;
  double mean_elbo_tail = 0.0;  // mean ELBO over the last fifth of the phase

  double steps_per_second() const { return seconds > 0.0 ? static_cast<double>(steps) / seconds : 0.0; }
};

/// cmd bench-sampling: marginal-mode training, switching to full covariance at bench.switch_step
/// (0 = never). Writes log.csv, bench.csv and bench_summary.csv.
inline std::vector<BenchPhase> run_bench_sampling(const Config& cfg, std::ostream& log) {
  const fs::path out = cfg.str("output.dir");
  const TrainConfig tc = train_config(cfg);
  const std::size_t switch_step = cfg.count("bench.switch_step");
  if (switch_step >= tc.steps) throw ConfigError("bench.switch_step must be below train.steps");
  ImageBatch train_set = load_split(cfg, true);
  fs::create_directories(out);
  write_text(out / "config.resolved", cfg.resolved());
  DeepModel model = prepare_model(cfg, train_set, log);
  if (model.depth() < 2) throw ConfigError("bench-sampling needs a deep model (depth >= 2)");
  model.set_sampling_mode(SamplingMode::Marginal);
  Trainer trainer(model, train_set, tc);
  CsvWriter steps_csv((out / "log.csv").string(), {"step", "lr", "elbo"});
  CsvWriter bench_csv((out / "bench.csv").string(), {"step", "mode", "elbo", "step_seconds"});
  std::vector<BenchPhase> phases(1);
  std::vector<std::vector<double>> elbos(1);
  for (std::size_t s = 0; s < tc.steps; ++s) {
    if (switch_step && s == switch_step) {
      Checkpoint ck = make_checkpoint(model.params, s, cfg.resolved());
      ck.metadata = model_metadata(model, train_set.height(), train_set.width(), train_set.num_classes);
      save_checkpoint(ck, checkpoint_path(out.string(), s));
      model.set_sampling_mode(SamplingMode::Full);
      phases.push_back({SamplingMode::Full});
      elbos.emplace_back();
    }
    const auto t0 = std::chrono::steady_clock::now();
    StepRecord r = trainer.step();
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    phases.back().steps += 1;
    phases.back().seconds += dt;
    elbos.back().push_back(r.elbo);
    steps_csv.write(r.step, r.lr, r.elbo);
    bench_csv.write(r.step, std::string(sampling_mode_name(phases.back().mode)), r.elbo, dt);
  }
  CsvWriter summary((out / "bench_summary.csv").string(),
                    {"mode", "steps", "seconds", "steps_per_second", "mean_elbo_tail"});
  for (std::size_t i = 0; i < phases.size(); ++i) {
    const auto& e = elbos[i];
    const std::size_t tail = std::max<std::size_t>(e.size() / 5, 1);
    double acc = 0.0;
    for (std::size_t j = e.size() - tail; j < e.size(); ++j) acc += e[j];
    phases[i].mean_elbo_tail = acc / static_cast<double>(tail);
    const auto& p = phases[i];
    summary.write(std::string(sampling_mode_name(p.mode)), p.steps, p.seconds, p.steps_per_second(),
                  p.mean_elbo_tail);
    log << sampling_mode_name(p.mode) << ": " << p.steps << " steps, " << p.steps_per_second()
        << " steps/s, tail ELBO " << p.mean_elbo_tail << '\n';
  }
  Checkpoint ck = make_checkpoint(model.params, tc.steps, cfg.resolved());
  ck.metadata = model_metadata(model, train_set.height(), train_set.width(), train_set.num_classes);
  save_checkpoint(ck, checkpoint_path(out.string(), tc.steps));
  return phases;
}

/// cmd patch-map: PGM images of patch-response deviation samples for one image.
inline Tensor run_patch_map(const std::string& checkpoint, const ImageBatch& data, std::size_t index,
                            std::size_t samples, std::size_t head, std::uint64_t seed, const std::string& out_prefix) {
  DeepModel model = model_from_checkpoint(load_checkpoint(checkpoint));
  if (index >= data.size()) throw DataError("image index " + std::to_string(index) + " out of range");
  Rng rng = make_rng(seed, 4);
  Tensor img = data.select({index}).images;
  Tensor maps = patch_response_map(model, img, samples, rng, head);
  const std::size_t h = maps.dim(1), w = maps.dim(2);
  if (auto dir = fs::path(out_prefix).parent_path(); !dir.empty()) fs::create_directories(dir);
  for (std::size_t s = 0; s < samples; ++s)
    write_pgm(out_prefix + "_" + std::to_string(s) + ".pgm", maps.data() + s * h * w, h, w);
  return maps;
}

}  // namespace tickgp
