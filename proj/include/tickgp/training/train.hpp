#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "tickgp/data/data.hpp"
#include "tickgp/metrics/metrics.hpp"
#include "tickgp/model/checkpoint.hpp"
#include "tickgp/training/optimizer.hpp"

namespace tickgp {

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t steps = 1000;
  Schedule schedule;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 0;        // 0: no periodic evaluation
  std::size_t checkpoint_interval = 0;  // 0: final checkpoint only
  std::size_t train_samples = 1;
  std::size_t eval_samples = 5;
  double clip_norm = 0.0;  // 0: off
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double elbo = 0.0;
  double elapsed_s = 0.0;
};

/// Independent, seed-derived streams for minibatch order and Monte-Carlo noise.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return Rng(seq);
}

/// Minibatch ELBO ascent with Adam. Owns the optimizer state and the random streams.
class Trainer {
 public:
  Trainer(DeepModel& model, const ImageBatch& data, TrainConfig cfg)
      : model_(model), data_(data), cfg_(cfg), data_rng_(make_rng(cfg.seed, 1)), noise_rng_(make_rng(cfg.seed, 2)) {
    if (cfg_.batch_size == 0 || cfg_.steps == 0) throw ConfigError("batch size and step count must be >= 1");
    if (cfg_.schedule.start <= 0.0) throw ConfigError("learning rate must be positive");
    if (data_.size() == 0) throw DataError("training set is empty");
    model_.num_train = data_.size();
    labels_ = data_.label_tensor();
    if (std::holds_alternative<GaussianLikelihood>(model_.likelihood) && targets_.size() == 0) targets_ = labels_;
  }

  /// Real-valued regression targets (Gaussian likelihood) replacing the labels.
  void set_targets(Tensor t) {
    if (t.size() != data_.size()) throw ShapeError("target count does not match the training set");
    targets_ = std::move(t);
  }

  std::size_t step_index() const { return t_; }
  const AdamState& adam_state() const { return adam_; }
  Rng& noise_rng() { return noise_rng_; }

  /// One optimizer step on the next minibatch. Returns the pre-update ELBO estimate.
  StepRecord step() {
    auto idx = next_batch();
    ImageBatch b = data_.select(idx);
    Tensor y(Shape{idx.size()});
    const Tensor& src = targets_.size() ? targets_ : labels_;
    for (std::size_t i = 0; i < idx.size(); ++i) y[i] = src[idx[i]];
    StepRecord r;
    r.step = t_;
    r.lr = lr_at(cfg_.schedule, t_);
    Var objective;
    try {
      objective = model_.elbo(Var(b.images), y, noise_rng_, cfg_.train_samples);
    } catch (const NumericalError& e) {
      throw NumericalError("step " + std::to_string(t_) + ": " + e.what());
    }
    r.elbo = objective.item();
    if (!std::isfinite(r.elbo)) throw NumericalError("non-finite ELBO at step " + std::to_string(t_));
    backward(objective, model_.params);
    if (cfg_.clip_norm > 0.0) clip_gradients(model_.params, cfg_.clip_norm);
    adam_step(model_.params, adam_, r.lr, cfg_.adam, true);
    ++t_;
    return r;
  }

 private:
  std::vector<std::size_t> next_batch() {
    const std::size_t b = std::min(cfg_.batch_size, data_.size());
    std::vector<std::size_t> idx;
    idx.reserve(b);
    while (idx.size() < b) {
      if (cursor_ >= order_.size()) {
        order_.resize(data_.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), data_rng_);
        cursor_ = 0;
      }
      idx.push_back(order_[cursor_++]);
    }
    return idx;
  }

  DeepModel& model_;
  const ImageBatch& data_;
  TrainConfig cfg_;
  Rng data_rng_, noise_rng_;
  AdamState adam_;
  Tensor labels_, targets_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t t_ = 0;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(std::size_t step)> on_eval;
  std::string config_text;  // stored in checkpoints
  std::map<std::string, std::string> metadata;
};

inline std::string checkpoint_path(const std::string& out_dir, std::size_t step) {
  return (std::filesystem::path(out_dir) / "checkpoints" / ("step_" + std::to_string(step))).string();
}

/// Runs cfg.steps steps. With a non-empty out_dir writes log.csv (step,lr,elbo), timing.csv
/// (step,elapsed_s) and checkpoints/step_<t>. A non-finite ELBO aborts with NumericalError;
/// checkpoints already written are kept.
inline std::vector<StepRecord> train(DeepModel& model, const ImageBatch& data, const TrainConfig& cfg,
                                     const std::string& out_dir = {}, const TrainHooks& hooks = {}) {
  Trainer trainer(model, data, cfg);
  CsvWriter log, timing;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log = CsvWriter((std::filesystem::path(out_dir) / "log.csv").string(), {"step", "lr", "elbo"});
    timing = CsvWriter((std::filesystem::path(out_dir) / "timing.csv").string(), {"step", "elapsed_s"});
  }
  std::vector<StepRecord> records;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    StepRecord r = trainer.step();
    r.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    records.push_back(r);
    if (!out_dir.empty()) {
      log.write(r.step, r.lr, r.elbo);
      timing.write(r.step, r.elapsed_s);
    }
    if (hooks.on_step) hooks.on_step(r);
    const std::size_t done = s + 1;
    if (hooks.on_eval && cfg.eval_interval && done % cfg.eval_interval == 0) hooks.on_eval(done);
    if (!out_dir.empty() && ((cfg.checkpoint_interval && done % cfg.checkpoint_interval == 0) || done == cfg.steps)) {
      Checkpoint c = make_checkpoint(model.params, done, hooks.config_text);
      c.metadata = hooks.metadata;
      save_checkpoint(c, checkpoint_path(out_dir, done));
    }
  }
  return records;
}

}  // namespace tickgp
