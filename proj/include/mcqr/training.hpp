#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcqr/model.hpp"

namespace mcqr {

enum class OptimizerKind { Sgd, Adam };

const char* optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  std::size_t batch_size = 32;
  double learning_rate = 5e-5;
  std::size_t epochs = 20;
  std::uint64_t seed = 42;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> clip_norm = 1.0;
  /// Stop after this many optimizer steps even mid-epoch.
  std::optional<std::size_t> max_steps;
  /// Write a checkpoint every k epochs (0 disables).
  std::size_t save_every = 1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
/// Rejects unknown keys; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Raised when the loss stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Teacher-forced negative log-likelihood of one example.
DTensor compute_loss(ForwardPass& pass, const PreparedExample& example);

/// Accumulates d(mean loss)/dθ over `batch` into Parameter::grad (which the
/// caller zeroes) and returns the mean loss. Examples run in order.
double accumulate_gradients(RewriterModel& model, const std::vector<const PreparedExample*>& batch);

/// Rescales every gradient so the global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(std::vector<Parameter>& params, double max_norm);

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}
  void step(std::vector<Parameter>& params);
  std::size_t steps() const { return t_; }
  nlohmann::ordered_json describe() const;

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct StepRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // 1-based, global
  double loss = 0.0;      // mean over the batch
};

struct TrainHooks {
  /// Called after every optimizer step; return false to stop.
  std::function<bool(const StepRecord&)> on_step;
  /// Called after every epoch; return false to stop.
  std::function<bool(std::size_t epoch, const RewriterModel&)> on_epoch;
};

struct TrainOptions {
  std::optional<std::string> out_dir;    // checkpoints go to <out>/epoch-<k>.ckpt.json
  std::optional<std::string> loss_csv;   // epoch,step,loss
  nlohmann::ordered_json run_config;     // embedded in every artifact
};

struct TrainResult {
  std::vector<StepRecord> trace;
  std::size_t epochs_completed = 0;
  std::size_t steps = 0;
  bool stopped_early = false;
  std::vector<std::string> checkpoints;

  /// Mean batch loss of each epoch in order.
  std::vector<double> epoch_means() const;
};

/// Deterministic given model init, examples and cfg.seed: each epoch
/// shuffles example order with a generator seeded once from cfg.seed.
TrainResult train(RewriterModel& model, const std::vector<PreparedExample>& examples,
                  const TrainConfig& cfg, const TrainOptions& options = {},
                  const TrainHooks& hooks = {});

}  // namespace mcqr
