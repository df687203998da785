#include "mcqr/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "mcqr/csv.hpp"
#include "mcqr/rng.hpp"

namespace mcqr {

using nlohmann::json;
using nlohmann::ordered_json;

const char* optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  throw DataError("unknown optimizer '" + name + "' (expected adam or sgd)");
}

void TrainConfig::validate() const {
  require(batch_size >= 1, "train: batch_size must be >= 1");
  require(learning_rate > 0.0, "train: learning_rate must be positive");
  require(epochs >= 1, "train: epochs must be >= 1");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
          "train: moment decay rates must lie in [0, 1)");
  require(adam_eps > 0.0, "train: adam_eps must be positive");
  require(!clip_norm || *clip_norm > 0.0, "train: clip_norm must be positive");
  require(!max_steps || *max_steps >= 1, "train: max_steps must be >= 1");
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["optimizer"] = optimizer_name(c.optimizer);
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["clip_norm"] = c.clip_norm ? json(*c.clip_norm) : json(nullptr);
  j["max_steps"] = c.max_steps ? json(*c.max_steps) : json(nullptr);
  j["save_every"] = c.save_every;
  return j;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw DataError("train config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "optimizer") c.optimizer = parse_optimizer(v.get<std::string>());
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "clip_norm")
        c.clip_norm = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      else if (key == "max_steps")
        c.max_steps = v.is_null() ? std::nullopt : std::optional<std::size_t>(v.get<std::size_t>());
      else if (key == "save_every") c.save_every = v.get<std::size_t>();
      else throw DataError("unknown train config key '" + key + "'");
    } catch (const json::exception& e) {
      throw DataError("train config key '" + key + "': " + e.what());
    }
  }
  return c;
}

DTensor compute_loss(ForwardPass& pass, const PreparedExample& example) {
  return pass.loss(example);
}

double accumulate_gradients(RewriterModel& model, const std::vector<const PreparedExample*>& batch) {
  require(!batch.empty(), "accumulate_gradients: empty batch");
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto* ex : batch) {
    Tape tape;
    ForwardPass pass(model, tape);
    const DTensor loss = compute_loss(pass, *ex);
    total += loss.value().item();
    tape.backward(loss, scale);
  }
  return total * scale;
}

double clip_global_norm(std::vector<Parameter>& params, double max_norm) {
  require(max_norm > 0.0, "clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad.values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& p : params)
      for (double& g : p.grad.values()) g *= k;
  }
  return norm;
}

void Optimizer::step(std::vector<Parameter>& params) {
  ++t_;
  const double lr = cfg_.learning_rate;
  if (cfg_.optimizer == OptimizerKind::Sgd) {
    for (auto& p : params)
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr * p.grad[i];
    return;
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.shape(), 0.0);
      v_.emplace_back(p.value.shape(), 0.0);
    }
  }
  require(m_.size() == params.size(), "optimizer: parameter set changed between steps");
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
    }
  }
}

ordered_json Optimizer::describe() const {
  ordered_json j;
  j["name"] = optimizer_name(cfg_.optimizer);
  j["learning_rate"] = cfg_.learning_rate;
  if (cfg_.optimizer == OptimizerKind::Adam) {
    j["beta1"] = cfg_.beta1;
    j["beta2"] = cfg_.beta2;
    j["eps"] = cfg_.adam_eps;
  }
  j["steps"] = t_;
  return j;
}

std::vector<double> TrainResult::epoch_means() const {
  std::vector<double> out;
  std::size_t current = 0, count = 0;
  double sum = 0.0;
  for (const auto& r : trace) {
    if (r.epoch != current && count > 0) {
      out.push_back(sum / static_cast<double>(count));
      sum = 0.0;
      count = 0;
    }
    current = r.epoch;
    sum += r.loss;
    ++count;
  }
  if (count > 0) out.push_back(sum / static_cast<double>(count));
  return out;
}

namespace {

std::string batch_description(const std::vector<std::size_t>& order, std::size_t begin,
                              std::size_t end) {
  std::string s;
  for (std::size_t i = begin; i < end; ++i) {
    if (!s.empty()) s += ", ";
    s += std::to_string(order[i]);
  }
  return "[" + s + "]";
}

}  // namespace

TrainResult train(RewriterModel& model, const std::vector<PreparedExample>& examples,
                  const TrainConfig& cfg, const TrainOptions& options, const TrainHooks& hooks) {
  cfg.validate();
  require(!examples.empty(), "train: empty corpus");

  std::ofstream loss_out;
  if (options.loss_csv) {
    loss_out.open(*options.loss_csv);
    if (!loss_out) throw DataError("cannot write loss trace '" + *options.loss_csv + "'");
    loss_out << "# config: " << options.run_config.dump() << '\n';
    loss_out << "epoch,step,loss\n";
  }
  if (options.out_dir) std::filesystem::create_directories(*options.out_dir);

  TrainResult result;
  Optimizer opt(cfg);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);

  auto save = [&](std::size_t epoch) {
    if (!options.out_dir) return;
    ordered_json meta;
    meta["epoch"] = epoch;
    meta["step"] = result.steps;
    meta["seed"] = cfg.seed;
    meta["optimizer"] = opt.describe();
    meta["run_config"] = options.run_config;
    const std::string path =
        (std::filesystem::path(*options.out_dir) / ("epoch-" + std::to_string(epoch) + ".ckpt.json"))
            .string();
    save_checkpoint(path, model, meta);
    result.checkpoints.push_back(path);
  };

  bool stop = false;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !stop; ++epoch) {
    rng.shuffle(order);
    for (std::size_t begin = 0; begin < order.size() && !stop; begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<const PreparedExample*> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&examples[order[i]]);

      for (auto& p : model.parameters()) p.zero_grad();
      const double loss = accumulate_gradients(model, batch);
      if (!std::isfinite(loss))
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(result.steps + 1) + ", batch examples " +
                              batch_description(order, begin, end));
      if (cfg.clip_norm) clip_global_norm(model.parameters(), *cfg.clip_norm);
      opt.step(model.parameters());
      ++result.steps;

      const StepRecord rec{epoch, result.steps, loss};
      result.trace.push_back(rec);
      if (loss_out) loss_out << csv::join({std::to_string(epoch), std::to_string(result.steps),
                                           json(loss).dump()})
                             << '\n';
      if (hooks.on_step && !hooks.on_step(rec)) stop = result.stopped_early = true;
      if (cfg.max_steps && result.steps >= *cfg.max_steps) stop = true;
    }
    result.epochs_completed = epoch;
    const bool last = stop || epoch == cfg.epochs;
    if (hooks.on_epoch && !hooks.on_epoch(epoch, model)) stop = result.stopped_early = true;
    if ((cfg.save_every > 0 && epoch % cfg.save_every == 0) || ((last || stop) && cfg.save_every > 0))
      save(epoch);
  }
  return result;
}

}  // namespace mcqr
