#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "mcqr/decoding.hpp"
#include "mcqr/training.hpp"
#include "test_util.hpp"

using namespace mcqr;
using namespace mcqr::testing;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<Tensor> grads_of(const RewriterModel& model) {
  std::vector<Tensor> out;
  for (const auto& p : model.parameters()) out.push_back(p.grad);
  return out;
}

void zero(RewriterModel& model) {
  for (auto& p : model.parameters()) p.zero_grad();
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mcqr_train_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(SequenceNll, CertainTargetsGiveZero) {
  Tape tape;
  const DTensor dist = tape.constant(Tensor::matrix(2, 3, {0, 1, 0, 0, 0, 1}));
  EXPECT_EQ(sequence_nll(dist, {1, 2}).value().item(), 0.0);
}

TEST(SequenceNll, TwoHalfStepsGiveTwoLnTwo) {
  Tape tape;
  const DTensor dist = tape.constant(Tensor::matrix(2, 2, {0.5, 0.5, 0.5, 0.5}));
  EXPECT_NEAR(sequence_nll(dist, {0, 1}).value().item(), 1.3862943611198906, 1e-15);
}

TEST(ComputeLoss, EqualsSumOfStepwiseLogProbs) {
  for (bool ptr : {true, false}) {
    ModelConfig c = tiny_config();
    c.use_pointer = ptr;
    RewriterModel model(c, numbered_vocab(20), 1);
    perturb(model, 2, 0.3);
    PreparedExample ex = random_example(model, 6, 3, 3);
    if (ptr) ex.target[1] = model.vocab().size();  // copy the first input OOV slot
    ex.text.oov = {"zz"};
    ex.text.ids[2] = model.vocab().size();

    double oracle = 0.0;
    std::vector<std::size_t> prefix{Vocabulary::kSos};
    for (std::size_t y : ex.target) {
      Tape tape;
      ForwardPass pass(model, tape);
      const EncodedBatch enc = pass.encode(ex);
      const DecoderOutput dec = pass.decode_step(prefix, enc);
      const Tensor p = ptr ? pass.pointer_mix(dec, enc).p.value() : dec.p_vocab.value();
      oracle -= std::log(p.at(0, y));
      prefix.push_back(y);
    }
    Tape tape;
    ForwardPass pass(model, tape);
    const double loss = compute_loss(pass, ex).value().item();
    EXPECT_NEAR(loss, oracle, 1e-12 * oracle) << "pointer=" << ptr;
    EXPECT_GT(loss, 0.0);
  }
}

TEST(ComputeLoss, EmptyGoldRewriteIsContractViolation) {
  RewriterModel model(tiny_config(), numbered_vocab(20), 4);
  PreparedExample ex = random_example(model, 4, 0, 5);
  ex.target.clear();
  Tape tape;
  ForwardPass pass(model, tape);
  EXPECT_THROW(compute_loss(pass, ex), ContractViolation);
}

TEST(Gradients, BatchAccumulationIsMeanOfExampleGradients) {
  RewriterModel model(tiny_config(), numbered_vocab(20), 6);
  perturb(model, 7, 0.2);
  std::vector<PreparedExample> exs;
  for (std::uint64_t s = 0; s < 3; ++s) exs.push_back(random_example(model, 4 + s, 2 + s % 2, 10 + s));

  std::vector<std::vector<Tensor>> single;
  double mean_loss = 0.0;
  for (const auto& ex : exs) {
    zero(model);
    mean_loss += accumulate_gradients(model, {&ex}) / 3.0;
    single.push_back(grads_of(model));
  }
  zero(model);
  const double batch_loss = accumulate_gradients(model, {&exs[0], &exs[1], &exs[2]});
  EXPECT_NEAR(batch_loss, mean_loss, 1e-12);
  const auto batch = grads_of(model);
  for (std::size_t p = 0; p < batch.size(); ++p)
    for (std::size_t i = 0; i < batch[p].size(); ++i)
      EXPECT_NEAR(batch[p][i], (single[0][p][i] + single[1][p][i] + single[2][p][i]) / 3.0, 1e-12);
}

TEST(Gradients, BatchStepEqualsScaledPerExampleSteps) {
  RewriterModel a(tiny_config(), numbered_vocab(20), 8);
  perturb(a, 9, 0.2);
  RewriterModel b = a;
  const auto e1 = random_example(a, 5, 2, 20), e2 = random_example(a, 6, 3, 21);

  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::Sgd;
  cfg.learning_rate = 0.1;
  cfg.clip_norm.reset();
  zero(a);
  accumulate_gradients(a, {&e1, &e2});
  Optimizer(cfg).step(a.parameters());

  // Sum of per-example gradients at the same point, stepped with lr / 2.
  zero(b);
  accumulate_gradients(b, {&e1});
  auto g1 = grads_of(b);
  zero(b);
  accumulate_gradients(b, {&e2});
  for (std::size_t p = 0; p < g1.size(); ++p)
    for (std::size_t i = 0; i < g1[p].size(); ++i) b.parameters()[p].grad[i] += g1[p][i];
  cfg.learning_rate = 0.05;
  Optimizer(cfg).step(b.parameters());

  for (std::size_t p = 0; p < a.parameters().size(); ++p)
    for (std::size_t i = 0; i < a.parameters()[p].value.size(); ++i)
      EXPECT_NEAR(a.parameters()[p].value[i], b.parameters()[p].value[i], 1e-14);
}

TEST(Clipping, ScalesMagnitudeOnly) {
  std::vector<Parameter> params(2);
  params[0].value = params[0].grad = Tensor::matrix(1, 2, {3.0, 0.0});
  params[1].value = params[1].grad = Tensor::matrix(1, 1, {4.0});
  EXPECT_DOUBLE_EQ(clip_global_norm(params, 1.0), 5.0);
  EXPECT_NEAR(params[0].grad[0], 0.6, 1e-15);
  EXPECT_EQ(params[0].grad[1], 0.0);
  EXPECT_NEAR(params[1].grad[0], 0.8, 1e-15);

  params[0].grad = Tensor::matrix(1, 2, {0.3, -0.1});
  params[1].grad = Tensor::matrix(1, 1, {0.2});
  clip_global_norm(params, 1.0);
  EXPECT_EQ(params[0].grad[0], 0.3);
  EXPECT_EQ(params[0].grad[1], -0.1);
  EXPECT_EQ(params[1].grad[0], 0.2);
}

TEST(Clipping, ModelGradientDirectionPreserved) {
  RewriterModel model(tiny_config(), numbered_vocab(20), 11);
  perturb(model, 12, 0.5);
  const auto ex = random_example(model, 6, 3, 13);
  zero(model);
  accumulate_gradients(model, {&ex});
  const auto before = grads_of(model);
  const double norm = clip_global_norm(model.parameters(), 1e-3);
  ASSERT_GT(norm, 1e-3);
  const double ratio = 1e-3 / norm;
  for (std::size_t p = 0; p < before.size(); ++p)
    for (std::size_t i = 0; i < before[p].size(); ++i)
      EXPECT_NEAR(model.parameters()[p].grad[i], before[p][i] * ratio, 1e-15);
}

TEST(TrainConfigJson, RoundTripsAndRejectsUnknownKeys) {
  TrainConfig c;
  c.optimizer = OptimizerKind::Sgd;
  c.clip_norm.reset();
  c.max_steps = 17;
  EXPECT_EQ(train_config_from_json(nlohmann::json::parse(to_json(c).dump())), c);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"warmup", 10}}), DataError);
  EXPECT_THROW(parse_optimizer("lion"), DataError);
}

TEST(TrainConfigJson, DefaultsMatchPublishedSetup) {
  const TrainConfig c;
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.learning_rate, 5e-5);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.optimizer, OptimizerKind::Adam);
}

TEST(TrainConfigJson, InvalidValuesRejected) {
  TrainConfig c;
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ContractViolation);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ContractViolation);
}

TEST(Train, SameSeedGivesIdenticalTraceAndCheckpoints) {
  const auto dir1 = scratch("det1"), dir2 = scratch("det2");
  RewriterModel init(tiny_config(), numbered_vocab(20), 14);
  std::vector<PreparedExample> exs;
  for (std::uint64_t s = 0; s < 7; ++s) exs.push_back(random_example(init, 5, 3, 30 + s));
  TrainConfig cfg;
  cfg.batch_size = 3;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-2;

  RewriterModel m1 = init, m2 = init;
  TrainOptions o1, o2;
  o1.out_dir = dir1.string();
  o2.out_dir = dir2.string();
  o1.loss_csv = (dir1 / "loss.csv").string();
  o2.loss_csv = (dir2 / "loss.csv").string();
  std::filesystem::create_directories(dir1);
  std::filesystem::create_directories(dir2);
  const TrainResult r1 = train(m1, exs, cfg, o1), r2 = train(m2, exs, cfg, o2);

  ASSERT_EQ(r1.trace.size(), 6u);
  for (std::size_t i = 0; i < r1.trace.size(); ++i) EXPECT_EQ(r1.trace[i].loss, r2.trace[i].loss);
  ASSERT_EQ(r1.checkpoints.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i)
    EXPECT_EQ(slurp(r1.checkpoints[i]), slurp(r2.checkpoints[i])) << r1.checkpoints[i];
  EXPECT_EQ(slurp(*o1.loss_csv), slurp(*o2.loss_csv));
  EXPECT_TRUE(m1 == m2);

  const auto meta = load_checkpoint(r1.checkpoints[1]).metadata;
  EXPECT_EQ(meta.at("epoch"), 2);
  EXPECT_EQ(meta.at("step"), 6);
  EXPECT_EQ(meta.at("seed"), 42);
  EXPECT_EQ(meta.at("optimizer").at("name"), "adam");

  // A different seed reorders batches.
  cfg.seed = 7;
  RewriterModel m3 = init;
  const TrainResult r3 = train(m3, exs, cfg);
  EXPECT_NE(r3.trace[0].loss, r1.trace[0].loss);
  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);
}

TEST(Train, LossCsvHasConfigLineAndHeader) {
  const auto dir = scratch("csv");
  std::filesystem::create_directories(dir);
  RewriterModel model(tiny_config(), numbered_vocab(20), 15);
  std::vector<PreparedExample> exs{random_example(model, 4, 2, 40), random_example(model, 5, 2, 41)};
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.epochs = 1;
  TrainOptions opt;
  opt.loss_csv = (dir / "loss.csv").string();
  opt.run_config = {{"train", {{"epochs", 1}}}};
  train(model, exs, cfg, opt);
  std::istringstream lines(slurp(*opt.loss_csv));
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "# config: {\"train\":{\"epochs\":1}}");
  std::getline(lines, line);
  EXPECT_EQ(line, "epoch,step,loss");
  std::getline(lines, line);
  EXPECT_EQ(line.rfind("1,1,", 0), 0u);
  std::getline(lines, line);
  EXPECT_EQ(line.rfind("1,2,", 0), 0u);
  std::filesystem::remove_all(dir);
}

TEST(Train, NonFiniteLossNamesTheBatch) {
  RewriterModel model(tiny_config(), numbered_vocab(20), 16);
  std::vector<PreparedExample> exs{random_example(model, 4, 2, 50), random_example(model, 4, 2, 51)};
  model.param("output_head").value[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.batch_size = 2;
  try {
    train(model, exs, cfg);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch examples"), std::string::npos) << msg;
  }
}

TEST(Train, StepLimitAndHooksStopEarly) {
  RewriterModel model(tiny_config(), numbered_vocab(20), 17);
  std::vector<PreparedExample> exs;
  for (std::uint64_t s = 0; s < 5; ++s) exs.push_back(random_example(model, 4, 2, 60 + s));
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.epochs = 3;
  cfg.max_steps = 7;
  RewriterModel m1 = model;
  const TrainResult r = train(m1, exs, cfg);
  EXPECT_EQ(r.steps, 7u);
  EXPECT_EQ(r.epochs_completed, 2u);

  cfg.max_steps.reset();
  TrainHooks hooks;
  hooks.on_step = [](const StepRecord& rec) { return rec.step < 3; };
  RewriterModel m2 = model;
  const TrainResult r2 = train(m2, exs, cfg, {}, hooks);
  EXPECT_EQ(r2.steps, 3u);
  EXPECT_TRUE(r2.stopped_early);
}

TEST(Train, MemorizesSingleExample) {
  RewriterModel model(tiny_config(), numbered_vocab(20), 18);
  const PreparedExample ex = random_example(model, 6, 3, 70);
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.epochs = 300;
  cfg.learning_rate = 1e-2;
  std::size_t hit = 0;
  TrainHooks hooks;
  hooks.on_epoch = [&](std::size_t epoch, const RewriterModel& m) {
    const RewriteResult r = rewrite(m, ex, 1, 8);
    std::vector<std::size_t> want(ex.target.begin(), ex.target.end() - 1);
    if (r.tokens == want && !r.truncated) {
      hit = epoch;
      return false;
    }
    return true;
  };
  const TrainResult res = train(model, {ex}, cfg, {}, hooks);
  EXPECT_GT(hit, 0u) << "not memorized after " << res.epochs_completed << " epochs";
  const auto means = res.epoch_means();
  EXPECT_LT(means.back(), means.front());
}
