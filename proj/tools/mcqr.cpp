// Command-line entry point: train, eval, rewrite, stats, synth, kappa, export-attn.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mcqr/corpus.hpp"
#include "mcqr/pipeline.hpp"
#include "mcqr/stats.hpp"
#include "mcqr/synthetic.hpp"

using namespace mcqr;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct Overrides {
  std::string config_path;
  std::vector<std::string> sets;  // section.key=json
  std::optional<std::size_t> epochs, batch_size, beam, layers, width;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> fusion;
  bool no_pointer = false;
  bool no_image = false;

  void add_to(CLI::App* app, bool with_config) {
    if (with_config) app->add_option("--config", config_path, "Run config JSON");
    app->add_option("--set", sets, "Override one field, e.g. train.epochs=5");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--lr", lr);
    app->add_option("--seed", seed);
    app->add_option("--layers", layers);
    app->add_option("--width", width);
    app->add_option("--fusion", fusion, "early or late");
    app->add_option("--beam", beam);
    app->add_flag("--no-pointer", no_pointer, "Generation-only ablation");
    app->add_flag("--no-image", no_image, "Replace ROI rows by zeros");
  }

  RunConfig apply(RunConfig cfg) const {
    if (!config_path.empty()) cfg = load_run_config(config_path);
    ordered_json patch = ordered_json::object();
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      const auto dot = s.find('.');
      if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw DataError("--set expects section.key=value, got '" + s + "'");
      const std::string section = s.substr(0, dot), key = s.substr(dot + 1, eq - dot - 1);
      const std::string raw = s.substr(eq + 1);
      json value;
      try {
        value = json::parse(raw);
      } catch (const json::exception&) {
        value = raw;
      }
      patch[section][key] = value;
    }
    if (epochs) patch["train"]["epochs"] = *epochs;
    if (batch_size) patch["train"]["batch_size"] = *batch_size;
    if (lr) patch["train"]["learning_rate"] = *lr;
    if (seed) patch["train"]["seed"] = *seed;
    if (layers) patch["model"]["num_layers"] = *layers;
    if (width) patch["model"]["width"] = *width;
    if (fusion) patch["model"]["fusion"] = *fusion;
    if (no_pointer) patch["model"]["use_pointer"] = false;
    if (beam) patch["data"]["beam"] = *beam;
    if (no_image) patch["data"]["no_image"] = true;
    return run_config_from_json(json::parse(patch.dump()), cfg);
  }
};

std::vector<VisualConversation> read_data(const std::string& path) {
  CorpusLoad load = load_corpus(path);
  for (const auto& issue : load.report.issues)
    std::cerr << path << ":" << issue.line << ": skipped: " << issue.message << "\n";
  if (load.conversations.empty()) throw DataError("no valid conversations in '" + path + "'");
  return std::move(load.conversations);
}

std::map<std::string, RoiFeatureSet> read_feats(const std::string& path, const ModelConfig& cfg) {
  if (path.empty()) return {};
  RoiLoad load = load_roi_features(path, cfg.num_rois, cfg.roi_feature_dim);
  for (const auto& line : load.log) std::cerr << path << ": " << line << "\n";
  return std::move(load.features);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
}

RunConfig embedded_config(const json& meta) {
  return meta.contains("run_config") ? run_config_from_json(meta.at("run_config")) : RunConfig{};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal conversational query rewriting"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a rewriter");
  Overrides train_ov;
  train_ov.add_to(train_cmd, true);
  std::string train_data, train_feats, train_out;
  train_cmd->add_option("--data", train_data, "Corpus JSONL")->required();
  train_cmd->add_option("--feats", train_feats, "ROI feature JSONL");
  train_cmd->add_option("--out", train_out, "Output directory")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_feats, eval_report, eval_csv, eval_preds;
  bool by_bucket = false, eval_no_image = false;
  std::optional<std::size_t> eval_beam;
  eval_cmd->add_option("--ckpt", eval_ckpt)->required();
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--feats", eval_feats);
  eval_cmd->add_option("--report", eval_report, "EvalReport JSON path");
  eval_cmd->add_option("--csv", eval_csv, "Flattened report CSV path");
  eval_cmd->add_option("--predictions", eval_preds, "Per-example predictions JSONL");
  eval_cmd->add_option("--beam", eval_beam);
  eval_cmd->add_flag("--by-turn-bucket", by_bucket);
  eval_cmd->add_flag("--no-image", eval_no_image);

  // rewrite
  auto* rw_cmd = app.add_subcommand("rewrite", "Rewrite one query");
  std::string rw_ckpt, rw_query, rw_feats, rw_image;
  std::vector<std::string> rw_turns;
  std::optional<std::size_t> rw_beam;
  rw_cmd->add_option("--ckpt", rw_ckpt)->required();
  rw_cmd->add_option("--turn", rw_turns, "History turn as \"question||answer\"");
  rw_cmd->add_option("--query", rw_query)->required();
  rw_cmd->add_option("--feats", rw_feats);
  rw_cmd->add_option("--image-id", rw_image);
  rw_cmd->add_option("--beam", rw_beam);

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "Dataset statistics");
  std::string stats_data, stats_out;
  stats_cmd->add_option("--data", stats_data)->required();
  stats_cmd->add_option("--out", stats_out);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic corpus");
  SynthConfig sc;
  std::string synth_out, synth_feats, synth_pool = "objects";
  synth_cmd->add_option("--out", synth_out)->required();
  synth_cmd->add_option("--feats-out", synth_feats)->required();
  synth_cmd->add_option("--count", sc.count);
  synth_cmd->add_option("--target-turns", sc.target_turns);
  synth_cmd->add_option("--seed", sc.seed);
  synth_cmd->add_option("--p-coref", sc.p_coref);
  synth_cmd->add_option("--p-ellipsis", sc.p_ellipsis);
  synth_cmd->add_option("--pool", synth_pool, "objects or names");
  synth_cmd->add_option("--name-pool-size", sc.name_pool_size);
  synth_cmd->add_option("--image-only-fraction", sc.image_only_fraction);
  synth_cmd->add_option("--min-turns", sc.min_turns);
  synth_cmd->add_option("--max-turns", sc.max_turns);
  synth_cmd->add_option("--rois", sc.num_rois);
  synth_cmd->add_option("--feature-dim", sc.feature_dim);

  // kappa
  auto* kappa_cmd = app.add_subcommand("kappa", "Cohen's kappa of two raters");
  std::string ratings;
  kappa_cmd->add_option("--ratings", ratings, "CSV item_id,rater_a,rater_b")->required();

  // export-attn
  auto* attn_cmd = app.add_subcommand("export-attn", "Export an attention matrix as CSV");
  std::string attn_ckpt, attn_data, attn_feats, attn_kind = "encoder-self", attn_out;
  std::size_t attn_index = 0, attn_layer = 0;
  bool attn_no_image = false;
  attn_cmd->add_option("--ckpt", attn_ckpt)->required();
  attn_cmd->add_option("--data", attn_data)->required();
  attn_cmd->add_option("--feats", attn_feats);
  attn_cmd->add_option("--example", attn_index, "Example index in corpus order");
  attn_cmd->add_option("--layer", attn_layer);
  attn_cmd->add_option("--kind", attn_kind, "encoder-self, decoder-cross or copy-alpha");
  attn_cmd->add_option("--out", attn_out)->required();
  attn_cmd->add_flag("--no-image", attn_no_image);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (app.get_subcommands().empty() && e.get_exit_code() != 0) {
      if (argc > 1 && argv[1][0] != '-') std::cerr << "unknown subcommand '" << argv[1] << "'\n";
      std::cerr << app.help();
      return 2;
    }
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train_cmd->parsed()) {
      const RunConfig cfg = train_ov.apply({});
      const auto corpus = read_data(train_data);
      const Vocabulary vocab = build_vocab(corpus, cfg.data.vocab_min_count);
      RewriterModel model(cfg.model, vocab, cfg.train.seed);
      RunConfig resolved = cfg;
      resolved.model = model.config();
      const auto feats = read_feats(train_feats, model.config());
      const auto examples = make_examples(corpus);
      const auto prepared = prepare_examples(model, examples, feats, cfg.data.no_image);
      TrainOptions opts;
      opts.out_dir = train_out;
      opts.loss_csv = (std::filesystem::path(train_out) / "loss.csv").string();
      opts.run_config = to_json(resolved);
      std::filesystem::create_directories(train_out);
      const TrainResult res = train(model, prepared, cfg.train, opts);
      const auto means = res.epoch_means();
      std::cout << "trained " << res.steps << " steps over " << res.epochs_completed
                << " epochs on " << prepared.size() << " examples; |V|=" << vocab.size()
                << ", parameters=" << model.parameter_count() << "\n";
      if (!means.empty())
        std::cout << "epoch mean loss: first " << means.front() << ", last " << means.back() << "\n";
      if (!res.checkpoints.empty()) std::cout << "last checkpoint: " << res.checkpoints.back() << "\n";
      return 0;
    }

    if (eval_cmd->parsed()) {
      LoadedCheckpoint ck = load_checkpoint(eval_ckpt);
      RunConfig cfg = embedded_config(ck.metadata);
      if (eval_no_image) cfg.data.no_image = true;
      if (eval_beam) cfg.data.beam = *eval_beam;
      const auto corpus = read_data(eval_data);
      const auto feats = read_feats(eval_feats, ck.model.config());
      const auto examples = make_examples(corpus);
      const auto prepared = prepare_examples(ck.model, examples, feats, cfg.data.no_image);
      std::vector<RewriteResult> preds;
      const EvalReport rep = evaluate_model(ck.model, examples, prepared, cfg.data.beam,
                                            cfg.data.max_len, by_bucket, &preds);
      ordered_json out;
      out["run_config"] = to_json(cfg);
      out["seed"] = cfg.train.seed;
      out["meteor_variant"] = "meteor-lite";
      out["report"] = to_json(rep);
      const std::string text = out.dump(2) + "\n";
      if (!eval_report.empty()) write_text(eval_report, text);
      else std::cout << text;
      if (!eval_csv.empty())
        write_text(eval_csv, "# config: " + to_json(cfg).dump() + "\n" + to_csv(rep));
      if (!eval_preds.empty()) {
        std::ofstream p(eval_preds);
        if (!p) throw DataError("cannot write '" + eval_preds + "'");
        for (std::size_t i = 0; i < examples.size(); ++i) {
          ordered_json row;
          row["conversation_id"] = examples[i].conversation_id;
          row["turn_index"] = examples[i].turn_index;
          row["prediction"] = preds[i].text;
          row["reference"] = examples[i].rewrite;
          row["truncated"] = preds[i].truncated;
          p << row.dump() << "\n";
        }
      }
      if (!eval_report.empty())
        std::cout << "BLEU-2 " << rep.bleu2 << ", BLEU-4 " << rep.bleu4 << ", EM-pos "
                  << (rep.em_pos ? std::to_string(*rep.em_pos) : "n/a") << "\n";
      return 0;
    }

    if (rw_cmd->parsed()) {
      LoadedCheckpoint ck = load_checkpoint(rw_ckpt);
      const RunConfig cfg = embedded_config(ck.metadata);
      RewriteExample ex;
      ex.image_id = rw_image;
      ex.query = rw_query;
      for (const auto& t : rw_turns) {
        const auto sep = t.find("||");
        if (sep == std::string::npos) throw DataError("--turn expects \"question||answer\"");
        ex.history.emplace_back(t.substr(0, sep), t.substr(sep + 2));
      }
      ex.turn_index = ex.history.size();
      const auto feats = read_feats(rw_feats, ck.model.config());
      const auto it = feats.find(rw_image);
      const PreparedExample p =
          ck.model.prepare(ex, it == feats.end() ? nullptr : &it->second, false);
      const RewriteResult r = rewrite(ck.model, p, rw_beam.value_or(cfg.data.beam), cfg.data.max_len);
      std::cout << r.text << "\n";
      if (r.truncated) std::cerr << "warning: no hypothesis finished within max_len\n";
      return 0;
    }

    if (stats_cmd->parsed()) {
      const DatasetStats s = dataset_stats(read_data(stats_data));
      ordered_json j;
      j["conversations"] = s.conversations;
      j["queries"] = s.queries;
      j["pct_coreference"] = s.pct_coreference;
      j["pct_ellipsis"] = s.pct_ellipsis;
      j["pct_neither"] = s.pct_neither;
      j["avg_turns_per_conversation"] = s.avg_turns_per_conversation;
      j["avg_entities_per_conversation"] = s.avg_entities_per_conversation;
      j["avg_boxes_per_conversation"] = s.avg_boxes_per_conversation;
      j["avg_rewrite_length"] = s.avg_rewrite_length;
      j["avg_context_length"] = s.avg_context_length;
      ordered_json b;
      for (const auto& label : stats_bucket_labels()) b[label] = s.history_buckets.at(label);
      j["history_buckets"] = b;
      const std::string text = j.dump(2) + "\n";
      if (!stats_out.empty()) write_text(stats_out, text);
      else std::cout << text;
      return 0;
    }

    if (synth_cmd->parsed()) {
      if (synth_pool == "objects") sc.pool = EntityPool::Objects;
      else if (synth_pool == "names") sc.pool = EntityPool::Names;
      else throw DataError("unknown pool '" + synth_pool + "' (expected objects or names)");
      const SynthCorpus corpus = generate_synthetic(sc);
      write_corpus(synth_out, corpus.conversations);
      write_roi_features(synth_feats, corpus.features);
      std::cout << "wrote " << corpus.conversations.size() << " conversations, "
                << corpus.turns.size() << " turns; image-only pronoun rate "
                << corpus.image_only_rate() << "\n";
      return 0;
    }

    if (kappa_cmd->parsed()) {
      std::cout << cohen_kappa(load_ratings(ratings)) << "\n";
      return 0;
    }

    if (attn_cmd->parsed()) {
      LoadedCheckpoint ck = load_checkpoint(attn_ckpt);
      const RunConfig cfg = embedded_config(ck.metadata);
      const auto examples = make_examples(read_data(attn_data));
      if (attn_index >= examples.size())
        throw DataError("example " + std::to_string(attn_index) + " out of range (" +
                        std::to_string(examples.size()) + " examples)");
      const auto feats = read_feats(attn_feats, ck.model.config());
      const auto& ex = examples[attn_index];
      const auto it = feats.find(ex.image_id);
      const PreparedExample p = ck.model.prepare(
          ex, it == feats.end() ? nullptr : &it->second, attn_no_image || cfg.data.no_image);
      const AttentionMatrix m = export_attention(ck.model, p, attn_layer,
                                                 parse_attention_kind(attn_kind), cfg.data.beam,
                                                 cfg.data.max_len);
      write_text(attn_out, attention_csv(m, to_json(cfg)));
      return 0;
    }
  } catch (const std::exception& e) {
    // Data, config and domain failures all count as validation failures.
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
