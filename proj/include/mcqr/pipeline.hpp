#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcqr/decoding.hpp"
#include "mcqr/metrics.hpp"
#include "mcqr/model.hpp"
#include "mcqr/training.hpp"

namespace mcqr {

struct DataConfig {
  std::size_t vocab_min_count = 1;
  bool no_image = false;
  std::size_t beam = kDefaultBeam;
  std::size_t max_len = kDefaultMaxLen;

  bool operator==(const DataConfig&) const = default;
};

/// Everything a run depends on. Serialized as {"model", "train", "data"}.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  bool operator==(const RunConfig&) const = default;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Rejects unknown keys at every level.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::string& path);

/// Prepared examples in input order; a missing image falls back to zero rows.
std::vector<PreparedExample> prepare_examples(const RewriterModel& model,
                                              const std::vector<RewriteExample>& examples,
                                              const std::map<std::string, RoiFeatureSet>& features,
                                              bool no_image);

std::vector<RewriteResult> predict(const RewriterModel& model,
                                   const std::vector<PreparedExample>& prepared, std::size_t beam,
                                   std::size_t max_len);

EvalReport evaluate_model(const RewriterModel& model, const std::vector<RewriteExample>& examples,
                          const std::vector<PreparedExample>& prepared, std::size_t beam,
                          std::size_t max_len, bool by_bucket,
                          std::vector<RewriteResult>* predictions = nullptr);

enum class AttentionKind { EncoderSelf, DecoderCross, CopyAlpha };

AttentionKind parse_attention_kind(const std::string& name);
const char* attention_kind_name(AttentionKind kind);

struct AttentionMatrix {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<std::vector<double>> values;  // rows × cols, averaged over heads
};

/// Head-averaged attention for one example. Decoder kinds use the rewrite
/// produced by beam search (rows are generated tokens, [EOS] included).
AttentionMatrix export_attention(const RewriterModel& model, const PreparedExample& example,
                                 std::size_t layer, AttentionKind kind,
                                 std::size_t beam = kDefaultBeam,
                                 std::size_t max_len = kDefaultMaxLen);

std::string attention_csv(const AttentionMatrix& m, const nlohmann::ordered_json& run_config);

}  // namespace mcqr
