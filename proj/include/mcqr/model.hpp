#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mcqr/autodiff.hpp"
#include "mcqr/corpus.hpp"
#include "mcqr/text.hpp"

namespace mcqr {

enum class FusionMode { Early, Late };

const char* fusion_name(FusionMode mode);
FusionMode parse_fusion(const std::string& name);

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t ffn_width = 128;
  std::size_t vocab_size = 0;  // taken from the vocabulary
  std::size_t num_rois = 36;
  std::size_t roi_feature_dim = 16;
  FusionMode fusion = FusionMode::Early;
  std::size_t rel_pos_buckets = 32;
  std::size_t rel_pos_max_distance = 128;
  std::size_t max_text_len = 160;
  /// false gives the generation-only ablation: P = P_vocab (λ fixed at 1).
  bool use_pointer = true;
  double init_std = 0.02;
  double norm_eps = 1e-6;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
/// Rejects unknown keys; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// T5-style bidirectional bucket for `key_pos - query_pos`: half the buckets
/// for each sign, exact buckets for small distances, log-spaced beyond.
int relative_position_bucket(long relative_position, std::size_t num_buckets,
                             std::size_t max_distance);

// ---------------------------------------------------------------------------
// Input encoding

/// Text side of one example, laid out as
/// `query rewrite : q_1 [TURN] a_1 [TURN] … [CTX] q_m [SEP]`.
/// Out-of-vocabulary tokens get per-example extended ids |V|, |V|+1, … so the
/// pointer can copy them.
struct EncodedText {
  std::vector<std::size_t> ids;
  std::vector<std::string> tokens;  // surface form of every position
  std::vector<std::string> oov;     // oov[k] is extended id |V| + k
  std::size_t sep_index = 0;        // position of [SEP]; copyable span is [0, sep_index)
  std::size_t kept_turns = 0;
  std::size_t dropped_turns = 0;    // oldest turns removed to fit max_text_len

  std::size_t ext_vocab_size(const Vocabulary& vocab) const { return vocab.size() + oov.size(); }
};

inline constexpr const char* kTaskPrefix = "query rewrite:";

EncodedText encode_text(const Vocabulary& vocab,
                        const std::vector<std::pair<std::string, std::string>>& history,
                        const std::string& query, std::size_t max_text_len);

/// Builds an EncodedText from raw ids (tests, degenerate inputs). The last id
/// is taken as the separator.
EncodedText encode_ids(const Vocabulary& vocab, std::vector<std::size_t> ids);

/// Rewrite ids followed by [EOS]. OOV words become extended ids when
/// `allow_copy` and they occur in the input, else [UNK].
std::vector<std::size_t> encode_target(const Vocabulary& vocab, const EncodedText& text,
                                       const std::string& rewrite, bool allow_copy);

/// Maps (extended) ids back to surface tokens; stops at [EOS].
std::vector<std::string> resolve_tokens(const Vocabulary& vocab, const EncodedText& text,
                                        const std::vector<std::size_t>& ids);
std::string resolve_text(const Vocabulary& vocab, const EncodedText& text,
                         const std::vector<std::size_t>& ids);

struct PreparedExample {
  EncodedText text;
  std::vector<std::size_t> target;  // ends with [EOS]
  Tensor roi_features;              // n × d_v
  Tensor roi_boxes;                 // n × 4
};

// ---------------------------------------------------------------------------
// Model

class RewriterModel {
 public:
  RewriterModel(ModelConfig config, Vocabulary vocab, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter*> parameter_ptrs();
  const Parameter& param(const std::string& name) const;
  Parameter& param(const std::string& name);

  std::size_t parameter_count() const;
  static std::size_t expected_parameter_count(const ModelConfig& config);

  PreparedExample prepare(const RewriteExample& example, const RoiFeatureSet* rois,
                          bool no_image = false) const;

  bool operator==(const RewriterModel& other) const;

  // Parameter index layout.
  struct Norm {
    std::size_t gain, bias;
  };
  struct Attn {
    std::size_t wq, wk, wv, wo;
  };
  struct Ffn {
    std::size_t w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Norm ln1;
    Attn attn;
    Norm ln2;
    Ffn ffn;
  };
  struct EncoderStack {
    std::vector<EncoderLayer> layers;
    Norm final_norm;
  };
  struct DecoderLayer {
    Norm ln1;
    Attn self_attn;
    Norm ln2;
    Attn cross_attn;
    Norm ln3;
    Ffn ffn;
  };
  struct Layout {
    std::size_t token_embedding, enc_rel_bias, dec_rel_bias, roi_projection, box_projection;
    EncoderStack text_encoder;  // the joint encoder in early fusion
    std::optional<EncoderStack> image_encoder;  // late fusion only
    std::vector<DecoderLayer> decoder;
    Norm decoder_norm;
    std::size_t output_head;
    std::optional<std::size_t> w_s, w_h, w_d, w_l, w_a;
  };
  const Layout& layout() const { return layout_; }

 private:
  std::size_t add_param(const std::string& name, Shape shape);

  ModelConfig config_;
  Vocabulary vocab_;
  std::vector<Parameter> params_;
  Layout layout_{};
};

struct EncodedBatch {
  DTensor states;  // h_L, (m+n) × d
  std::size_t text_len = 0;
  std::size_t sep_index = 0;
  std::vector<std::size_t> token_ids;  // extended ids of the text rows
  std::size_t ext_vocab = 0;
  /// Per layer self-attention probabilities. Early fusion: one node per
  /// layer over all rows. Late fusion: text stack then image stack nodes.
  std::vector<DTensor> text_attention;
  std::vector<DTensor> image_attention;
};

struct DecoderOutput {
  DTensor p_vocab;  // T × |V|
  DTensor s;        // last layer cross-attention over all encoder rows
  DTensor c;        // same attention restricted to the text before [SEP]
  DTensor x;        // embedded decoder inputs
  std::vector<DTensor> self_attention;
  std::vector<DTensor> cross_attention;
};

struct PointerOutput {
  DTensor p;       // T × |V_ext|
  DTensor lambda;  // T × 1
  DTensor alpha;   // T × sep_index
};

/// Records the network on a tape. Parameters are bound lazily, once per pass.
class ForwardPass {
 public:
  ForwardPass(const RewriterModel& model, Tape& tape);

  Tape& tape() { return tape_; }
  const RewriterModel& model() const { return model_; }

  /// Binds every parameter now, so later tape truncation keeps them alive.
  void bind_all();

  DTensor embed_text(const std::vector<std::size_t>& ids);
  DTensor embed_image(const Tensor& roi_features, const Tensor& roi_boxes);
  EncodedBatch encode(DTensor text_emb, DTensor image_emb, const EncodedText& text);
  EncodedBatch encode(const PreparedExample& example);

  /// Runs the decoder over every prefix position of `prev_tokens` (which
  /// starts with [SOS]). With last_only the outputs keep only the final row.
  DecoderOutput decode(const std::vector<std::size_t>& prev_tokens, const EncodedBatch& enc,
                       bool last_only = false);
  DecoderOutput decode_step(const std::vector<std::size_t>& prev_tokens, const EncodedBatch& enc) {
    return decode(prev_tokens, enc, true);
  }

  /// Mixes vocabulary and copy distributions; requires a pointer model.
  PointerOutput pointer_mix(const DecoderOutput& dec, const EncodedBatch& enc);
  /// Final distribution over the extended vocabulary for either model kind.
  DTensor output_distribution(const DecoderOutput& dec, const EncodedBatch& enc);

  /// Teacher-forced -Σ_t log P(y_t | y_<t).
  DTensor loss(const PreparedExample& example);

 private:
  DTensor p(std::size_t index);
  DTensor norm(DTensor x, const RewriterModel::Norm& n);
  DTensor ffn(DTensor x, const RewriterModel::Ffn& f);
  DTensor run_encoder(const RewriterModel::EncoderStack& stack, DTensor x,
                      std::optional<DTensor> bias, std::vector<DTensor>& attn_out);

  const RewriterModel& model_;
  Tape& tape_;
  std::vector<std::optional<DTensor>> bound_;
};

/// λ·pad(P_vocab) + (1 − λ)·P_copy over `ext_vocab` columns; λ is T×1.
DTensor pointer_combine(DTensor p_vocab, DTensor p_copy, DTensor lambda, std::size_t ext_vocab);

/// -Σ_t log dist[t, targets[t]].
DTensor sequence_nll(DTensor dist, const std::vector<std::size_t>& targets);

std::vector<double> row_values(const DTensor& t, std::size_t row);

// ---------------------------------------------------------------------------
// Checkpoints: versioned JSON with the config, vocabulary and every parameter.

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const RewriterModel& model,
                     const nlohmann::ordered_json& metadata);
nlohmann::ordered_json checkpoint_json(const RewriterModel& model,
                                       const nlohmann::ordered_json& metadata);

struct LoadedCheckpoint {
  RewriterModel model;
  nlohmann::json metadata;
};
LoadedCheckpoint load_checkpoint(const std::string& path);
LoadedCheckpoint checkpoint_from_json(const nlohmann::json& j);

}  // namespace mcqr
