#include "mcqr/pipeline.hpp"

#include <fstream>
#include <sstream>

#include "mcqr/csv.hpp"

namespace mcqr {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["model"] = to_json(c.model);
  j["train"] = to_json(c.train);
  ordered_json d;
  d["vocab_min_count"] = c.data.vocab_min_count;
  d["no_image"] = c.data.no_image;
  d["beam"] = c.data.beam;
  d["max_len"] = c.data.max_len;
  j["data"] = std::move(d);
  return j;
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  if (!j.is_object()) throw DataError("run config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "model") {
      c.model = model_config_from_json(v, c.model);
    } else if (key == "train") {
      c.train = train_config_from_json(v, c.train);
    } else if (key == "data") {
      if (!v.is_object()) throw DataError("data config must be a JSON object");
      for (const auto& [k, x] : v.items()) {
        try {
          if (k == "vocab_min_count") c.data.vocab_min_count = x.get<std::size_t>();
          else if (k == "no_image") c.data.no_image = x.get<bool>();
          else if (k == "beam") c.data.beam = x.get<std::size_t>();
          else if (k == "max_len") c.data.max_len = x.get<std::size_t>();
          else throw DataError("unknown data config key '" + k + "'");
        } catch (const json::exception& e) {
          throw DataError("data config key '" + k + "': " + e.what());
        }
      }
    } else {
      throw DataError("unknown run config section '" + key + "'");
    }
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

std::vector<PreparedExample> prepare_examples(const RewriterModel& model,
                                              const std::vector<RewriteExample>& examples,
                                              const std::map<std::string, RoiFeatureSet>& features,
                                              bool no_image) {
  std::vector<PreparedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto it = features.find(ex.image_id);
    out.push_back(model.prepare(ex, it == features.end() ? nullptr : &it->second, no_image));
  }
  return out;
}

std::vector<RewriteResult> predict(const RewriterModel& model,
                                   const std::vector<PreparedExample>& prepared, std::size_t beam,
                                   std::size_t max_len) {
  std::vector<RewriteResult> out;
  out.reserve(prepared.size());
  for (const auto& ex : prepared) out.push_back(rewrite(model, ex, beam, max_len));
  return out;
}

EvalReport evaluate_model(const RewriterModel& model, const std::vector<RewriteExample>& examples,
                          const std::vector<PreparedExample>& prepared, std::size_t beam,
                          std::size_t max_len, bool by_bucket,
                          std::vector<RewriteResult>* predictions) {
  require(examples.size() == prepared.size(), "evaluate_model: examples and inputs differ in size");
  const auto preds = predict(model, prepared, beam, max_len);
  EvalInput in;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    in.candidates.push_back(preds[i].text);
    in.references.push_back(examples[i].rewrite);
    in.queries.push_back(examples[i].query);
    in.labels.push_back(examples[i].phenomena);
    in.history_turns.push_back(examples[i].history_turns());
  }
  if (predictions) *predictions = preds;
  return evaluate_predictions(in, by_bucket);
}

AttentionKind parse_attention_kind(const std::string& name) {
  if (name == "encoder-self") return AttentionKind::EncoderSelf;
  if (name == "decoder-cross") return AttentionKind::DecoderCross;
  if (name == "copy-alpha") return AttentionKind::CopyAlpha;
  throw DataError("unknown attention kind '" + name +
                  "' (expected encoder-self, decoder-cross or copy-alpha)");
}

const char* attention_kind_name(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::EncoderSelf: return "encoder-self";
    case AttentionKind::DecoderCross: return "decoder-cross";
    case AttentionKind::CopyAlpha: return "copy-alpha";
  }
  return "?";
}

namespace {

// Head average of probs (heads × rows × cols) written at a block offset.
void add_head_mean(const Tensor& probs, std::vector<std::vector<double>>& out, std::size_t row0,
                   std::size_t col0) {
  const std::size_t heads = probs.shape()[0], rows = probs.shape()[1], cols = probs.shape()[2];
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out[row0 + r][col0 + c] += probs[(h * rows + r) * cols + c] / static_cast<double>(heads);
}

}  // namespace

AttentionMatrix export_attention(const RewriterModel& model, const PreparedExample& example,
                                 std::size_t layer, AttentionKind kind, std::size_t beam,
                                 std::size_t max_len) {
  const auto& cfg = model.config();
  if (layer >= cfg.num_layers)
    throw DataError("layer " + std::to_string(layer) + " out of range (model has " +
                    std::to_string(cfg.num_layers) + ")");
  if (kind == AttentionKind::CopyAlpha && !cfg.use_pointer)
    throw DataError("copy-alpha needs a pointer model");

  AttentionMatrix m;
  const std::size_t text = example.text.ids.size(), n = cfg.num_rois;
  std::vector<std::string> enc_labels = example.text.tokens;
  for (std::size_t j = 0; j < n; ++j) enc_labels.push_back("roi:" + std::to_string(j));

  Tape tape;
  ForwardPass pass(model, tape);
  const EncodedBatch enc = pass.encode(example);

  if (kind == AttentionKind::EncoderSelf) {
    m.row_labels = enc_labels;
    m.col_labels = enc_labels;
    m.values.assign(text + n, std::vector<double>(text + n, 0.0));
    if (cfg.fusion == FusionMode::Early) {
      add_head_mean(attention_probs(enc.text_attention[layer]), m.values, 0, 0);
    } else {
      add_head_mean(attention_probs(enc.text_attention[layer]), m.values, 0, 0);
      add_head_mean(attention_probs(enc.image_attention[layer]), m.values, text, text);
    }
    return m;
  }

  const SearchResult found =
      beam_search(make_scorer(model, example), beam, max_len, Vocabulary::kEos);
  const auto& out_tokens = found.best.tokens;
  for (std::size_t id : out_tokens)
    m.row_labels.push_back(id == Vocabulary::kEos ? Vocabulary::specials()[Vocabulary::kEos]
                                                  : resolve_tokens(model.vocab(), example.text, {id}).at(0));
  std::vector<std::size_t> prev{Vocabulary::kSos};
  prev.insert(prev.end(), out_tokens.begin(), out_tokens.end() - 1);
  const DecoderOutput dec = pass.decode(prev, enc);

  if (kind == AttentionKind::DecoderCross) {
    m.col_labels = enc_labels;
    m.values.assign(out_tokens.size(), std::vector<double>(text + n, 0.0));
    add_head_mean(attention_probs(dec.cross_attention[layer]), m.values, 0, 0);
  } else {
    m.col_labels.assign(example.text.tokens.begin(),
                        example.text.tokens.begin() + static_cast<long>(example.text.sep_index));
    const PointerOutput ptr = pass.pointer_mix(dec, enc);
    for (std::size_t t = 0; t < ptr.alpha.rows(); ++t) m.values.push_back(row_values(ptr.alpha, t));
  }
  return m;
}

std::string attention_csv(const AttentionMatrix& m, const ordered_json& run_config) {
  std::ostringstream out;
  out << "# config: " << run_config.dump() << '\n';
  std::vector<std::string> header{"row"};
  header.insert(header.end(), m.col_labels.begin(), m.col_labels.end());
  out << csv::join(header) << '\n';
  for (std::size_t r = 0; r < m.values.size(); ++r) {
    std::vector<std::string> fields{m.row_labels[r]};
    for (double v : m.values[r]) fields.push_back(json(v).dump());
    out << csv::join(fields) << '\n';
  }
  return out.str();
}

}  // namespace mcqr
