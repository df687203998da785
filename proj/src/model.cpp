#include "mcqr/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "mcqr/rng.hpp"

namespace mcqr {

using nlohmann::json;
using nlohmann::ordered_json;

const char* fusion_name(FusionMode mode) { return mode == FusionMode::Early ? "early" : "late"; }

FusionMode parse_fusion(const std::string& name) {
  if (name == "early") return FusionMode::Early;
  if (name == "late") return FusionMode::Late;
  throw DataError("unknown fusion mode '" + name + "' (expected early or late)");
}

void ModelConfig::validate() const {
  require(width >= 1 && heads >= 1, "model: width and heads must be positive");
  require(width % heads == 0, "model: width must be divisible by heads");
  require(ffn_width >= 1, "model: ffn_width must be positive");
  require(vocab_size >= Vocabulary::kNumSpecials, "model: vocabulary smaller than the specials");
  require(num_rois >= 1 && roi_feature_dim >= 1, "model: num_rois and roi_feature_dim must be positive");
  require(rel_pos_buckets >= 4 && rel_pos_buckets % 2 == 0,
          "model: rel_pos_buckets must be even and >= 4");
  require(rel_pos_max_distance > rel_pos_buckets / 4, "model: rel_pos_max_distance too small");
  require(max_text_len >= 8, "model: max_text_len must be >= 8");
  require(init_std > 0.0, "model: init_std must be positive");
  require(norm_eps > 0.0, "model: norm_eps must be positive");
}

ordered_json to_json(const ModelConfig& c) {
  ordered_json j;
  j["num_layers"] = c.num_layers;
  j["width"] = c.width;
  j["heads"] = c.heads;
  j["ffn_width"] = c.ffn_width;
  j["vocab_size"] = c.vocab_size;
  j["num_rois"] = c.num_rois;
  j["roi_feature_dim"] = c.roi_feature_dim;
  j["fusion"] = fusion_name(c.fusion);
  j["rel_pos_buckets"] = c.rel_pos_buckets;
  j["rel_pos_max_distance"] = c.rel_pos_max_distance;
  j["max_text_len"] = c.max_text_len;
  j["use_pointer"] = c.use_pointer;
  j["init_std"] = c.init_std;
  j["norm_eps"] = c.norm_eps;
  return j;
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  if (!j.is_object()) throw DataError("model config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "num_layers") c.num_layers = v.get<std::size_t>();
      else if (key == "width") c.width = v.get<std::size_t>();
      else if (key == "heads") c.heads = v.get<std::size_t>();
      else if (key == "ffn_width") c.ffn_width = v.get<std::size_t>();
      else if (key == "vocab_size") c.vocab_size = v.get<std::size_t>();
      else if (key == "num_rois") c.num_rois = v.get<std::size_t>();
      else if (key == "roi_feature_dim") c.roi_feature_dim = v.get<std::size_t>();
      else if (key == "fusion") c.fusion = parse_fusion(v.get<std::string>());
      else if (key == "rel_pos_buckets") c.rel_pos_buckets = v.get<std::size_t>();
      else if (key == "rel_pos_max_distance") c.rel_pos_max_distance = v.get<std::size_t>();
      else if (key == "max_text_len") c.max_text_len = v.get<std::size_t>();
      else if (key == "use_pointer") c.use_pointer = v.get<bool>();
      else if (key == "init_std") c.init_std = v.get<double>();
      else if (key == "norm_eps") c.norm_eps = v.get<double>();
      else throw DataError("unknown model config key '" + key + "'");
    } catch (const json::exception& e) {
      throw DataError("model config key '" + key + "': " + e.what());
    }
  }
  return c;
}

int relative_position_bucket(long rel, std::size_t num_buckets, std::size_t max_distance) {
  const long half = static_cast<long>(num_buckets / 2);
  long ret = rel > 0 ? half : 0;
  const long n = std::labs(rel);
  const long max_exact = half / 2;
  if (n < max_exact) return static_cast<int>(ret + n);
  const double scaled = std::log(static_cast<double>(n) / static_cast<double>(max_exact)) /
                        std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact)) *
                        static_cast<double>(half - max_exact);
  const long large = std::min(max_exact + static_cast<long>(scaled), half - 1);
  return static_cast<int>(ret + large);
}

// ---------------------------------------------------------------------------
// Input encoding

namespace {

void append(std::vector<std::string>& out, const std::vector<std::string>& more) {
  out.insert(out.end(), more.begin(), more.end());
}

std::size_t assign_id(const Vocabulary& vocab, EncodedText& enc, const std::string& tok,
                      bool extend) {
  if (auto id = vocab.find(tok)) return *id;
  if (!extend) return Vocabulary::kUnk;
  const auto it = std::find(enc.oov.begin(), enc.oov.end(), tok);
  if (it != enc.oov.end()) return vocab.size() + static_cast<std::size_t>(it - enc.oov.begin());
  enc.oov.push_back(tok);
  return vocab.size() + enc.oov.size() - 1;
}

}  // namespace

EncodedText encode_text(const Vocabulary& vocab,
                        const std::vector<std::pair<std::string, std::string>>& history,
                        const std::string& query, std::size_t max_text_len) {
  const auto prefix = tokenize(kTaskPrefix);
  std::vector<std::vector<std::string>> turns;
  for (const auto& [q, a] : history) {
    std::vector<std::string> t = tokenize(q);
    t.push_back(Vocabulary::specials()[Vocabulary::kTurn]);
    append(t, tokenize(a));
    t.push_back(Vocabulary::specials()[Vocabulary::kTurn]);
    turns.push_back(std::move(t));
  }
  std::vector<std::string> tail{Vocabulary::specials()[Vocabulary::kCtx]};
  auto qtok = tokenize(query);
  const std::size_t fixed = prefix.size() + 2;  // [CTX] and [SEP]
  require(max_text_len > fixed, "encode_text: max_text_len too small for the fixed layout");
  if (fixed + qtok.size() > max_text_len)
    qtok.erase(qtok.begin(), qtok.end() - static_cast<long>(max_text_len - fixed));
  append(tail, qtok);
  tail.push_back(Vocabulary::specials()[Vocabulary::kSep]);

  std::size_t total = prefix.size() + tail.size();
  for (const auto& t : turns) total += t.size();
  std::size_t first = 0;
  while (total > max_text_len && first < turns.size()) total -= turns[first++].size();

  EncodedText enc;
  enc.dropped_turns = first;
  enc.kept_turns = turns.size() - first;
  for (const auto& tok : prefix) {
    enc.tokens.push_back(tok);
    enc.ids.push_back(assign_id(vocab, enc, tok, false));
  }
  auto add_all = [&](const std::vector<std::string>& toks) {
    for (const auto& tok : toks) {
      enc.tokens.push_back(tok);
      enc.ids.push_back(assign_id(vocab, enc, tok, true));
    }
  };
  for (std::size_t i = first; i < turns.size(); ++i) add_all(turns[i]);
  add_all(tail);
  enc.sep_index = enc.ids.size() - 1;
  return enc;
}

EncodedText encode_ids(const Vocabulary& vocab, std::vector<std::size_t> ids) {
  require(ids.size() >= 2, "encode_ids: need at least one token before the separator");
  EncodedText enc;
  for (std::size_t id : ids) {
    require(id < vocab.size(), "encode_ids: id outside the vocabulary");
    enc.tokens.push_back(vocab.token(id));
  }
  enc.ids = std::move(ids);
  enc.sep_index = enc.ids.size() - 1;
  return enc;
}

std::vector<std::size_t> encode_target(const Vocabulary& vocab, const EncodedText& text,
                                       const std::string& rewrite, bool allow_copy) {
  std::vector<std::size_t> out;
  for (const auto& tok : tokenize(rewrite)) {
    if (auto id = vocab.find(tok)) {
      out.push_back(*id);
      continue;
    }
    const auto it = std::find(text.oov.begin(), text.oov.end(), tok);
    if (allow_copy && it != text.oov.end())
      out.push_back(vocab.size() + static_cast<std::size_t>(it - text.oov.begin()));
    else
      out.push_back(Vocabulary::kUnk);
  }
  out.push_back(Vocabulary::kEos);
  return out;
}

std::vector<std::string> resolve_tokens(const Vocabulary& vocab, const EncodedText& text,
                                        const std::vector<std::size_t>& ids) {
  std::vector<std::string> out;
  for (std::size_t id : ids) {
    if (id == Vocabulary::kEos) break;
    if (id == Vocabulary::kSos || id == Vocabulary::kPad) continue;
    if (id < vocab.size()) {
      out.push_back(vocab.token(id));
    } else {
      require(id - vocab.size() < text.oov.size(), "resolve_tokens: extended id out of range");
      out.push_back(text.oov[id - vocab.size()]);
    }
  }
  return out;
}

std::string resolve_text(const Vocabulary& vocab, const EncodedText& text,
                         const std::vector<std::size_t>& ids) {
  std::string out;
  for (const auto& tok : resolve_tokens(vocab, text, ids)) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

RewriterModel::RewriterModel(ModelConfig config, Vocabulary vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
  config_.vocab_size = vocab_.size();
  config_.validate();
  const std::size_t d = config_.width, f = config_.ffn_width, V = config_.vocab_size;
  const std::size_t B = config_.rel_pos_buckets, H = config_.heads;

  Layout& L = layout_;
  L.token_embedding = add_param("token_embedding", {V, d});
  L.enc_rel_bias = add_param("encoder.rel_bias", {B, H});
  L.dec_rel_bias = add_param("decoder.rel_bias", {B, H});
  L.roi_projection = add_param("image.roi_projection", {config_.roi_feature_dim, d});
  L.box_projection = add_param("image.box_projection", {4, d});

  auto norm = [&](const std::string& prefix) {
    return Norm{add_param(prefix + ".gain", {d}), add_param(prefix + ".bias", {d})};
  };
  auto attn = [&](const std::string& prefix) {
    return Attn{add_param(prefix + ".wq", {d, d}), add_param(prefix + ".wk", {d, d}),
                add_param(prefix + ".wv", {d, d}), add_param(prefix + ".wo", {d, d})};
  };
  auto ffn = [&](const std::string& prefix) {
    return Ffn{add_param(prefix + ".w1", {d, f}), add_param(prefix + ".b1", {f}),
               add_param(prefix + ".w2", {f, d}), add_param(prefix + ".b2", {d})};
  };
  auto stack = [&](const std::string& prefix) {
    EncoderStack s;
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      const std::string p = prefix + "." + std::to_string(l);
      s.layers.push_back({norm(p + ".ln1"), attn(p + ".attn"), norm(p + ".ln2"), ffn(p + ".ffn")});
    }
    s.final_norm = norm(prefix + ".final_ln");
    return s;
  };
  if (config_.fusion == FusionMode::Early) {
    L.text_encoder = stack("encoder");
  } else {
    L.text_encoder = stack("encoder.text");
    L.image_encoder = stack("encoder.image");
  }
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    L.decoder.push_back({norm(p + ".ln1"), attn(p + ".self"), norm(p + ".ln2"), attn(p + ".cross"),
                         norm(p + ".ln3"), ffn(p + ".ffn")});
  }
  L.decoder_norm = norm("decoder.final_ln");
  L.output_head = add_param("output_head", {d, V});
  if (config_.use_pointer) {
    L.w_s = add_param("pointer.w_s", {d, d});
    L.w_h = add_param("pointer.w_h", {d, d});
    L.w_d = add_param("pointer.w_d", {d, 1});
    L.w_l = add_param("pointer.w_l", {d, 1});
    L.w_a = add_param("pointer.w_a", {d, 1});
  }

  // Matrices ~ N(0, init_std); biases and the mixing vectors start at zero,
  // layer-norm gains at one.
  Rng rng(seed);
  for (auto& p : params_) {
    const std::string& n = p.name;
    const auto ends = [&](const std::string& s) {
      return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
    };
    if (ends(".gain")) {
      p.value.fill(1.0);
    } else if (ends(".bias") || ends(".b1") || ends(".b2") || ends(".w_d") || ends(".w_l") ||
               ends(".w_a")) {
      continue;
    } else {
      for (double& v : p.value.values()) v = config_.init_std * rng.normal();
    }
  }
}

std::size_t RewriterModel::add_param(const std::string& name, Shape shape) {
  Parameter p;
  p.name = name;
  p.value = Tensor(shape, 0.0);
  p.grad = Tensor(shape, 0.0);
  p.index = params_.size();
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

std::vector<Parameter*> RewriterModel::parameter_ptrs() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

const Parameter& RewriterModel::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw ContractViolation("no parameter named '" + name + "'");
}

Parameter& RewriterModel::param(const std::string& name) {
  return const_cast<Parameter&>(std::as_const(*this).param(name));
}

std::size_t RewriterModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t RewriterModel::expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.width, f = c.ffn_width, V = c.vocab_size, L = c.num_layers;
  const std::size_t stacks = c.fusion == FusionMode::Late ? 2 : 1;
  std::size_t n = V * d + 2 * c.rel_pos_buckets * c.heads + c.roi_feature_dim * d + 4 * d;
  n += stacks * (L * (4 * d * d + 4 * d + 2 * d * f + f + d) + 2 * d);
  n += L * (8 * d * d + 6 * d + 2 * d * f + f + d) + 2 * d;
  n += d * V;
  if (c.use_pointer) n += 2 * d * d + 3 * d;
  return n;
}

PreparedExample RewriterModel::prepare(const RewriteExample& ex, const RoiFeatureSet* rois,
                                       bool no_image) const {
  PreparedExample out;
  out.text = encode_text(vocab_, ex.history, ex.query, config_.max_text_len);
  out.target = encode_target(vocab_, out.text, ex.rewrite, config_.use_pointer);
  const std::size_t n = config_.num_rois, dv = config_.roi_feature_dim;
  if (rois == nullptr || no_image) {
    out.roi_features = Tensor({n, dv}, 0.0);
    out.roi_boxes = Tensor({n, 4}, 0.0);
  } else {
    if (rois->features.rows() != n || rois->dim != dv)
      throw DataError("image '" + rois->image_id + "': features are " +
                      shape_str(rois->features.shape()) + ", model expects " +
                      shape_str({n, dv}));
    out.roi_features = rois->features;
    out.roi_boxes = rois->boxes;
  }
  return out;
}

bool RewriterModel::operator==(const RewriterModel& other) const {
  if (!(config_ == other.config_) || !(vocab_ == other.vocab_)) return false;
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name != other.params_[i].name || !(params_[i].value == other.params_[i].value))
      return false;
  return true;
}

// ---------------------------------------------------------------------------
// Forward pass

ForwardPass::ForwardPass(const RewriterModel& model, Tape& tape)
    : model_(model), tape_(tape), bound_(model.parameters().size()) {}

DTensor ForwardPass::p(std::size_t index) {
  auto& slot = bound_[index];
  if (!slot) {
    // The tape only writes Parameter::grad, and only during backward().
    auto& param = const_cast<Parameter&>(model_.parameters()[index]);
    slot = tape_.param(param);
  }
  return *slot;
}

void ForwardPass::bind_all() {
  for (std::size_t i = 0; i < bound_.size(); ++i) p(i);
}

DTensor ForwardPass::norm(DTensor x, const RewriterModel::Norm& n) {
  return layer_norm(x, p(n.gain), p(n.bias), model_.config().norm_eps);
}

DTensor ForwardPass::ffn(DTensor x, const RewriterModel::Ffn& f) {
  const DTensor h = relu(add_row(matmul(x, p(f.w1)), p(f.b1)));
  return add_row(matmul(h, p(f.w2)), p(f.b2));
}

DTensor ForwardPass::embed_text(const std::vector<std::size_t>& ids) {
  const std::size_t V = model_.config().vocab_size;
  std::vector<std::size_t> in(ids);
  for (auto& id : in)
    if (id >= V) id = Vocabulary::kUnk;
  return gather_rows(p(model_.layout().token_embedding), std::move(in));
}

DTensor ForwardPass::embed_image(const Tensor& roi_features, const Tensor& roi_boxes) {
  const auto& c = model_.config();
  require(roi_features.rows() == c.num_rois && roi_features.cols() == c.roi_feature_dim,
          "embed_image: features must be " + shape_str({c.num_rois, c.roi_feature_dim}));
  require(roi_boxes.rows() == c.num_rois && roi_boxes.cols() == 4,
          "embed_image: boxes must be " + shape_str({c.num_rois, 4}));
  const DTensor f = tape_.constant(roi_features);
  const DTensor b = tape_.constant(roi_boxes);
  return add(matmul(f, p(model_.layout().roi_projection)),
             matmul(b, p(model_.layout().box_projection)));
}

namespace {

std::shared_ptr<const std::vector<int>> bucket_grid(std::size_t rows, std::size_t cols,
                                                    std::size_t text_rows, std::size_t text_cols,
                                                    const ModelConfig& c) {
  auto g = std::make_shared<std::vector<int>>(rows * cols, -1);
  for (std::size_t i = 0; i < std::min(rows, text_rows); ++i)
    for (std::size_t j = 0; j < std::min(cols, text_cols); ++j)
      (*g)[i * cols + j] = relative_position_bucket(static_cast<long>(j) - static_cast<long>(i),
                                                    c.rel_pos_buckets, c.rel_pos_max_distance);
  return g;
}

AttentionMask causal_mask(std::size_t t) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(t * t, 0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j <= i; ++j) (*m)[i * t + j] = 1;
  return m;
}

AttentionMask prefix_mask(std::size_t rows, std::size_t cols, std::size_t visible) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(rows * cols, 0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < visible; ++j) (*m)[i * cols + j] = 1;
  return m;
}

}  // namespace

DTensor ForwardPass::run_encoder(const RewriterModel::EncoderStack& stack, DTensor x,
                                 std::optional<DTensor> bias, std::vector<DTensor>& attn_out) {
  const std::size_t H = model_.config().heads;
  DTensor h = x;
  for (const auto& layer : stack.layers) {
    const DTensor a = norm(h, layer.ln1);
    const DTensor att = attention(matmul(a, p(layer.attn.wq)), matmul(a, p(layer.attn.wk)),
                                  matmul(a, p(layer.attn.wv)), H, bias);
    attn_out.push_back(att);
    h = add(h, matmul(att, p(layer.attn.wo)));
    h = add(h, ffn(norm(h, layer.ln2), layer.ffn));
  }
  // An empty stack is the identity on h_0.
  return stack.layers.empty() ? h : norm(h, stack.final_norm);
}

EncodedBatch ForwardPass::encode(DTensor text_emb, DTensor image_emb, const EncodedText& text) {
  const auto& c = model_.config();
  const auto& L = model_.layout();
  const std::size_t m = text_emb.rows(), n = image_emb.rows();
  require(m == text.ids.size(), "encode: text embedding rows differ from the token count");
  require(text.sep_index <= m, "encode: separator position out of range");

  EncodedBatch out;
  out.text_len = m;
  out.sep_index = text.sep_index;
  out.token_ids = text.ids;
  out.ext_vocab = c.use_pointer ? c.vocab_size + text.oov.size() : c.vocab_size;
  if (c.fusion == FusionMode::Early) {
    const DTensor x = concat_rows(text_emb, image_emb);
    const DTensor bias =
        relative_bias(p(L.enc_rel_bias), bucket_grid(m + n, m + n, m, m, c), m + n, m + n);
    out.states = run_encoder(L.text_encoder, x, bias, out.text_attention);
  } else {
    const DTensor bias = relative_bias(p(L.enc_rel_bias), bucket_grid(m, m, m, m, c), m, m);
    const DTensor ht = run_encoder(L.text_encoder, text_emb, bias, out.text_attention);
    const DTensor hv = run_encoder(*L.image_encoder, image_emb, std::nullopt, out.image_attention);
    out.states = concat_rows(ht, hv);
  }
  return out;
}

EncodedBatch ForwardPass::encode(const PreparedExample& ex) {
  return encode(embed_text(ex.text.ids), embed_image(ex.roi_features, ex.roi_boxes), ex.text);
}

DecoderOutput ForwardPass::decode(const std::vector<std::size_t>& prev, const EncodedBatch& enc,
                                  bool last_only) {
  require(!prev.empty(), "decode: empty decoder input");
  const auto& c = model_.config();
  const auto& L = model_.layout();
  require(!L.decoder.empty(), "decode: the decoder needs at least one layer");
  require(enc.sep_index >= 1, "decode: no text before the separator");
  const std::size_t T = prev.size(), H = c.heads;
  const std::size_t S = enc.states.rows();

  DecoderOutput out;
  out.x = embed_text(prev);
  const DTensor bias = relative_bias(p(L.dec_rel_bias), bucket_grid(T, T, T, T, c), T, T);
  const AttentionMask causal = causal_mask(T);
  DTensor h = out.x;
  for (std::size_t l = 0; l < L.decoder.size(); ++l) {
    const auto& layer = L.decoder[l];
    const DTensor a = norm(h, layer.ln1);
    const DTensor sa = attention(matmul(a, p(layer.self_attn.wq)), matmul(a, p(layer.self_attn.wk)),
                                 matmul(a, p(layer.self_attn.wv)), H, bias, causal);
    out.self_attention.push_back(sa);
    h = add(h, matmul(sa, p(layer.self_attn.wo)));

    const DTensor qn = norm(h, layer.ln2);
    const DTensor q = matmul(qn, p(layer.cross_attn.wq));
    const DTensor k = matmul(enc.states, p(layer.cross_attn.wk));
    const DTensor v = matmul(enc.states, p(layer.cross_attn.wv));
    const DTensor ca = attention(q, k, v, H);
    out.cross_attention.push_back(ca);
    if (l + 1 == L.decoder.size()) {
      out.s = ca;
      out.c = attention(q, k, v, H, std::nullopt, prefix_mask(T, S, enc.sep_index));
    }
    h = add(h, matmul(ca, p(layer.cross_attn.wo)));
    h = add(h, ffn(norm(h, layer.ln3), layer.ffn));
  }
  if (last_only) {
    h = slice_rows(h, T - 1, T);
    out.s = slice_rows(out.s, T - 1, T);
    out.c = slice_rows(out.c, T - 1, T);
    out.x = slice_rows(out.x, T - 1, T);
  }
  const DTensor logits = matmul(norm(h, L.decoder_norm), p(L.output_head));
  out.p_vocab = softmax(logits, 1);
  return out;
}

PointerOutput ForwardPass::pointer_mix(const DecoderOutput& dec, const EncodedBatch& enc) {
  const auto& c = model_.config();
  const auto& L = model_.layout();
  require(c.use_pointer, "pointer_mix: model was built without the pointer");
  require(enc.sep_index >= 1, "pointer_mix: empty copyable span");
  PointerOutput out;
  const DTensor hu = slice_rows(enc.states, 0, enc.sep_index);
  const DTensor scores = matmul_nt(matmul(dec.s, p(*L.w_s)), matmul(hu, p(*L.w_h)));
  out.alpha = softmax(affine(scores, 1.0 / std::sqrt(static_cast<double>(c.width))), 1);
  const std::vector<std::size_t> cols(enc.token_ids.begin(),
                                      enc.token_ids.begin() + static_cast<long>(enc.sep_index));
  const DTensor p_copy = scatter_cols(out.alpha, cols, enc.ext_vocab);
  out.lambda = sigmoid(
      add(add(matmul(dec.c, p(*L.w_d)), matmul(dec.s, p(*L.w_l))), matmul(dec.x, p(*L.w_a))));
  out.p = pointer_combine(dec.p_vocab, p_copy, out.lambda, enc.ext_vocab);
  return out;
}

DTensor pointer_combine(DTensor p_vocab, DTensor p_copy, DTensor lambda, std::size_t ext_vocab) {
  require(p_copy.cols() == ext_vocab, "pointer_combine: copy distribution width mismatch");
  return add(mul_col(pad_cols(p_vocab, ext_vocab), lambda),
             mul_col(p_copy, affine(lambda, -1.0, 1.0)));
}

DTensor sequence_nll(DTensor dist, const std::vector<std::size_t>& targets) {
  require(dist.rows() == targets.size(), "sequence_nll: one target per row");
  for (std::size_t y : targets)
    require(y < dist.cols(), "sequence_nll: target id outside the output distribution");
  return affine(sum(log(pick(dist, targets))), -1.0);
}

DTensor ForwardPass::output_distribution(const DecoderOutput& dec, const EncodedBatch& enc) {
  if (model_.config().use_pointer) return pointer_mix(dec, enc).p;
  return dec.p_vocab;
}

DTensor ForwardPass::loss(const PreparedExample& ex) {
  require(ex.target.size() >= 2, "loss: empty gold rewrite");
  const EncodedBatch enc = encode(ex);
  std::vector<std::size_t> prev{Vocabulary::kSos};
  prev.insert(prev.end(), ex.target.begin(), ex.target.end() - 1);
  const DecoderOutput dec = decode(prev, enc);
  return sequence_nll(output_distribution(dec, enc), ex.target);
}

std::vector<double> row_values(const DTensor& t, std::size_t row) {
  const auto r = t.value().row(row);
  return {r.begin(), r.end()};
}

// ---------------------------------------------------------------------------
// Checkpoints

ordered_json checkpoint_json(const RewriterModel& model, const ordered_json& metadata) {
  ordered_json j;
  j["format"] = "mcqr-checkpoint";
  j["version"] = kCheckpointVersion;
  j["config"] = to_json(model.config());
  j["vocabulary"] = model.vocab().tokens();
  ordered_json params = ordered_json::array();
  for (const auto& p : model.parameters()) {
    ordered_json e;
    e["name"] = p.name;
    e["shape"] = p.value.shape();
    e["values"] = std::vector<double>(p.value.values().begin(), p.value.values().end());
    params.push_back(std::move(e));
  }
  j["parameters"] = std::move(params);
  j["metadata"] = metadata;
  return j;
}

void save_checkpoint(const std::string& path, const RewriterModel& model,
                     const ordered_json& metadata) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out << checkpoint_json(model, metadata).dump() << '\n';
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

LoadedCheckpoint checkpoint_from_json(const json& j) {
  try {
    if (j.value("format", "") != "mcqr-checkpoint") throw DataError("not a checkpoint file");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw DataError("unsupported checkpoint version " + std::to_string(version));
    const ModelConfig cfg = model_config_from_json(j.at("config"));
    Vocabulary vocab(j.at("vocabulary").get<std::vector<std::string>>());
    RewriterModel model(cfg, std::move(vocab), 0);
    const auto& params = j.at("parameters");
    if (params.size() != model.parameters().size())
      throw DataError("checkpoint has " + std::to_string(params.size()) + " parameters, expected " +
                      std::to_string(model.parameters().size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = model.parameters()[i];
      const auto& e = params[i];
      if (e.at("name").get<std::string>() != p.name)
        throw DataError("checkpoint parameter " + std::to_string(i) + " is '" +
                        e.at("name").get<std::string>() + "', expected '" + p.name + "'");
      if (e.at("shape").get<Shape>() != p.value.shape())
        throw DataError("checkpoint parameter '" + p.name + "' has the wrong shape");
      auto values = e.at("values").get<std::vector<double>>();
      if (values.size() != p.value.size())
        throw DataError("checkpoint parameter '" + p.name + "' has the wrong number of values");
      p.value = Tensor(p.value.shape(), std::move(values));
    }
    json meta = j.contains("metadata") ? j.at("metadata") : json::object();
    return LoadedCheckpoint{std::move(model), std::move(meta)};
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace mcqr
