#pragma once

#include <string>
#include <vector>

#include "mcqr/model.hpp"
#include "mcqr/rng.hpp"

namespace mcqr::testing {

/// Specials followed by w0, w1, … up to `size` entries.
inline Vocabulary numbered_vocab(std::size_t size) {
  std::vector<std::string> toks(Vocabulary::specials().begin(), Vocabulary::specials().end());
  for (std::size_t i = toks.size(); i < size; ++i) toks.push_back("w" + std::to_string(i));
  return Vocabulary(toks);
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 1;
  c.width = 8;
  c.heads = 2;
  c.ffn_width = 12;
  c.num_rois = 3;
  c.roi_feature_dim = 4;
  c.max_text_len = 32;
  return c;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  Rng rng(seed);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Random ids in [kNumSpecials, vocab) followed by [SEP].
inline std::vector<std::size_t> random_text(std::size_t len, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < len; ++i)
    ids.push_back(Vocabulary::kNumSpecials + rng.below(vocab - Vocabulary::kNumSpecials));
  ids.push_back(Vocabulary::kSep);
  return ids;
}

inline PreparedExample random_example(const RewriterModel& model, std::size_t text_len,
                                      std::size_t target_len, std::uint64_t seed) {
  const auto& c = model.config();
  PreparedExample ex;
  ex.text = encode_ids(model.vocab(), random_text(text_len, c.vocab_size, seed));
  Rng rng(seed + 1000);
  for (std::size_t i = 0; i < target_len; ++i)
    ex.target.push_back(Vocabulary::kNumSpecials + rng.below(c.vocab_size - Vocabulary::kNumSpecials));
  ex.target.push_back(Vocabulary::kEos);
  ex.roi_features = random_tensor({c.num_rois, c.roi_feature_dim}, seed + 2000);
  ex.roi_boxes = random_tensor({c.num_rois, 4}, seed + 3000, 0.0, 0.5);
  return ex;
}

/// Scales every matrix parameter so activations are far from trivial.
inline void perturb(RewriterModel& model, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& p : model.parameters())
    for (double& v : p.value.values()) v += scale * rng.normal();
}

}  // namespace mcqr::testing
