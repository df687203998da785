#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mcqr/corpus.hpp"

namespace mcqr {

enum class EntityPool {
  Objects,  // small in-vocabulary pool of typed nouns ("the dog")
  Names,    // large pool of invented proper names, mostly out-of-vocabulary
};

struct SynthConfig {
  std::size_t count = 100;                   // conversations
  std::optional<std::size_t> target_turns;   // stop at exactly this many turns
  std::uint64_t seed = 42;
  double p_coref = 0.572;
  double p_ellipsis = 0.304;
  std::size_t entities_per_scene = 3;
  EntityPool pool = EntityPool::Objects;
  std::size_t name_pool_size = 500;
  /// Probability that a pronoun targets an entity never named in prior text,
  /// when such an entity exists. Zero forbids image-only pronouns entirely.
  double image_only_fraction = 0.5;
  std::size_t min_turns = 1;
  std::size_t max_turns = 10;
  std::size_t num_rois = 36;
  std::size_t feature_dim = 16;
  double feature_noise = 0.05;
  /// Seeds the per-entity feature vectors; shared across corpora so separately
  /// generated train and test sets agree on what each entity looks like.
  std::uint64_t feature_seed = 7;
};

enum class Resolution { None, Text, Image };

/// Generator-side truth per turn, aligned with make_examples() order.
struct SynthTurnInfo {
  std::string conversation_id;
  std::size_t turn_index = 0;
  Resolution resolution = Resolution::None;
  std::string referent;             // entity in the rewrite, if any
  std::optional<std::size_t> roi;   // ROI row holding that entity
};

struct SynthCorpus {
  std::vector<VisualConversation> conversations;
  std::map<std::string, RoiFeatureSet> features;
  std::vector<SynthTurnInfo> turns;
  /// Fraction of pronoun (coreference) turns resolvable only through the image.
  double image_only_rate() const;
};

/// Word pool the generator draws entities from.
std::vector<std::string> entity_pool_words(EntityPool pool, std::size_t name_pool_size);

/// Templated visual conversations whose gold rewrites invert the template
/// deterministically. Throws ContractViolation when the entity pool is
/// smaller than entities_per_scene.
SynthCorpus generate_synthetic(const SynthConfig& cfg);

}  // namespace mcqr
