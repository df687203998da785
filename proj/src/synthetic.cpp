#include "mcqr/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mcqr/rng.hpp"

namespace mcqr {

namespace {

enum class Pronoun { He, She, It };

const char* pronoun_word(Pronoun p) {
  switch (p) {
    case Pronoun::He: return "he";
    case Pronoun::She: return "she";
    case Pronoun::It: return "it";
  }
  return "it";
}

struct Entity {
  std::string referent;  // what the rewrite substitutes for a pronoun
  std::string mention;   // how a query names it explicitly
  Pronoun pronoun;
};

std::vector<Entity> build_pool(EntityPool pool, std::size_t name_pool_size) {
  std::vector<Entity> out;
  if (pool == EntityPool::Objects) {
    const std::vector<std::pair<Pronoun, std::vector<std::string>>> groups = {
        {Pronoun::He, {"man", "boy", "waiter", "farmer", "pilot", "king"}},
        {Pronoun::She, {"woman", "girl", "nurse", "queen", "dancer", "singer"}},
        {Pronoun::It, {"dog", "cat", "horse", "car", "kite", "ball"}},
    };
    for (const auto& [p, nouns] : groups)
      for (const auto& noun : nouns) out.push_back({"the " + noun, "the " + noun, p});
    return out;
  }
  // Invented two- and three-syllable names; deterministic in the index.
  static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static const char* vowels[] = {"a", "e", "i", "o", "u"};
  static const char* codas[] = {"", "n", "r", "x", "l"};
  const char* nouns[] = {"man", "woman", "dog"};
  for (std::size_t i = 0; i < name_pool_size; ++i) {
    std::size_t k = i * 7919 + 13;
    std::string name;
    const std::size_t syllables = 2 + (i % 2);
    for (std::size_t s = 0; s < syllables; ++s) {
      name += onsets[k % 14];
      k /= 14;
      name += vowels[k % 5];
      k /= 5;
    }
    name += codas[i % 5];
    const auto p = static_cast<Pronoun>(i % 3);
    out.push_back({name, std::string("the ") + nouns[i % 3] + " " + name, p});
  }
  // Guarantee uniqueness by suffixing repeats.
  std::map<std::string, int> seen;
  for (auto& e : out) {
    const int n = seen[e.referent]++;
    if (n > 0) {
      const std::string fixed = e.referent + std::string(static_cast<std::size_t>(n), 'a');
      e.mention = e.mention.substr(0, e.mention.size() - e.referent.size()) + fixed;
      e.referent = fixed;
    }
  }
  return out;
}

enum class Pred { IsAdj, IsVerb, Holding, Color, Where, Doing };

struct Question {
  Pred kind;
  std::string word;
};

const std::vector<std::string> kAdjectives = {"happy", "tall",   "young", "old",   "wet",
                                              "small", "sleepy", "busy",  "hungry", "big"};
const std::vector<std::string> kVerbs = {"sitting", "standing", "running", "smiling",
                                         "eating",  "sleeping", "playing", "looking"};
const std::vector<std::string> kThings = {"cup", "book", "phone", "bag", "stick", "hat"};
const std::vector<std::string> kColors = {"red", "blue", "green", "white", "black", "brown"};
const std::vector<std::string> kPlaces = {"left", "right", "grass", "bench", "road", "beach"};

template <class T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

Question random_question(Rng& rng) {
  const auto kind = static_cast<Pred>(rng.below(6));
  switch (kind) {
    case Pred::IsAdj: return {kind, pick(rng, kAdjectives)};
    case Pred::IsVerb: return {kind, pick(rng, kVerbs)};
    default: return {kind, ""};
  }
}

std::string render(const Question& q, const std::string& x) {
  switch (q.kind) {
    case Pred::IsAdj:
    case Pred::IsVerb: return "is " + x + " " + q.word + " ?";
    case Pred::Holding: return "what is " + x + " holding ?";
    case Pred::Color: return "what color is " + x + " ?";
    case Pred::Where: return "where is " + x + " ?";
    case Pred::Doing: return "what is " + x + " doing ?";
  }
  return "";
}

std::string elliptical(const Question& q) {
  switch (q.kind) {
    case Pred::IsAdj:
    case Pred::IsVerb: return "and " + q.word + " ?";
    case Pred::Holding: return "holding what ?";
    case Pred::Color: return "what color ?";
    case Pred::Where: return "where ?";
    case Pred::Doing: return "doing what ?";
  }
  return "";
}

std::string answer_for(const Question& q, Rng& rng) {
  switch (q.kind) {
    case Pred::IsAdj:
    case Pred::IsVerb: return rng.bernoulli(0.5) ? "yes" : "no";
    case Pred::Holding: return "a " + pick(rng, kThings);
    case Pred::Color: return pick(rng, kColors);
    case Pred::Where: return "on the " + pick(rng, kPlaces);
    case Pred::Doing: return pick(rng, kVerbs);
  }
  return "";
}

double round4(double v) { return std::round(v * 1e4) / 1e4; }

enum class Label { Negative, Coref, Ellipsis };

}  // namespace

std::vector<std::string> entity_pool_words(EntityPool pool, std::size_t name_pool_size) {
  std::vector<std::string> out;
  for (const auto& e : build_pool(pool, name_pool_size)) out.push_back(e.referent);
  return out;
}

double SynthCorpus::image_only_rate() const {
  std::size_t pronouns = 0, image = 0;
  std::size_t k = 0;
  for (const auto& conv : conversations)
    for (const auto& t : conv.turns) {
      const auto& info = turns[k++];
      if (!t.has(Phenomenon::Coreference)) continue;
      ++pronouns;
      if (info.resolution == Resolution::Image) ++image;
    }
  return pronouns ? static_cast<double>(image) / static_cast<double>(pronouns) : 0.0;
}

SynthCorpus generate_synthetic(const SynthConfig& cfg) {
  const auto pool = build_pool(cfg.pool, cfg.name_pool_size);
  require(pool.size() >= cfg.entities_per_scene,
          "entity pool of " + std::to_string(pool.size()) + " is smaller than entities_per_scene " +
              std::to_string(cfg.entities_per_scene));
  require(cfg.entities_per_scene >= 1, "entities_per_scene must be positive");
  require(cfg.num_rois >= cfg.entities_per_scene, "need at least one ROI per scene entity");
  require(cfg.min_turns >= 1 && cfg.min_turns <= cfg.max_turns, "invalid turn range");
  require(cfg.p_coref >= 0 && cfg.p_ellipsis >= 0, "phenomenon rates must be nonnegative");
  require(cfg.image_only_fraction >= 0 && cfg.image_only_fraction <= 1,
          "image_only_fraction must lie in [0,1]");

  double p_coref = cfg.p_coref, p_ellipsis = cfg.p_ellipsis;
  if (p_coref + p_ellipsis > 1.0) {
    const double z = p_coref + p_ellipsis;
    p_coref /= z;
    p_ellipsis /= z;
  }

  // Fixed appearance per entity plus a bank of background regions.
  Rng feat_rng(cfg.feature_seed);
  std::vector<std::vector<double>> appearance(pool.size(), std::vector<double>(cfg.feature_dim));
  for (auto& v : appearance)
    for (auto& x : v) x = feat_rng.normal();
  std::vector<std::vector<double>> background(32, std::vector<double>(cfg.feature_dim));
  for (auto& v : background)
    for (auto& x : v) x = feat_rng.normal();

  std::vector<std::size_t> by_class[3];
  for (std::size_t i = 0; i < pool.size(); ++i)
    by_class[static_cast<int>(pool[i].pronoun)].push_back(i);

  Rng rng(cfg.seed);
  SynthCorpus out;
  std::size_t total_turns = 0, pronouns = 0, image_pronouns = 0;
  for (std::size_t c = 0;; ++c) {
    if (cfg.target_turns) {
      if (total_turns >= *cfg.target_turns) break;
    } else if (c >= cfg.count) {
      break;
    }

    // Scene: distinct pronoun classes while possible so a pronoun is never
    // ambiguous within one image.
    std::vector<std::size_t> scene;
    if (cfg.entities_per_scene <= 3) {
      std::vector<int> classes;
      for (int k = 0; k < 3; ++k)
        if (!by_class[k].empty()) classes.push_back(k);
      require(classes.size() >= cfg.entities_per_scene,
              "entity pool lacks enough pronoun classes for entities_per_scene");
      rng.shuffle(classes);
      for (std::size_t k = 0; k < cfg.entities_per_scene; ++k)
        scene.push_back(pick(rng, by_class[classes[k]]));
    } else {
      std::vector<std::size_t> all(pool.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      rng.shuffle(all);
      scene.assign(all.begin(), all.begin() + static_cast<long>(cfg.entities_per_scene));
    }

    const std::string tag = std::to_string(cfg.seed) + "-" + std::to_string(c);
    RoiFeatureSet rois{"img-" + tag, cfg.feature_dim, Tensor({cfg.num_rois, cfg.feature_dim}),
                       Tensor({cfg.num_rois, 4})};
    std::vector<std::size_t> slots(cfg.num_rois);
    for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
    rng.shuffle(slots);
    std::map<std::size_t, std::size_t> roi_of;  // pool index -> ROI row
    for (std::size_t k = 0; k < scene.size(); ++k) roi_of[scene[k]] = slots[k];
    for (std::size_t r = 0; r < cfg.num_rois; ++r) {
      const std::vector<double>* base = &background[rng.below(background.size())];
      for (const auto& [e, row] : roi_of)
        if (row == r) base = &appearance[e];
      for (std::size_t j = 0; j < cfg.feature_dim; ++j)
        rois.features.at(r, j) = (*base)[j] + cfg.feature_noise * rng.normal();
      const double w = round4(rng.uniform(0.1, 0.5)), h = round4(rng.uniform(0.1, 0.5));
      rois.boxes.at(r, 0) = round4(rng.uniform(0.0, 1.0 - w));
      rois.boxes.at(r, 1) = round4(rng.uniform(0.0, 1.0 - h));
      rois.boxes.at(r, 2) = w;
      rois.boxes.at(r, 3) = h;
    }

    std::size_t num_turns = cfg.min_turns + rng.below(cfg.max_turns - cfg.min_turns + 1);
    if (cfg.target_turns) num_turns = std::min(num_turns, *cfg.target_turns - total_turns);

    std::vector<Label> labels(num_turns);
    for (auto& l : labels) {
      const double u = rng.uniform();
      l = u < p_coref ? Label::Coref : u < p_coref + p_ellipsis ? Label::Ellipsis : Label::Negative;
    }
    // Ellipsis needs a previous turn to lean on.
    if (labels[0] == Label::Ellipsis) {
      auto it = std::find_if(labels.begin() + 1, labels.end(),
                             [](Label l) { return l != Label::Ellipsis; });
      if (it != labels.end())
        std::swap(labels[0], *it);
      else
        labels[0] = Label::Coref;
    }

    // Open with a naming turn when image-only pronouns are over target, so
    // later pronouns can resolve through the text.
    if (labels[0] == Label::Coref &&
        static_cast<double>(image_pronouns) >=
            cfg.image_only_fraction * static_cast<double>(pronouns + 1)) {
      auto it = std::find(labels.begin() + 1, labels.end(), Label::Negative);
      if (it != labels.end()) std::swap(labels[0], *it);
    }

    VisualConversation conv{"conv-" + tag, rois.image_id, {}};
    std::set<std::size_t> mentioned;
    Question prev_q{};
    std::size_t prev_ref = scene[0];
    auto box_for = [&](std::size_t e) {
      const std::size_t r = roi_of.at(e);
      return EntityBox{pool[e].referent, rois.boxes.at(r, 0), rois.boxes.at(r, 1),
                       rois.boxes.at(r, 2), rois.boxes.at(r, 3)};
    };

    for (std::size_t i = 0; i < num_turns; ++i) {
      Turn turn;
      SynthTurnInfo info;
      info.conversation_id = conv.conversation_id;
      info.turn_index = i;
      Label label = labels[i];

      std::vector<std::size_t> named, unnamed;
      for (auto e : scene) (mentioned.count(e) ? named : unnamed).push_back(e);
      if (label == Label::Coref && cfg.image_only_fraction == 0.0 && named.empty())
        label = Label::Negative;

      std::size_t ref = 0;
      Question q{};
      if (label == Label::Negative) {
        ref = pick(rng, scene);
        q = random_question(rng);
        turn.query = render(q, pool[ref].mention);
        turn.rewrite = turn.query;
        mentioned.insert(ref);
      } else if (label == Label::Coref) {
        // Running balance: forced image-only pronouns (nothing named yet) are
        // offset by later text-resolvable ones so the realized rate tracks
        // image_only_fraction.
        const bool want_image =
            static_cast<double>(image_pronouns) <
            cfg.image_only_fraction * static_cast<double>(pronouns + 1);
        const auto& first = want_image ? unnamed : named;
        const auto& second = want_image ? named : unnamed;
        ref = !first.empty() ? pick(rng, first) : pick(rng, second);
        ++pronouns;
        if (!mentioned.count(ref)) ++image_pronouns;
        q = random_question(rng);
        turn.query = render(q, pronoun_word(pool[ref].pronoun));
        turn.rewrite = render(q, pool[ref].referent);
        turn.phenomena = {Phenomenon::Coreference};
        info.resolution = mentioned.count(ref) ? Resolution::Text : Resolution::Image;
      } else {
        const bool other_entity = scene.size() >= 2 && rng.bernoulli(0.5);
        if (other_entity) {
          do {
            ref = pick(rng, scene);
          } while (ref == prev_ref);
          q = prev_q;
          turn.query = "what about " + pool[ref].mention + " ?";
          turn.rewrite = render(q, pool[ref].referent);
          mentioned.insert(ref);
          info.resolution = Resolution::Text;
        } else {
          ref = prev_ref;
          q = random_question(rng);
          turn.query = elliptical(q);
          turn.rewrite = render(q, pool[ref].referent);
          info.resolution = mentioned.count(ref) ? Resolution::Text : Resolution::Image;
        }
        turn.phenomena = {Phenomenon::Ellipsis};
      }
      turn.answer = answer_for(q, rng);
      turn.boxes = {box_for(ref)};
      info.referent = pool[ref].referent;
      info.roi = roi_of.at(ref);
      prev_q = q;
      prev_ref = ref;
      conv.turns.push_back(std::move(turn));
      out.turns.push_back(std::move(info));
    }
    total_turns += conv.turns.size();
    out.features[rois.image_id] = std::move(rois);
    out.conversations.push_back(std::move(conv));
  }
  return out;
}

}  // namespace mcqr
