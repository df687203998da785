#pragma once

#include <string>
#include <vector>

#include "mcqr/corpus.hpp"

namespace mcqr::testing {

inline Turn turn(std::string q, std::string a, std::string r, std::vector<Phenomenon> ph,
                 std::vector<std::string> entities = {}) {
  Turn t{std::move(q), std::move(a), std::move(r), std::move(ph), {}};
  double x = 0.0;
  for (auto& e : entities) {
    t.boxes.push_back({e, x, 0.1, 0.2, 0.3});
    x += 0.25;
  }
  return t;
}

/// Hand-counted corpus for the statistics checks.
inline std::vector<VisualConversation> two_conversation_fixture() {
  using P = Phenomenon;
  VisualConversation a{"c1", "img1",
                       {turn("what is it", "a dog", "what is it", {}, {"dog"}),
                        turn("is it brown", "yes", "is the dog brown", {P::Coreference}, {"dog", "ball"}),
                        turn("and the ball?", "red", "what color is the ball", {P::Ellipsis})}};
  VisualConversation b{"c2", "img2",
                       {turn("is he sitting", "no", "is the man sitting",
                             {P::Coreference, P::Ellipsis}, {"man"})}};
  return {a, b};
}

}  // namespace mcqr::testing
