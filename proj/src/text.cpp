#include "mcqr/text.hpp"

#include <algorithm>
#include <cctype>

#include "mcqr/tensor.hpp"

namespace mcqr {

namespace {
bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }
}  // namespace

const std::array<std::string, Vocabulary::kNumSpecials>& Vocabulary::specials() {
  static const std::array<std::string, kNumSpecials> names = {
      "[PAD]", "[UNK]", "[SOS]", "[EOS]", "[SEP]", "[CTX]", "[TURN]"};
  return names;
}

bool is_special_token(std::string_view token) {
  const auto& s = Vocabulary::specials();
  return std::find(s.begin(), s.end(), token) != s.end();
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '[') {
      const auto close = text.find(']', i);
      if (close != std::string_view::npos && is_special_token(text.substr(i, close - i + 1))) {
        flush();
        out.emplace_back(text.substr(i, close - i + 1));
        i = close + 1;
        continue;
      }
    }
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    ++i;
  }
  flush();
  return out;
}

std::string normalize(std::string_view text) {
  std::string out;
  for (const auto& tok : tokenize(text)) {
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

std::size_t word_count(std::string_view text) {
  std::size_t n = 0;
  for (const auto& tok : tokenize(text)) {
    if (std::any_of(tok.begin(), tok.end(),
                    [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }))
      ++n;
  }
  return n;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>(specials().begin(), specials().end())) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  require(tokens_.size() >= kNumSpecials, "vocabulary must contain the special tokens");
  for (std::size_t i = 0; i < kNumSpecials; ++i)
    require(tokens_[i] == specials()[i], "vocabulary special " + specials()[i] + " not at id " +
                                             std::to_string(i));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const bool fresh = index_.emplace(tokens_[i], i).second;
    require(fresh, "duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

Vocabulary Vocabulary::from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                   std::size_t min_count) {
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : counts)
    if (n >= min_count && !is_special_token(tok)) kept.emplace_back(tok, n);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens(specials().begin(), specials().end());
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return Vocabulary(std::move(tokens));
}

std::optional<std::size_t> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocabulary::id_or_unk(std::string_view token) const {
  return find(token).value_or(kUnk);
}

}  // namespace mcqr
