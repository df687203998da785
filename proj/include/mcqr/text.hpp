#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mcqr {

/// Lowercases ASCII, splits on whitespace and around every ASCII punctuation
/// character. Bracketed specials such as "[SEP]" survive as single tokens.
std::vector<std::string> tokenize(std::string_view text);

/// Tokens joined by single spaces; the canonical form used for comparisons.
std::string normalize(std::string_view text);

/// Counts tokens carrying at least one letter or digit.
std::size_t word_count(std::string_view text);

bool is_special_token(std::string_view token);

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kSos = 2;
  static constexpr std::size_t kEos = 3;
  static constexpr std::size_t kSep = 4;
  static constexpr std::size_t kCtx = 5;
  static constexpr std::size_t kTurn = 6;
  static constexpr std::size_t kNumSpecials = 7;
  static const std::array<std::string, kNumSpecials>& specials();

  Vocabulary();  // specials only
  /// `tokens` must start with the specials in their fixed order.
  explicit Vocabulary(std::vector<std::string> tokens);

  /// Specials first, then every token with count >= min_count, by descending
  /// count, ties alphabetical.
  static Vocabulary from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                std::size_t min_count);

  std::size_t size() const { return tokens_.size(); }
  std::optional<std::size_t> find(std::string_view token) const;
  std::size_t id_or_unk(std::string_view token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mcqr
