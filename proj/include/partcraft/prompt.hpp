#pragma once

#include "partcraft/parts.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace partcraft {

/// Word vocabulary of the toy text backend: a short list of known words plus
/// hash buckets, so any free text maps to stable ids.
class Vocabulary {
 public:
  static constexpr int kBuckets = 256;
  static constexpr int kBos = 0;

  Vocabulary();

  int word_id(std::string_view word) const;
  int size() const { return static_cast<int>(known_.size()) + kBuckets; }
  const std::vector<std::string>& known_words() const { return known_; }

 private:
  std::vector<std::string> known_;
};

struct Token {
  enum class Kind { Word, Part };
  Kind kind = Kind::Word;
  int word_id = 0;
  PartCode code;
  std::string text;

  bool operator==(const Token&) const = default;
};

using TokenSequence = std::vector<Token>;

/// "<s{slot}_v{variant}>"
std::string pseudo_token_name(const PartCode& code);
std::optional<PartCode> parse_pseudo_token(std::string_view text);

/// Lowercases and splits on anything that is not alphanumeric or an
/// apostrophe, so natural text can never produce a pseudo-token.
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab);

struct PromptSpec {
  static constexpr const char* kPlaceholder = "[*]";

  std::string template_text = "a photo of a [*]";
  PartComposition composition;
  std::string style_suffix;
};

/// Template words with the placeholder replaced by one pseudo-token per
/// present slot in slot order, followed by the style suffix words.
TokenSequence render_prompt(const PromptSpec& spec, const Vocabulary& vocab, int parts, int variants);

std::string to_string(const TokenSequence& tokens);

}  // namespace partcraft
