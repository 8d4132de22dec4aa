#include "partcraft/prompt.hpp"

#include "partcraft/error.hpp"
#include "partcraft/tensor.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>

namespace partcraft {

Vocabulary::Vocabulary()
    : known_{"<bos>", "a",      "an",     "the",     "photo", "picture", "of",    "with",  "and",
             "in",    "style",  "sprite", "bird",    "dog",   "creature", "pencil", "drawing", "oil",
             "painting", "van", "gogh",   "dslr",    "cat",   "robot",   "designed", "inspired", "by"} {}

int Vocabulary::word_id(std::string_view word) const {
  auto it = std::find(known_.begin(), known_.end(), word);
  if (it != known_.end()) return static_cast<int>(it - known_.begin());
  return static_cast<int>(known_.size() + fnv1a(word.data(), word.size()) % kBuckets);
}

std::string pseudo_token_name(const PartCode& code) {
  return "<s" + std::to_string(code.slot) + "_v" + std::to_string(code.variant) + ">";
}

std::optional<PartCode> parse_pseudo_token(std::string_view text) {
  if (text.size() < 7 || text.front() != '<' || text.back() != '>' || text.substr(1, 1) != "s") return std::nullopt;
  auto underscore = text.find("_v");
  if (underscore == std::string_view::npos) return std::nullopt;
  PartCode code;
  auto slot_sv = text.substr(2, underscore - 2);
  auto var_sv = text.substr(underscore + 2, text.size() - underscore - 3);
  auto r1 = std::from_chars(slot_sv.data(), slot_sv.data() + slot_sv.size(), code.slot);
  auto r2 = std::from_chars(var_sv.data(), var_sv.data() + var_sv.size(), code.variant);
  if (r1.ec != std::errc() || r1.ptr != slot_sv.data() + slot_sv.size()) return std::nullopt;
  if (r2.ec != std::errc() || r2.ptr != var_sv.data() + var_sv.size()) return std::nullopt;
  if (code.slot < 0 || code.variant < 1) return std::nullopt;
  return code;
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence out;
  std::string word;
  auto flush = [&]() {
    if (word.empty()) return;
    Token t;
    t.kind = Token::Kind::Word;
    t.word_id = vocab.word_id(word);
    t.text = word;
    out.push_back(std::move(t));
    word.clear();
  };
  for (char ch : text) {
    unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalnum(u) || ch == '\'') {
      word.push_back(static_cast<char>(std::tolower(u)));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

TokenSequence render_prompt(const PromptSpec& spec, const Vocabulary& vocab, int parts, int variants) {
  spec.composition.validate(parts, variants);
  const std::string_view tmpl = spec.template_text;
  const std::string_view ph = PromptSpec::kPlaceholder;
  auto pos = tmpl.find(ph);
  if (pos == std::string_view::npos || tmpl.find(ph, pos + 1) != std::string_view::npos) {
    throw InputError("prompt template must contain exactly one " + std::string(ph));
  }
  TokenSequence out = tokenize(tmpl.substr(0, pos), vocab);
  for (const auto& code : spec.composition.codes) {
    if (code.absent()) continue;
    Token t;
    t.kind = Token::Kind::Part;
    t.code = code;
    t.text = pseudo_token_name(code);
    out.push_back(std::move(t));
  }
  for (auto& t : tokenize(tmpl.substr(pos + ph.size()), vocab)) out.push_back(std::move(t));
  for (auto& t : tokenize(spec.style_suffix, vocab)) out.push_back(std::move(t));
  return out;
}

std::string to_string(const TokenSequence& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t.text;
  }
  return out;
}

}  // namespace partcraft
