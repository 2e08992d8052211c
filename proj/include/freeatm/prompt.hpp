#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "freeatm/attention.hpp"
#include "freeatm/errors.hpp"
#include "freeatm/rng.hpp"

namespace freeatm::prompt {

inline constexpr std::string_view kBosToken = "<bos>";

// Class-label augmentation templates. Slots: {class} {other} {be} {action} {place}.
struct PromptTemplate {
  std::string id;
  std::string pattern;
};

inline const std::vector<PromptTemplate>& builtin_templates() {
  static const std::vector<PromptTemplate> templates = {
      {"base", "a photo of {class}"},
      {"class_somewhere", "{class} {be} {place}"},
      {"class_with_other_somewhere", "{class} with {other} {be} {place}"},
      {"class_with_other_doing_somewhere", "{class} with {other} {be} {action} {place}"},
  };
  return templates;
}

inline const PromptTemplate& find_template(std::string_view id) {
  for (const auto& t : builtin_templates())
    if (t.id == id) return t;
  throw ParameterError("unknown template id '" + std::string(id) + "'");
}

struct Lexicon {
  std::set<std::string> plurals;

  // Classes without a plural entry are treated as singular.
  bool is_plural(const std::string& word) const { return plurals.count(word) > 0; }
};

struct Vocabulary {
  std::vector<std::string> other_classes;
  std::vector<std::string> places;
  std::vector<std::string> actions;
  Lexicon lexicon;
};

inline Vocabulary default_vocabulary() {
  Vocabulary v;
  v.other_classes = {"a dog", "a cat", "a child", "a bird", "a ball", "a kite", "two friends"};
  v.places = {"in a park", "on a beach", "in a living room", "on a city street",
              "in a snowy field", "near a lake", "in a garden"};
  v.actions = {"playing", "running", "sitting", "resting", "jumping", "walking"};
  v.lexicon.plurals = {"dogs", "cats", "birds", "people", "children", "sheep", "geese",
                       "balloons", "kites"};
  return v;
}

// One entry per line, UTF-8; blank lines and trailing whitespace ignored.
inline std::vector<std::string> load_vocabulary_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require<IoError>(static_cast<bool>(in), "cannot open vocabulary file " + path.string());
  std::vector<std::string> entries;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) entries.push_back(line);
  }
  return entries;
}

namespace detail {

inline bool is_split_punct(char c) {
  return c == ',' || c == '.' || c == ';' || c == ':' || c == '!' || c == '?';
}

inline void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos;
       pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

}  // namespace detail

// Whitespace tokenizer that splits leading/trailing punctuation into separate
// tokens. The output of tokenize() starts with the BOS token.
inline std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    std::string_view word = text.substr(i, j - i);
    std::vector<std::string> trailing;
    while (!word.empty() && detail::is_split_punct(word.front())) {
      tokens.emplace_back(1, word.front());
      word.remove_prefix(1);
    }
    while (!word.empty() && detail::is_split_punct(word.back())) {
      trailing.emplace_back(1, word.back());
      word.remove_suffix(1);
    }
    if (!word.empty()) tokens.emplace_back(word);
    tokens.insert(tokens.end(), trailing.rbegin(), trailing.rend());
    i = j;
  }
  return tokens;
}

inline std::vector<std::string> tokenize(std::string_view prompt) {
  std::vector<std::string> tokens{std::string(kBosToken)};
  auto words = tokenize_words(prompt);
  tokens.insert(tokens.end(), words.begin(), words.end());
  return tokens;
}

struct NounRef {
  int instance_id = 0;
  std::string noun;
};

// Locates each noun's token sequence in order of appearance; repeated nouns
// bind to successive occurrences.
inline attention::TokenAlignment align_nouns(const std::string& prompt,
                                             std::span<const NounRef> nouns) {
  attention::TokenAlignment alignment{prompt, tokenize(prompt), {}};
  std::size_t cursor = 1;
  for (const auto& ref : nouns) {
    const auto needle = tokenize_words(ref.noun);
    require<ParameterError>(!needle.empty(), "noun is empty");
    auto it = std::search(alignment.tokens.begin() + static_cast<std::ptrdiff_t>(cursor),
                          alignment.tokens.end(), needle.begin(), needle.end());
    require<ParameterError>(it != alignment.tokens.end(),
                            "noun '" + ref.noun + "' not found in prompt '" + prompt + "'");
    attention::NounSpan span{ref.instance_id, ref.noun, {}};
    const auto start = static_cast<std::size_t>(it - alignment.tokens.begin());
    for (std::size_t k = 0; k < needle.size(); ++k) span.token_indices.push_back(start + k);
    cursor = start + needle.size();
    alignment.noun_spans.push_back(std::move(span));
  }
  return alignment;
}

inline std::string with_article(const std::string& noun) {
  const bool vowel = !noun.empty() && std::string_view("aeiou").find(static_cast<char>(
                                          std::tolower(static_cast<unsigned char>(noun[0])))) !=
                                          std::string_view::npos;
  return (vowel ? "an " : "a ") + noun;
}

// Renders a template with explicit slot values. Throws ParameterError when a
// slot used by the pattern has no value.
inline std::string render_template(const PromptTemplate& tmpl,
                                   const std::map<std::string, std::string>& slots) {
  std::string out = tmpl.pattern;
  for (const auto& [name, value] : slots) detail::replace_all(out, "{" + name + "}", value);
  require<ParameterError>(out.find('{') == std::string::npos,
                          "template '" + tmpl.id + "' has unfilled slots: " + out);
  return out;
}

// "a photo of a dog, a cat and an owl" for a scene containing those nouns.
inline std::string scene_prompt(std::span<const std::string> nouns) {
  require<ParameterError>(!nouns.empty(), "scene prompt needs at least one noun");
  std::string subject;
  for (std::size_t i = 0; i < nouns.size(); ++i) {
    if (i > 0) subject += (i + 1 == nouns.size()) ? " and " : ", ";
    subject += with_article(nouns[i]);
  }
  return render_template(find_template("base"), {{"class", subject}});
}

// Seeded slot filling. Slots are drawn in the fixed order other, action,
// place, and only for slots the template uses.
inline std::string augment_prompt(const std::string& class_name, const Vocabulary& vocab,
                                  std::string_view template_id, std::uint64_t seed) {
  require<ParameterError>(!class_name.empty(), "class name is empty");
  const PromptTemplate& tmpl = find_template(template_id);
  Rng rng(seed);
  std::map<std::string, std::string> slots{
      {"class", class_name}, {"be", vocab.lexicon.is_plural(class_name) ? "are" : "is"}};
  auto uses = [&](std::string_view slot) {
    return tmpl.pattern.find("{" + std::string(slot) + "}") != std::string::npos;
  };
  auto pick = [&](const std::vector<std::string>& pool, const char* what) {
    require<ParameterError>(!pool.empty(), std::string("vocabulary for ") + what + " is empty");
    return pool[rng.below(pool.size())];
  };
  if (uses("other")) {
    std::vector<std::string> others;
    for (const auto& o : vocab.other_classes)
      if (o != class_name && o != with_article(class_name)) others.push_back(o);
    slots["other"] = pick(others.empty() ? vocab.other_classes : others, "other classes");
  }
  if (uses("action")) slots["action"] = pick(vocab.actions, "actions");
  if (uses("place")) slots["place"] = pick(vocab.places, "places");
  return render_template(tmpl, slots);
}

struct PositionPrompt {
  std::string noun;
  int block = 0;
  std::string rendered;

  friend bool operator==(const PositionPrompt&, const PositionPrompt&) = default;
};

inline PositionPrompt position_prompt(const std::string& noun, int block) {
  require<ParameterError>(!noun.empty(), "position prompt noun is empty");
  require<ParameterError>(block >= 0, "block index must be >= 0");
  return {noun, block, "The " + noun + " is in block " + std::to_string(block) + "."};
}

// Inverse of position_prompt for a single rendered prompt. The noun is
// everything between the leading "The " and the last " is in block ".
inline std::optional<PositionPrompt> parse_position_prompt(std::string_view text) {
  constexpr std::string_view head = "The ";
  constexpr std::string_view mid = " is in block ";
  if (text.size() < head.size() + mid.size() + 3 || !text.starts_with(head) ||
      !text.ends_with('.'))
    return std::nullopt;
  const std::size_t mid_pos = text.rfind(mid);
  if (mid_pos == std::string_view::npos || mid_pos <= head.size()) return std::nullopt;
  const std::string_view digits =
      text.substr(mid_pos + mid.size(), text.size() - 1 - (mid_pos + mid.size()));
  if (digits.empty() || digits.size() > 9 ||
      !std::all_of(digits.begin(), digits.end(),
                   [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
    return std::nullopt;
  int block = 0;
  std::from_chars(digits.data(), digits.data() + digits.size(), block);
  const std::string noun(text.substr(head.size(), mid_pos - head.size()));
  return PositionPrompt{noun, block, std::string(text)};
}

// Caption followed by each rendered prompt, single-space separated. Callers
// pass prompts in instance-id order.
inline std::string compose_vlp_text(const std::string& caption,
                                    std::span<const PositionPrompt> prompts) {
  std::string out = caption;
  for (const auto& p : prompts) {
    if (!out.empty()) out += ' ';
    out += p.rendered;
  }
  return out;
}

struct VlpText {
  std::string caption;
  std::vector<PositionPrompt> prompts;
};

// Splits composed text back into caption and position prompts by peeling
// complete "The <noun> is in block <n>." suffixes off the end. Nouns must not
// themselves contain "The ".
inline VlpText parse_vlp_text(std::string_view text) {
  VlpText result;
  std::string_view rest = text;
  while (!rest.empty()) {
    const std::size_t mid = rest.rfind(" is in block ");
    if (mid == std::string_view::npos) break;
    const std::size_t start = rest.rfind("The ", mid);
    if (start == std::string_view::npos) break;
    if (start > 0 && rest[start - 1] != ' ') break;
    auto parsed = parse_position_prompt(rest.substr(start));
    if (!parsed) break;
    result.prompts.insert(result.prompts.begin(), std::move(*parsed));
    rest = rest.substr(0, start);
    if (!rest.empty()) rest.remove_suffix(1);
  }
  result.caption = std::string(rest);
  return result;
}

}  // namespace freeatm::prompt
