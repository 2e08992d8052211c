#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <string>
#include <vector>

#include "freeatm/prompt.hpp"
#include "freeatm/rng.hpp"

using namespace freeatm;
using namespace freeatm::prompt;

TEST(Tokenize, SplitsPunctuationAndPrependsBos) {
  EXPECT_EQ(tokenize("a dog, a cat."),
            (std::vector<std::string>{"<bos>", "a", "dog", ",", "a", "cat", "."}));
  EXPECT_EQ(tokenize_words("  (hello)  "), (std::vector<std::string>{"(hello)"}));
  EXPECT_EQ(tokenize(""), (std::vector<std::string>{"<bos>"}));
}

TEST(AlignNouns, MultiTokenAndRepeatedNouns) {
  const std::vector<NounRef> nouns{{0, "dog"}, {1, "traffic light"}, {2, "dog"}};
  const auto a = align_nouns("a photo of a dog, a traffic light and a dog", nouns);
  ASSERT_EQ(a.noun_spans.size(), 3u);
  EXPECT_EQ(a.noun_spans[0].token_indices, (std::vector<std::size_t>{5}));
  EXPECT_EQ(a.noun_spans[1].token_indices, (std::vector<std::size_t>{8, 9}));
  EXPECT_EQ(a.noun_spans[2].token_indices, (std::vector<std::size_t>{12}));
  const std::vector<NounRef> missing{{0, "owl"}};
  EXPECT_THROW(align_nouns("a photo of a dog", missing), ParameterError);
}

TEST(ScenePrompt, ArticlesAndSeparators) {
  const std::vector<std::string> one{"owl"};
  EXPECT_EQ(scene_prompt(one), "a photo of an owl");
  const std::vector<std::string> three{"dog", "cat", "umbrella"};
  EXPECT_EQ(scene_prompt(three), "a photo of a dog, a cat and an umbrella");
  EXPECT_THROW(scene_prompt(std::vector<std::string>{}), ParameterError);
}

TEST(AugmentPrompt, BaseTemplate) {
  EXPECT_EQ(augment_prompt("dog", default_vocabulary(), "base", 0), "a photo of dog");
}

TEST(AugmentPrompt, FillsSlotsFromTheVocabulary) {
  Vocabulary v;
  v.places = {"in a park"};
  v.other_classes = {"a ball"};
  v.actions = {"running"};
  v.lexicon.plurals = {"dogs"};
  EXPECT_EQ(augment_prompt("dog", v, "class_somewhere", 3), "dog is in a park");
  EXPECT_EQ(augment_prompt("dogs", v, "class_somewhere", 3), "dogs are in a park");
  EXPECT_EQ(augment_prompt("dog", v, "class_with_other_doing_somewhere", 3),
            "dog with a ball is running in a park");
}

TEST(AugmentPrompt, DeterministicAndContainsClass) {
  const Vocabulary v = default_vocabulary();
  for (const auto& t : builtin_templates()) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const std::string s = augment_prompt("zebra", v, t.id, seed);
      EXPECT_EQ(s, augment_prompt("zebra", v, t.id, seed));
      EXPECT_NE(s.find("zebra"), std::string::npos);
      EXPECT_EQ(s.find('{'), std::string::npos);
    }
  }
}

TEST(AugmentPrompt, OtherSlotAvoidsTheClassItself) {
  Vocabulary v = default_vocabulary();
  v.other_classes = {"a dog", "a kite"};
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    EXPECT_EQ(augment_prompt("dog", v, "class_with_other_somewhere", seed).find("with a dog"),
              std::string::npos);
}

TEST(AugmentPrompt, Errors) {
  EXPECT_THROW(augment_prompt("dog", default_vocabulary(), "no_such_template", 0), ParameterError);
  EXPECT_THROW(augment_prompt("", default_vocabulary(), "base", 0), ParameterError);
  Vocabulary empty;
  EXPECT_THROW(augment_prompt("dog", empty, "class_somewhere", 0), ParameterError);
}

TEST(PositionPrompt, ExactTemplate) {
  EXPECT_EQ(position_prompt("dog", 4).rendered, "The dog is in block 4.");
  EXPECT_EQ(position_prompt("cat", 0).rendered, "The cat is in block 0.");
  EXPECT_THROW(position_prompt("", 1), ParameterError);
  EXPECT_THROW(position_prompt("dog", -1), ParameterError);
}

TEST(PositionPrompt, RoundTripsThroughParser) {
  const std::regex pattern(R"(^The .+ is in block [0-9]+\.$)");
  for (const std::string noun : {"dog", "traffic light", "hot air balloon", "x"})
    for (int block = 0; block < 20; ++block) {
      const auto p = position_prompt(noun, block);
      EXPECT_TRUE(std::regex_match(p.rendered, pattern));
      const auto back = parse_position_prompt(p.rendered);
      ASSERT_TRUE(back.has_value());
      EXPECT_EQ(*back, p);
    }
  EXPECT_FALSE(parse_position_prompt("The dog is in block .").has_value());
  EXPECT_FALSE(parse_position_prompt("A dog is in block 3.").has_value());
  EXPECT_FALSE(parse_position_prompt("The dog is in block 3").has_value());
}

TEST(ComposeVlpText, ConcatenatesInOrder) {
  EXPECT_EQ(compose_vlp_text("a dog and a cat", {}), "a dog and a cat");
  const std::vector<PositionPrompt> ps{position_prompt("dog", 4), position_prompt("cat", 2)};
  const std::string text = compose_vlp_text("a dog and a cat", ps);
  EXPECT_EQ(text, "a dog and a cat The dog is in block 4. The cat is in block 2.");
  EXPECT_EQ(text.size(), 15 + 22 + 22 + 2);
  EXPECT_EQ(compose_vlp_text("a dog and a cat", ps), text);
}

TEST(ParseVlpText, InvertsComposition) {
  Rng rng(1);
  const std::vector<std::string> nouns{"dog", "cat", "traffic light", "teddy bear", "kite"};
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<PositionPrompt> ps;
    const std::size_t n = rng.below(4);
    for (std::size_t i = 0; i < n; ++i)
      ps.push_back(position_prompt(nouns[rng.below(nouns.size())], static_cast<int>(rng.below(12))));
    const std::string caption = trial % 5 == 0 ? "" : "a photo of a dog and a kite";
    const VlpText back = parse_vlp_text(compose_vlp_text(caption, ps));
    EXPECT_EQ(back.caption, caption);
    EXPECT_EQ(back.prompts, ps);
  }
}

TEST(VocabularyFile, SkipsBlankLinesAndTrailingSpace) {
  const auto path = std::filesystem::temp_directory_path() / "freeatm_vocab_test.txt";
  {
    std::ofstream out(path);
    out << "in a park  \n\n on a beach\r\n";
  }
  EXPECT_EQ(load_vocabulary_file(path), (std::vector<std::string>{"in a park", " on a beach"}));
  std::filesystem::remove(path);
  EXPECT_THROW(load_vocabulary_file(path), IoError);
}
