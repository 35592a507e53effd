#include "sra/tokenizer.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "sra/rng.hpp"

namespace sra {
namespace {

// Hand-derived: corpus "abab" has pair counts (a,b)=2, (b,a)=1, so the one
// merge slot goes to "ab". Ids: specials 0..2, then a=3, b=4, then ab=5.
TEST(PairMerge, SingleMergeByHand) {
  ToyTokenizer tok = ToyTokenizer::train(TokenizerScheme::PairMerge, {"abab"}, 6);
  EXPECT_EQ(tok.vocab_size(), 6);
  EXPECT_EQ(tok.token_id("a"), 3);
  EXPECT_EQ(tok.token_id("b"), 4);
  EXPECT_EQ(tok.token_id("ab"), 5);

  Encoded e = tok.encode_with_offsets("abab");
  EXPECT_EQ(e.ids, (std::vector<int>{ToyTokenizer::kBos, 5, 5, ToyTokenizer::kEos}));
  EXPECT_EQ(e.offsets, (std::vector<int>{0, 2, 4, 0}));
  EXPECT_EQ(tok.decode(e.ids), "abab");
}

TEST(PairMerge, StopsWhenNoPairRepeats) {
  // After merging "ab", the only remaining pair (ab,ab) occurs once.
  ToyTokenizer tok = ToyTokenizer::train(TokenizerScheme::PairMerge, {"abab"}, 50);
  EXPECT_EQ(tok.vocab_size(), 6);
}

TEST(PairMerge, TieBreaksToLexicographicallySmallestPair) {
  // (x,y) and (a,b) both occur twice; (a,b) is smaller so it merges first.
  ToyTokenizer tok = ToyTokenizer::train(TokenizerScheme::PairMerge, {"xyxy", "abab"}, 9);
  EXPECT_EQ(tok.token_id("ab"), 7);
  EXPECT_EQ(tok.token_id("xy"), 8);
}

TEST(PairMerge, MergesAcrossSpaces) {
  // The stream has no word boundaries: "t " repeats and may fuse.
  ToyTokenizer tok = ToyTokenizer::train(TokenizerScheme::PairMerge,
                                         {"cat cat cat cat", "bat bat bat bat"}, 12);
  bool has_space_token = false;
  for (int id = 3; id < tok.vocab_size(); ++id) {
    const std::string& t = tok.token_string(id);
    if (t.size() > 1 && t.find(' ') != std::string::npos) {
      has_space_token = true;
    }
  }
  EXPECT_TRUE(has_space_token);
}

// Hand-derived: in "ababab" the substring scores count*(len-1) are
// ab=3, ba=2, aba=4, bab=4, abab=6, so the single lexicon slot is "abab".
TEST(Lexicon, ScoresPreferLongFrequentSubstrings) {
  ToyTokenizer tok = ToyTokenizer::train(TokenizerScheme::Lexicon, {"ababab"}, 6, 7);
  EXPECT_EQ(tok.vocab_size(), 6);
  EXPECT_EQ(tok.token_id("abab"), 5);

  Encoded e = tok.encode_with_offsets("ababab");
  EXPECT_EQ(e.ids, (std::vector<int>{ToyTokenizer::kBos, 5, 3, 4, ToyTokenizer::kEos}));
  EXPECT_EQ(e.offsets, (std::vector<int>{0, 4, 5, 6, 0}));
}

TEST(Lexicon, GreedyTakesLongestMatch) {
  ToyTokenizer tok =
      ToyTokenizer::train(TokenizerScheme::Lexicon, {"the cat the dog the fox the end"}, 40, 1);
  Encoded e = tok.encode_with_offsets("the the", /*add_specials=*/false);
  // whatever the lexicon holds, the segmentation must cover exactly the text
  std::string rebuilt;
  for (int id : e.ids) {
    rebuilt += tok.token_string(id);
  }
  EXPECT_EQ(rebuilt, "the the");
  // "the" occurs often enough that some multi-char token must start with "th"
  bool has_th = false;
  for (int id = 0; id < tok.vocab_size(); ++id) {
    if (tok.token_string(id).rfind("th", 0) == 0 && tok.token_string(id).size() > 1) {
      has_th = true;
    }
  }
  EXPECT_TRUE(has_th);
}

TEST(Lexicon, SameSeedSameVocab) {
  const std::vector<std::string> corpus = {"mellow yellow fellow", "bellow mellow hollow"};
  ToyTokenizer a = ToyTokenizer::train(TokenizerScheme::Lexicon, corpus, 30, 5);
  ToyTokenizer b = ToyTokenizer::train(TokenizerScheme::Lexicon, corpus, 30, 5);
  ASSERT_EQ(a.vocab_size(), b.vocab_size());
  for (int id = 0; id < a.vocab_size(); ++id) {
    EXPECT_EQ(a.token_string(id), b.token_string(id));
  }
}

TEST(Tokenizer, RejectsUnknownChar) {
  ToyTokenizer tok = ToyTokenizer::train(TokenizerScheme::PairMerge, {"abab"}, 6);
  EXPECT_THROW(tok.encode_with_offsets("abc"), std::invalid_argument);
}

TEST(Tokenizer, RejectsTooSmallVocab) {
  EXPECT_THROW(ToyTokenizer::train(TokenizerScheme::PairMerge, {"abcdefgh"}, 5),
               std::invalid_argument);
}

std::vector<std::string> random_sentences(int count, uint64_t seed) {
  // small alphabet with skewed frequencies so merges actually fire
  const std::string alphabet = "aabbcde ";
  Rng rng(seed);
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) {
    std::string s;
    const int len = 20 + static_cast<int>(rng.uniform_int(40));
    for (int j = 0; j < len; ++j) {
      s += alphabet[rng.uniform_int(alphabet.size())];
    }
    out.push_back(s);
  }
  return out;
}

TEST(Tokenizer, RoundTripAndOffsetInvariants) {
  const std::vector<std::string> corpus = random_sentences(40, 17);
  for (TokenizerScheme scheme : {TokenizerScheme::PairMerge, TokenizerScheme::Lexicon}) {
    ToyTokenizer tok = ToyTokenizer::train(scheme, corpus, 60, 3);
    for (const std::string& text : corpus) {
      Encoded e = tok.encode_with_offsets(text);
      ASSERT_EQ(e.ids.size(), e.offsets.size());
      ASSERT_GE(e.ids.size(), 2u);
      EXPECT_EQ(e.ids.front(), ToyTokenizer::kBos);
      EXPECT_EQ(e.ids.back(), ToyTokenizer::kEos);
      EXPECT_EQ(e.offsets.front(), 0);
      EXPECT_EQ(e.offsets.back(), 0);

      // interior offsets strictly increase and finish at the char count;
      // token strings tile the text exactly (100% char coverage)
      int prev = 0;
      std::string rebuilt;
      for (size_t i = 1; i + 1 < e.ids.size(); ++i) {
        EXPECT_GT(e.offsets[i], prev);
        const std::string& t = tok.token_string(e.ids[i]);
        EXPECT_EQ(e.offsets[i] - prev, static_cast<int>(t.size()));
        prev = e.offsets[i];
        rebuilt += t;
      }
      EXPECT_EQ(prev, static_cast<int>(text.size()));
      EXPECT_EQ(rebuilt, text);
      EXPECT_EQ(tok.decode(e.ids), text);
    }
  }
}

TEST(Tokenizer, SaveLoadRoundTrip) {
  // include a tab so escaping is exercised
  const std::vector<std::string> corpus = {"ab\tab\tab", "ba\tba"};
  for (TokenizerScheme scheme : {TokenizerScheme::PairMerge, TokenizerScheme::Lexicon}) {
    ToyTokenizer tok = ToyTokenizer::train(scheme, corpus, 20, 9);
    const std::string path =
        testing::TempDir() + "tok_" + scheme_name(scheme) + ".txt";
    tok.save(path);
    ToyTokenizer back = ToyTokenizer::load(path);
    ASSERT_EQ(back.vocab_size(), tok.vocab_size());
    for (int id = 0; id < tok.vocab_size(); ++id) {
      EXPECT_EQ(back.token_string(id), tok.token_string(id));
    }
    for (const std::string& text : corpus) {
      Encoded a = tok.encode_with_offsets(text);
      Encoded b = back.encode_with_offsets(text);
      EXPECT_EQ(a.ids, b.ids);
      EXPECT_EQ(a.offsets, b.offsets);
    }
    std::remove(path.c_str());
  }
}

TEST(Tokenizer, LoadRejectsCorruptFiles) {
  const std::string path = testing::TempDir() + "bad_tok.txt";
  {
    std::ofstream f(path);
    f << "not-a-tokenizer v9 what\n";
  }
  EXPECT_THROW(ToyTokenizer::load(path), std::runtime_error);
  std::remove(path.c_str());
  EXPECT_THROW(ToyTokenizer::load("/nonexistent/path/tok.txt"), std::runtime_error);
}

TEST(SharedVocabulary, CoversSpecialsAndCommonStrings) {
  const std::vector<std::string> corpus = random_sentences(30, 23);
  ToyTokenizer a = ToyTokenizer::train(TokenizerScheme::PairMerge, corpus, 50);
  ToyTokenizer b = ToyTokenizer::train(TokenizerScheme::Lexicon, corpus, 50, 4);
  std::vector<SharedToken> shared = shared_vocabulary(a, b);
  ASSERT_FALSE(shared.empty());

  bool has_bos = false;
  for (const SharedToken& st : shared) {
    EXPECT_EQ(a.token_string(st.id_a), st.text);
    EXPECT_EQ(b.token_string(st.id_b), st.text);
    if (st.text == "<bos>") {
      has_bos = true;
    }
  }
  EXPECT_TRUE(has_bos);
  // single chars exist in both vocabularies by construction
  EXPECT_GE(shared.size(), 8u);
  for (size_t i = 1; i < shared.size(); ++i) {
    EXPECT_LT(shared[i - 1].text, shared[i].text);
  }
}

}  // namespace
}  // namespace sra
